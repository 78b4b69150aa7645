pub mod activation;
pub mod adam;
pub mod caplt;
pub mod dataset;
pub mod domain_adapt;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod params;
pub mod postprocess;
pub mod pseudo_label;
pub mod rng;
pub mod sobel;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{CaplError, Result};
pub use labels::{ClassLabelMap, InstanceLabelMap, NucleusClass, NUM_CLASSES};
pub use losses::LossValue;
pub use rng::SeedStream;
pub use tensor::{hadamard, Tensor};
