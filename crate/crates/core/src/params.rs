//! Named parameter traversal shared by the network, the discriminators, the
//! optimizer and checkpoints.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// A structure owning named parameter tensors. Gradients use the same type,
/// so gradient and parameter traversals line up name for name.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Zeroes every tensor in place.
    fn zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// `self += k * other`; both must share the same layout.
    fn add_scaled(&mut self, other: &Self, k: f64)
    where
        Self: Sized,
    {
        let src: BTreeMap<String, &Tensor> = other.named().into_iter().collect();
        self.visit_mut("", &mut |n, t| {
            t.add_scaled(src[&n], k).expect("parameter layouts differ");
        });
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
    }

    fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Overwrites every tensor from `map`; returns the names that were missing
    /// or had the wrong shape.
    fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Vec<String> {
        let mut bad = Vec::new();
        self.visit_mut("", &mut |n, t| match map.get(&n) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            _ => bad.push(n),
        });
        bad
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Parameterized`] for a struct whose listed fields are
/// `Tensor`s.
#[macro_export]
macro_rules! tensor_params {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::params::Parameterized for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::Tensor)) {
                $( f($crate::params::join(prefix, stringify!($field)), &self.$field); )+
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::Tensor)) {
                $( f($crate::params::join(prefix, stringify!($field)), &mut self.$field); )+
            }
        }
    };
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
