//! 3x3 Sobel responses over the valid interior of a plane.
//!
//! `Kx = [-1 0 1; -2 0 2; -1 0 1]` (horizontal derivative) and `Ky = Kx^T`,
//! applied as correlation. Border pixels have no valid response and are
//! reported as zero.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn kernel(axis: Axis) -> &'static [[f64; 3]; 3] {
    match axis {
        Axis::Horizontal => &KX,
        Axis::Vertical => &KY,
    }
}

/// Whether `(r, c)` has a full 3x3 neighbourhood.
#[inline]
pub fn is_interior(r: usize, c: usize, h: usize, w: usize) -> bool {
    r >= 1 && c >= 1 && r + 1 < h && c + 1 < w
}

/// Sobel response along `axis`; zero on the one-pixel border.
pub fn response(plane: &[f64], h: usize, w: usize, axis: Axis) -> Vec<f64> {
    let k = kernel(axis);
    let mut out = vec![0.0; h * w];
    if h < 3 || w < 3 {
        return out;
    }
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                let base = (r + i - 1) * w + c - 1;
                acc += row[0] * plane[base] + row[1] * plane[base + 1] + row[2] * plane[base + 2];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Adjoint of [`response`]: accumulates `K^T g` into `grad_plane`, where `g`
/// is the upstream gradient per output pixel (border entries ignored).
pub fn accumulate_adjoint(upstream: &[f64], h: usize, w: usize, axis: Axis, grad_plane: &mut [f64]) {
    let k = kernel(axis);
    if h < 3 || w < 3 {
        return;
    }
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let g = upstream[r * w + c];
            if g == 0.0 {
                continue;
            }
            for (i, row) in k.iter().enumerate() {
                let base = (r + i - 1) * w + c - 1;
                grad_plane[base] += row[0] * g;
                grad_plane[base + 1] += row[1] * g;
                grad_plane[base + 2] += row[2] * g;
            }
        }
    }
}
