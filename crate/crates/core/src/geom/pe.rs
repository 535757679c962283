//! Positional encodings.

use std::f64::consts::PI;

use crate::numerics::{Graph, Real, Var};

/// `[sin(2π·xyz·B), cos(2π·xyz·B)]` for `xyz[n×3]` and `b[3×d/2]`.
pub fn fourier_pe<T: Real>(g: &mut Graph<'_, T>, xyz: Var, b: Var) -> Var {
    let proj = g.matmul(xyz, b);
    let proj = g.scale(proj, 2.0 * PI);
    let s = g.sin(proj);
    let c = g.cos(proj);
    g.concat_cols(&[s, c])
}

/// Transformer sinusoid table entry: `pe[2i] = sin(t/10000^(2i/d))`,
/// `pe[2i+1] = cos(t/10000^(2i/d))`.
pub fn sinusoid_pe(t: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = t / 10000f64.powf(i2 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
