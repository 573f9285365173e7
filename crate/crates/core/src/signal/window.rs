use crate::Scalar;
use serde::{Deserialize, Serialize};

/// Analysis window shape. Only Hann is currently used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WindowKind {
    #[default]
    Hann,
}

/// Sampled window of the given length. The Hann window is symmetric
/// (`w[i] = w[len-1-i]`), which keeps magnitude spectra invariant under
/// time reversal of a frame.
pub fn window<T: Scalar>(kind: WindowKind, len: usize) -> Vec<T> {
    match kind {
        WindowKind::Hann => hann(len),
    }
}

fn hann<T: Scalar>(len: usize) -> Vec<T> {
    if len == 1 {
        return vec![T::one()];
    }
    // Mirror the first half so symmetry holds bitwise, not just to rounding.
    let mut w = vec![T::zero(); len];
    for i in 0..len.div_ceil(2) {
        let x = 2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64;
        let v = T::of(0.5 * (1.0 - x.cos()));
        w[i] = v;
        w[len - 1 - i] = v;
    }
    w
}
