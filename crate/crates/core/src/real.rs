//! Float abstraction so the same forward/backward code runs at f32 for
//! training and at f64 under the finite-difference oracles.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

pub trait Real: NdFloat + FromPrimitive {
    /// Lift an f64 constant into this float type.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("constant representable")
    }
}

impl<T: NdFloat + FromPrimitive> Real for T {}
