//! Scalar abstraction so the model can train in f32 and be verified in f64.

use rand::distr::uniform::SampleUniform;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the model is generic over. Training runs in `f32`,
/// the gradient verification harness in `f64`; both share one code path.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + SampleUniform
    + Sum<Self>
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
