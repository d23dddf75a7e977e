//! Dense tensors with reverse-mode differentiation.
//!
//! Everything the three forecasters need runs on [`Tensor`] values pushed
//! through a [`Graph`] tape: batched matmul, softmax, layer norm, GELU,
//! dropout and friends, each with a hand-written backward rule. The module is
//! generic over [`Real`] so an experiment can run in f64 (default, used by all
//! gradient tests) or f32 (faster matrix throughput).

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_detailed, GradCheckReport};
pub use graph::{AttentionMap, Graph, ValueId};
pub use tensor::{broadcast_shapes, Tensor};

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar types the numeric stack is instantiated with.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: &'static str;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}

/// Lossless-enough conversion from f64 literals into the active scalar type.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 -> Real conversion")
}
