//! Dense reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar result propagates adjoints back to every
//! node that was marked as requiring gradients. The engine is generic over
//! [`Real`] so the same network code runs in `f64` for gradient checks and
//! `f32` for training.

mod adam;
mod checkpoint;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{check_gradients, relative_error};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use num_traits::{Float, FromPrimitive};
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

/// Floating-point element type of tensors.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Sum + AddAssign + MulAssign + Send + Sync + 'static
{
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Widening used by accumulators; reductions run in f64 at either precision.
    fn widen(self) -> f64;

    fn narrow(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }
}
