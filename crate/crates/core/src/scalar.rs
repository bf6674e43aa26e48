use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign, NumCast};

/// Element precision tag carried by checkpoints and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element type for every numeric kernel: f32 for training runs,
/// f64 for finite-difference verification.
pub trait Scalar: Float + NumAssign + NumCast + Debug + Display + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to any scalar")
    }

    fn of_usize(v: usize) -> Self {
        <Self as NumCast>::from(v).expect("usize converts to any scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}
