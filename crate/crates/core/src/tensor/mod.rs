//! Dense 4-D tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value container; all differentiable computation is
//! recorded on a [`Tape`](tape::Tape), which owns intermediate buffers and
//! replays the graph in reverse for gradients. Long-lived parameters live in
//! a [`Params`](store::Params) set and are bound to a fresh tape per step.

pub mod gradcheck;
pub mod optim;
pub mod store;
pub mod tape;

pub use optim::{Adam, AdamState};
pub use store::Params;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;

/// (batch, channels, height, width)
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.b, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar (1,1,1,1) tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fan-in/fan-out of a 4-D kernel shape (out, in, kh, kw).
fn fans(shape: Shape) -> (usize, usize) {
    let receptive = shape.h * shape.w;
    (shape.c * receptive, shape.b * receptive)
}

/// Glorot (uniform) initialization: values in ±sqrt(6/(fan_in+fan_out)),
/// deterministic for a given RNG state.
pub fn glorot_init<R: Rng>(shape: Shape, rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.len())
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor { shape, data }
}
