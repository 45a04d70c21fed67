//! Minimal reverse-mode differentiable array engine.
//!
//! Provides exactly the operations the spectral networks need: 1-D
//! convolution and its transpose, batch normalization, per-channel
//! statistics, dense layers, a handful of elementwise maps and the
//! fused loss kernels. Parameters live outside the tape and are bound to
//! it once per forward episode.

mod conv;
mod optim;
mod tape;
mod tensor;

pub use conv::{conv_out_len, tconv_out_len};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{AnchorSet, BnMode, ParamId, RunningStats, Tape, Var};
pub use tensor::{Real, Tensor};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Floor applied to every standard deviation and vector norm.
pub const STD_EPS: f64 = 1e-5;

/// Exponential-moving-average factor of batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// A named trainable array.
///
/// `frozen` is an optimizer contract: a frozen parameter may still receive
/// a gradient, but [`AdamW::step`] leaves it and its moments untouched.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(id: ParamId, name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            id,
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        match self.grad.as_mut() {
            Some(acc) => acc.add_assign(g.data()),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.param(self.id, &self.value)
    }
}

/// Hands out sequential parameter ids and draws initial values.
pub struct ParamFactory<'r, R: Rng> {
    next_id: ParamId,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamFactory<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { next_id: 0, rng }
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn issued(&self) -> usize {
        self.next_id
    }

    pub fn make<T: Real>(&mut self, name: impl Into<String>, value: Tensor<T>) -> Parameter<T> {
        let p = Parameter::new(self.next_id, name, value);
        self.next_id += 1;
        p
    }

    /// Kaiming-uniform (fan-in, ReLU gain): `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn kaiming<T: Real>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Parameter<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape and data agree");
        self.make(name, value)
    }

    pub fn constant<T: Real>(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Parameter<T> {
        self.make(name, Tensor::full(shape, T::lit(v)))
    }
}
