//! Minimal CPU neural-network toolkit on channels-last `(B, H, W, C)`
//! ndarray tensors: convolution, dense, batch-norm, and shape/activation
//! ops, each with an explicit backward pass, plus a finite-difference
//! gradient-check harness.
//!
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient verification runs in `f64`.

pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod norm;
pub mod ops;

pub use conv::{Conv2d, DepthwiseConv2d};
pub use dense::Dense;
pub use norm::BatchNorm2d;

use ndarray::{Array2, ArrayViewMutD, LinalgScalar, ScalarOperand};
use rand::{Rng as _, SeedableRng};

/// Element type of all tensors: `f32` for speed, `f64` for verification.
pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn maxv(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }

    fn minv(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }

    /// Numerically stable logistic function.
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Forces standard (row-major, contiguous) layout. Matrix products can
/// come back with reversed axes when an operand is a transposed view, and
/// downstream reshapes and slice-based kernels assume contiguity.
pub(crate) fn standardize2<F: Scalar>(a: Array2<F>) -> Array2<F> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect())
            .expect("copy preserves the element count")
    }
}

/// The seeded generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// One standard-normal draw (Box-Muller; one uniform pair per sample keeps
/// the stream position deterministic).
pub fn sample_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Named mutable view of one trainable tensor and its gradient accumulator.
pub struct ParamMut<'a, F> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// Named mutable view of one non-trainable state tensor (running statistics).
pub struct BufferMut<'a, F> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
}

/// Uniform access to a block's tensors for the optimizer, the gradient
/// checker, and checkpoint serialization. Visitation order is fixed by the
/// implementation, which the optimizer relies on for state pairing.
pub trait Parameterized<F: Scalar> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>);

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        let _ = (prefix, out);
    }
}

/// Resets every gradient accumulator to zero.
pub fn zero_grads<F: Scalar>(block: &mut dyn Parameterized<F>) {
    let mut params = Vec::new();
    block.collect_params("", &mut params);
    for p in &mut params {
        p.grad.fill(F::zero());
    }
}

/// Total number of trainable scalar values.
pub fn num_params<F: Scalar>(block: &mut dyn Parameterized<F>) -> usize {
    let mut params = Vec::new();
    block.collect_params("", &mut params);
    params.iter().map(|p| p.value.len()).sum()
}

/// Whether training (batch statistics, caches retained) or inference
/// (frozen statistics, per-sample pure) semantics apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn join_name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(f64::sigmoid(0.0), 0.5);
        assert!(f64::sigmoid(1000.0) <= 1.0);
        assert!(f64::sigmoid(-1000.0) >= 0.0);
        assert!((f64::sigmoid(2.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((f32::sigmoid(-3.0) - 0.047425873).abs() < 1e-6);
    }

    #[test]
    fn seeded_normal_stream_is_deterministic() {
        let mut a = seeded(7);
        let mut b = seeded(7);
        for _ in 0..100 {
            assert_eq!(sample_normal(&mut a), sample_normal(&mut b));
        }
        // Rough sanity on the distribution.
        let mut rng = seeded(1);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
