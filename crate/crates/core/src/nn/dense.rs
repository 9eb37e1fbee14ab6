//! Fully-connected layer on `(B, N)` matrices.

use ndarray::{Array1, Array2, Axis};

use super::{join_name, sample_normal, BufferMut, Mode, ParamMut, Parameterized, Rng, Scalar};

/// `y = x.dot(w) + b` with He-normal initialized weights and zero biases.
pub struct Dense<F> {
    w: Array2<F>,
    b: Array1<F>,
    gw: Array2<F>,
    gb: Array1<F>,
    cache_x: Option<Array2<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((input, output), |_| F::from_f64(sample_normal(rng) * std)),
            b: Array1::zeros(output),
            gw: Array2::zeros((input, output)),
            gb: Array1::zeros(output),
            cache_x: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        x.dot(&self.w) + &self.b
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// Requires a preceding train-mode forward.
    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let x = self
            .cache_x
            .as_ref()
            .expect("dense backward without train-mode forward");
        self.gw += &x.t().dot(gy);
        self.gb += &gy.sum_axis(Axis(0));
        super::standardize2(gy.dot(&self.w.t()))
    }
}

impl<F: Scalar> Parameterized<F> for Dense<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            name: join_name(prefix, "w"),
            value: self.w.view_mut().into_dyn(),
            grad: self.gw.view_mut().into_dyn(),
        });
        out.push(ParamMut {
            name: join_name(prefix, "b"),
            value: self.b.view_mut().into_dyn(),
            grad: self.gb.view_mut().into_dyn(),
        });
    }

    fn collect_buffers<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<BufferMut<'a, F>>) {}
}
