//! Per-channel batch normalization over `(B, H, W)` with running statistics
//! for inference.

use ndarray::{Array1, Array4};

use super::{join_name, BufferMut, Mode, ParamMut, Parameterized, Scalar};

struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
}

/// Train mode normalizes with batch statistics (biased variance) and updates
/// running statistics with momentum 0.1; eval mode normalizes with the
/// frozen running statistics, making the forward pass a pure per-sample
/// function.
pub struct BatchNorm2d<F> {
    gamma: Array1<F>,
    beta: Array1<F>,
    ggamma: Array1<F>,
    gbeta: Array1<F>,
    running_mean: Array1<F>,
    running_var: Array1<F>,
    momentum: F,
    eps: F,
    cache: Option<BnCache<F>>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            momentum: F::from_f64(0.1),
            eps: F::from_f64(1e-5),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channel mismatch");
        let mut y = Array4::zeros((b, h, w, c));
        match mode {
            Mode::Train => {
                let n = F::from_f64((b * h * w) as f64);
                let mut mean = Array1::<F>::zeros(c);
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            for ch in 0..c {
                                mean[ch] += x[[bi, i, j, ch]];
                            }
                        }
                    }
                }
                mean.mapv_inplace(|v| v / n);
                let mut var = Array1::<F>::zeros(c);
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            for ch in 0..c {
                                let d = x[[bi, i, j, ch]] - mean[ch];
                                var[ch] += d * d;
                            }
                        }
                    }
                }
                var.mapv_inplace(|v| v / n);
                let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
                let mut xhat = Array4::zeros((b, h, w, c));
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            for ch in 0..c {
                                let xh = (x[[bi, i, j, ch]] - mean[ch]) * inv_std[ch];
                                xhat[[bi, i, j, ch]] = xh;
                                y[[bi, i, j, ch]] = self.gamma[ch] * xh + self.beta[ch];
                            }
                        }
                    }
                }
                let m = self.momentum;
                let keep = F::one() - m;
                for ch in 0..c {
                    self.running_mean[ch] = keep * self.running_mean[ch] + m * mean[ch];
                    self.running_var[ch] = keep * self.running_var[ch] + m * var[ch];
                }
                self.cache = Some(BnCache { xhat, inv_std });
            }
            Mode::Eval => {
                let inv_std = self
                    .running_var
                    .mapv(|v| F::one() / (v + self.eps).sqrt());
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            for ch in 0..c {
                                let xh = (x[[bi, i, j, ch]] - self.running_mean[ch]) * inv_std[ch];
                                y[[bi, i, j, ch]] = self.gamma[ch] * xh + self.beta[ch];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    /// Uses the standard batch-statistics backward:
    /// `gx = gamma*inv_std/N * (N*gy - sum(gy) - xhat*sum(gy*xhat))`.
    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .expect("batch-norm backward without train-mode forward");
        let (b, h, w, c) = gy.dim();
        let n = F::from_f64((b * h * w) as f64);
        let mut sum_gy = Array1::<F>::zeros(c);
        let mut sum_gy_xhat = Array1::<F>::zeros(c);
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let g = gy[[bi, i, j, ch]];
                        sum_gy[ch] += g;
                        sum_gy_xhat[ch] += g * xhat[[bi, i, j, ch]];
                    }
                }
            }
        }
        self.gbeta += &sum_gy;
        self.ggamma += &sum_gy_xhat;
        let mut gx = Array4::zeros((b, h, w, c));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let g = gy[[bi, i, j, ch]];
                        gx[[bi, i, j, ch]] = self.gamma[ch] * inv_std[ch] / n
                            * (n * g - sum_gy[ch] - xhat[[bi, i, j, ch]] * sum_gy_xhat[ch]);
                    }
                }
            }
        }
        gx
    }
}

impl<F: Scalar> Parameterized<F> for BatchNorm2d<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            name: join_name(prefix, "gamma"),
            value: self.gamma.view_mut().into_dyn(),
            grad: self.ggamma.view_mut().into_dyn(),
        });
        out.push(ParamMut {
            name: join_name(prefix, "beta"),
            value: self.beta.view_mut().into_dyn(),
            grad: self.gbeta.view_mut().into_dyn(),
        });
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        out.push(BufferMut {
            name: join_name(prefix, "running_mean"),
            value: self.running_mean.view_mut().into_dyn(),
        });
        out.push(BufferMut {
            name: join_name(prefix, "running_var"),
            value: self.running_var.view_mut().into_dyn(),
        });
    }
}
