//! Atrous spatial pyramid pooling with a tri-level attention unit on every
//! convolutional branch.
//!
//! Branch layout, in concatenation order:
//! 1. a 1x1 convolution (the first pyramid rate),
//! 2. one 3x3 atrous convolution per remaining rate,
//! 3. a global-pooling branch (pool -> 1x1 conv -> relu -> upsample).
//!
//! Each convolutional branch is conv -> batch-norm -> relu -> attention;
//! the pooling branch carries no attention unit. The concatenated stack is
//! fused by a bias-free 1x1 convolution with batch-norm and relu.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::model::attention::Tau;
use crate::nn::ops::{
    bilinear_resize, bilinear_resize_backward, concat_channels, global_avg_pool,
    global_avg_pool_backward, relu, relu_backward, split_channels,
};
use crate::nn::{join_name, BatchNorm2d, BufferMut, Conv2d, Mode, ParamMut, Parameterized, Rng, Scalar};

struct ConvBranch<F> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
    tau: Tau<F>,
    act: Option<Array4<F>>,
}

struct PoolCache {
    height: usize,
    width: usize,
}

/// Pyramid rates are judged against the feature map they will see: a rate
/// at or beyond twice the smaller spatial extent samples entirely outside
/// any plausible context window and is rejected as a configuration error.
fn check_rates(rates: &[usize], height: usize, width: usize) -> Result<()> {
    let limit = 2 * height.min(width);
    for &r in &rates[1..] {
        if r >= limit {
            return Err(Error::Config(format!(
                "pyramid rate {r} is unusable on a {height}x{width} feature map \
                 (must be below {limit})"
            )));
        }
    }
    Ok(())
}

/// The attention-gated pyramid head applied to the encoder's top features.
pub struct AsppTau<F> {
    branches: Vec<ConvBranch<F>>,
    pool_conv: Conv2d<F>,
    fuse: Conv2d<F>,
    fuse_bn: BatchNorm2d<F>,
    fuse_act: Option<Array4<F>>,
    pool_cache: Option<PoolCache>,
    rates: Vec<usize>,
    in_channels: usize,
    out_channels: usize,
}

impl<F: Scalar> AsppTau<F> {
    /// `feature` is the spatial extent the head will operate on (encoder
    /// output size); rates incompatible with it are rejected up front.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        rates: &[usize],
        feature: (usize, usize),
        se_reduction: usize,
        tau_spatial_kernel: usize,
        tau_residual: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Config("pyramid needs at least one rate".to_string()));
        }
        check_rates(rates, feature.0, feature.1)?;
        let mut branches = Vec::with_capacity(rates.len());
        for (i, &rate) in rates.iter().enumerate() {
            let (kernel, dilation) = if i == 0 { (1, 1) } else { (3, rate) };
            branches.push(ConvBranch {
                conv: Conv2d::new(in_channels, out_channels, kernel, 1, dilation, false, rng),
                bn: BatchNorm2d::new(out_channels),
                tau: Tau::new(out_channels, se_reduction, tau_spatial_kernel, tau_residual, rng)?,
                act: None,
            });
        }
        let pool_conv = Conv2d::new(in_channels, out_channels, 1, 1, 1, true, rng);
        let fuse = Conv2d::new(
            (rates.len() + 1) * out_channels,
            out_channels,
            1,
            1,
            1,
            false,
            rng,
        );
        Ok(AsppTau {
            branches,
            pool_conv,
            fuse,
            fuse_bn: BatchNorm2d::new(out_channels),
            fuse_act: None,
            pool_cache: None,
            rates: rates.to_vec(),
            in_channels,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let (b, h, w, c) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "pyramid head expects {} channels, got {c}",
                self.in_channels
            )));
        }
        check_rates(&self.rates, h, w)?;

        let train = mode == Mode::Train;
        let mut outs: Vec<Array4<F>> = Vec::with_capacity(self.branches.len() + 1);
        for branch in &mut self.branches {
            let t = branch.conv.forward(x, mode)?;
            let u = branch.bn.forward(&t, mode);
            let v = relu(&u);
            let o = branch.tau.forward(&v, mode)?;
            if train {
                branch.act = Some(v);
            }
            outs.push(o);
        }

        // Image-level context: pool to 1x1, project, and broadcast back.
        let pooled = global_avg_pool(x)
            .into_shape_with_order((b, 1, 1, c))
            .unwrap();
        let q = self.pool_conv.forward(&pooled, mode)?;
        let up = bilinear_resize(&q, h, w);
        if train {
            self.pool_cache = Some(PoolCache {
                height: h,
                width: w,
            });
        }
        outs.push(up);

        let refs: Vec<&Array4<F>> = outs.iter().collect();
        let cat = concat_channels(&refs)?;
        let f = self.fuse.forward(&cat, mode)?;
        let g = self.fuse_bn.forward(&f, mode);
        let y = relu(&g);
        if train {
            self.fuse_act = Some(y.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let fuse_act = self.fuse_act.take().expect("pyramid backward without forward");
        let g = relu_backward(gy, &fuse_act);
        let g = self.fuse_bn.backward(&g);
        let gcat = self.fuse.backward(&g);
        let sizes = vec![self.out_channels; self.branches.len() + 1];
        let mut parts = split_channels(&gcat, &sizes).expect("fused channel split");

        let gpool = parts.pop().expect("pooling branch gradient");
        let PoolCache { height, width } = self
            .pool_cache
            .take()
            .expect("pyramid backward without forward");
        let gq = bilinear_resize_backward(&gpool, 1, 1);
        let gpooled = self.pool_conv.backward(&gq);
        let (b, _, _, _) = gpooled.dim();
        let gpool2 = gpooled.into_shape_with_order((b, self.in_channels)).unwrap();
        let mut gx = global_avg_pool_backward(&gpool2, height, width);

        for (branch, gpart) in self.branches.iter_mut().zip(parts.iter()) {
            let gtau = branch.tau.backward(gpart);
            let act = branch.act.take().expect("branch backward without forward");
            let gv = relu_backward(&gtau, &act);
            let gu = branch.bn.backward(&gv);
            gx = gx + branch.conv.backward(&gu);
        }
        gx
    }
}

impl<F: Scalar> Parameterized<F> for AsppTau<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        for (i, branch) in self.branches.iter_mut().enumerate() {
            let base = join_name(prefix, &format!("branch{i}"));
            branch.conv.collect_params(&join_name(&base, "conv"), out);
            branch.bn.collect_params(&join_name(&base, "bn"), out);
            branch.tau.collect_params(&join_name(&base, "tau"), out);
        }
        self.pool_conv.collect_params(&join_name(prefix, "pool_conv"), out);
        self.fuse.collect_params(&join_name(prefix, "fuse"), out);
        self.fuse_bn.collect_params(&join_name(prefix, "fuse_bn"), out);
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        for (i, branch) in self.branches.iter_mut().enumerate() {
            let base = join_name(prefix, &format!("branch{i}"));
            branch.bn.collect_buffers(&join_name(&base, "bn"), out);
        }
        self.fuse_bn.collect_buffers(&join_name(prefix, "fuse_bn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use crate::nn::{sample_normal, seeded};

    fn random_input(b: usize, h: usize, w: usize, c: usize, seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed);
        Array4::from_shape_fn((b, h, w, c), |_| sample_normal(&mut rng))
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = seeded(1);
        let mut head =
            AsppTau::<f64>::new(6, 8, &[1, 2, 3], (8, 8), 2, 3, false, &mut rng).unwrap();
        let x = random_input(2, 8, 8, 6, 5);
        let y = head.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (2, 8, 8, 8));

        let mut rng2 = seeded(1);
        let mut head2 =
            AsppTau::<f64>::new(6, 8, &[1, 2, 3], (8, 8), 2, 3, false, &mut rng2).unwrap();
        let y2 = head2.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn zero_input_maps_to_zero_output() {
        let mut rng = seeded(2);
        let mut head =
            AsppTau::<f64>::new(4, 6, &[1, 2], (6, 6), 2, 3, false, &mut rng).unwrap();
        let x = Array4::<f64>::zeros((2, 6, 6, 4));
        for mode in [Mode::Train, Mode::Eval] {
            let y = head.forward(&x, mode).unwrap();
            assert!(y.iter().all(|&v| v == 0.0), "{mode:?}");
        }
    }

    #[test]
    fn oversized_rate_is_a_config_error() {
        let mut rng = seeded(3);
        let err = AsppTau::<f64>::new(4, 6, &[1, 6, 12], (4, 4), 2, 3, false, &mut rng)
            .err()
            .expect("rate 12 on a 4x4 map must be rejected");
        assert!(matches!(err, Error::Config(_)), "{err:?}");

        // The same rates are fine on a 16x16 map (threshold is 32).
        AsppTau::<f64>::new(4, 6, &[1, 6, 12, 18], (16, 16), 2, 3, false, &mut rng).unwrap();
    }

    #[test]
    fn forward_rejects_incompatible_runtime_extent() {
        let mut rng = seeded(4);
        let mut head =
            AsppTau::<f64>::new(4, 6, &[1, 3], (8, 8), 2, 3, false, &mut rng).unwrap();
        let x = Array4::<f64>::zeros((1, 1, 1, 4));
        assert!(matches!(head.forward(&x, Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn single_rate_head_matches_manual_composition() {
        let mut rng = seeded(6);
        let mut head = AsppTau::<f64>::new(3, 4, &[1], (5, 5), 2, 3, false, &mut rng).unwrap();
        let x = random_input(1, 5, 5, 3, 20);
        let y = head.forward(&x, Mode::Eval).unwrap();

        // Re-run the same computation step by step through the head's own
        // layers: branch, pooling path, concatenation, fusion.
        let branch = &mut head.branches[0];
        let t = branch.conv.forward(&x, Mode::Eval).unwrap();
        let u = branch.bn.forward(&t, Mode::Eval);
        let v = relu(&u);
        let o = branch.tau.forward(&v, Mode::Eval).unwrap();
        let pooled = global_avg_pool(&x)
            .into_shape_with_order((1, 1, 1, 3))
            .unwrap();
        let q = head.pool_conv.forward(&pooled, Mode::Eval).unwrap();
        let up = bilinear_resize(&q, 5, 5);
        let cat = concat_channels(&[&o, &up]).unwrap();
        let f = head.fuse.forward(&cat, Mode::Eval).unwrap();
        let g = head.fuse_bn.forward(&f, Mode::Eval);
        assert_eq!(y, relu(&g));
    }

    fn flip_w(x: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, c) = x.dim();
        Array4::from_shape_fn((b, h, w, c), |(bi, i, j, ch)| x[[bi, i, w - 1 - j, ch]])
    }

    /// Mirrors every spatial kernel (rank-4 weight) along its width axis.
    fn mirror_kernels(head: &mut AsppTau<f64>) {
        let mut params = Vec::new();
        head.collect_params("", &mut params);
        for p in params.iter_mut() {
            if p.value.ndim() != 4 {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
            for a in 0..kh {
                for b in 0..kw / 2 {
                    for ci in 0..cin {
                        for co in 0..cout {
                            let left = p.value[[a, b, ci, co]];
                            p.value[[a, b, ci, co]] = p.value[[a, kw - 1 - b, ci, co]];
                            p.value[[a, kw - 1 - b, ci, co]] = left;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mirrored_kernels_make_the_head_flip_equivariant() {
        // Every stage is stride 1 with symmetric padding, the pooled
        // statistics are flip-invariant, and pointwise gates commute with
        // flips -- so running the width-mirrored kernels on the mirrored
        // input must mirror the output exactly, borders included. This
        // pins the geometry of every conv, gate, and upsample in the head.
        let mut rng = seeded(7);
        let mut head =
            AsppTau::<f64>::new(3, 4, &[1, 2, 3], (24, 24), 2, 7, false, &mut rng).unwrap();
        let x = random_input(1, 24, 24, 3, 30);
        let y = head.forward(&x, Mode::Eval).unwrap();
        mirror_kernels(&mut head);
        let yf = head.forward(&flip_w(&x), Mode::Eval).unwrap();
        let unflipped = flip_w(&yf);
        for i in 0..24 {
            for j in 0..24 {
                for ch in 0..4 {
                    let d = (y[[0, i, j, ch]] - unflipped[[0, i, j, ch]]).abs();
                    assert!(d < 1e-9, "({i},{j},{ch}): {d}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(5);
        let mut head =
            AsppTau::<f64>::new(3, 4, &[1, 2], (6, 6), 2, 3, false, &mut rng).unwrap();
        let x = random_input(2, 6, 6, 3, 7);
        let r = random_input(2, 6, 6, 4, 8);
        let report = check_params(
            &mut head,
            |blk, with_grads| {
                let y = blk.forward(&x, Mode::Train).unwrap();
                let loss = (&y * &r).sum();
                if with_grads {
                    blk.backward(&r);
                }
                loss
            },
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
