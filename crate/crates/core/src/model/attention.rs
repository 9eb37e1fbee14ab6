//! Gating blocks: squeeze-excitation, channel / spatial / pixel attention,
//! and their three-level composition.
//!
//! Every block multiplies its input by a sigmoid gate, so zeros are
//! preserved exactly and (in the default attenuation mode) `|out| <= |in|`
//! elementwise. The optional residual mode rescales by `1 + gate` instead.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::nn::ops::{
    channel_stats, channel_stats_backward, global_avg_pool, global_avg_pool_backward,
    sigmoid_backward,
};
use crate::nn::{
    join_name, BufferMut, Conv2d, Dense, Mode, ParamMut, Parameterized, Rng, Scalar,
};

/// The three gate maps produced by one [`Tau`] pass.
pub struct AttentionGates<F> {
    /// `(B, 1, 1, n)`, strictly inside (0,1).
    pub channel_gate: Array4<F>,
    /// `(B, h, w, 1)`, strictly inside (0,1).
    pub spatial_gate: Array4<F>,
    /// `(B, h, w, n)`, strictly inside (0,1).
    pub pixel_gate: Array4<F>,
}

struct SeCache<F> {
    x: Array4<F>,
    h1: Array2<F>,
    gate: Array2<F>,
}

/// Squeeze-and-excitation: global average pool -> dense bottleneck ->
/// sigmoid channel weights -> per-channel rescale.
pub struct SeBlock<F> {
    fc1: Dense<F>,
    fc2: Dense<F>,
    residual: bool,
    cache: Option<SeCache<F>>,
}

/// Channel attention computes the same pool -> bottleneck -> sigmoid gate
/// as squeeze-excitation; it differs only in where it sits (first stage of
/// the tri-level unit).
pub type ChannelAttention<F> = SeBlock<F>;

impl<F: Scalar> SeBlock<F> {
    /// `channels` must be divisible by `reduction` with a nonzero quotient.
    pub fn new(channels: usize, reduction: usize, residual: bool, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels / reduction == 0 {
            return Err(Error::Shape(format!(
                "reduction {reduction} incompatible with {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            fc1: Dense::new(channels, hidden, rng),
            fc2: Dense::new(hidden, channels, rng),
            residual,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.input_dim()
    }

    /// Returns the rescaled features and the `(B, n)` gate.
    pub fn forward_with_gate(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array4<F>, Array2<F>)> {
        let (b, h, w, c) = x.dim();
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "gate block expects {} channels, got {c}",
                self.channels()
            )));
        }
        let pooled = global_avg_pool(x);
        let a1 = self.fc1.forward(&pooled, mode);
        let h1 = a1.mapv(|v| v.maxv(F::zero()));
        let a2 = self.fc2.forward(&h1, mode);
        let gate = a2.mapv(Scalar::sigmoid);
        let offset = if self.residual { F::one() } else { F::zero() };
        let mut y = Array4::zeros((b, h, w, c));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        y[[bi, i, j, ch]] = x[[bi, i, j, ch]] * (offset + gate[[bi, ch]]);
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some(SeCache {
                x: x.clone(),
                h1,
                gate: gate.clone(),
            });
        }
        Ok((y, gate))
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        Ok(self.forward_with_gate(x, mode)?.0)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let SeCache { x, h1, gate } = self
            .cache
            .take()
            .expect("gate-block backward without train-mode forward");
        let (b, h, w, c) = x.dim();
        let offset = if self.residual { F::one() } else { F::zero() };
        let mut gx = Array4::zeros((b, h, w, c));
        let mut ggate = Array2::<F>::zeros((b, c));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let g = gy[[bi, i, j, ch]];
                        gx[[bi, i, j, ch]] = g * (offset + gate[[bi, ch]]);
                        ggate[[bi, ch]] += g * x[[bi, i, j, ch]];
                    }
                }
            }
        }
        let mut ga2 = ggate;
        ga2.zip_mut_with(&gate, |g, &s| *g *= s * (F::one() - s));
        let mut ga1 = self.fc2.backward(&ga2);
        ga1.zip_mut_with(&h1, |g, &v| {
            if v <= F::zero() {
                *g = F::zero();
            }
        });
        let gpooled = self.fc1.backward(&ga1);
        gx + global_avg_pool_backward(&gpooled, h, w)
    }
}

impl<F: Scalar> Parameterized<F> for SeBlock<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.fc1.collect_params(&join_name(prefix, "fc1"), out);
        self.fc2.collect_params(&join_name(prefix, "fc2"), out);
    }
}

struct SaCache<F> {
    x: Array4<F>,
    argmax: Array3<usize>,
    gate: Array4<F>,
}

/// Spatial attention: channel-wise mean and max maps -> one k x k conv ->
/// sigmoid gate over positions -> per-position rescale.
pub struct SpatialAttention<F> {
    conv: Conv2d<F>,
    residual: bool,
    cache: Option<SaCache<F>>,
}

impl<F: Scalar> SpatialAttention<F> {
    pub fn new(kernel: usize, residual: bool, rng: &mut Rng) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Shape(format!(
                "spatial attention kernel must be odd, got {kernel}"
            )));
        }
        Ok(SpatialAttention {
            conv: Conv2d::new(2, 1, kernel, 1, 1, true, rng),
            residual,
            cache: None,
        })
    }

    /// Returns the rescaled features and the `(B, h, w, 1)` gate.
    pub fn forward_with_gate(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array4<F>, Array4<F>)> {
        let (b, h, w, c) = x.dim();
        let stats = channel_stats(x);
        // Channel 0 carries the mean map, channel 1 the max map.
        let joined = crate::nn::ops::concat_channels(&[&stats.mean, &stats.max])?;
        let a = self.conv.forward(&joined, mode)?;
        let gate = a.mapv(Scalar::sigmoid);
        let offset = if self.residual { F::one() } else { F::zero() };
        let mut y = Array4::zeros((b, h, w, c));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let m = offset + gate[[bi, i, j, 0]];
                    for ch in 0..c {
                        y[[bi, i, j, ch]] = x[[bi, i, j, ch]] * m;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some(SaCache {
                x: x.clone(),
                argmax: stats.argmax,
                gate: gate.clone(),
            });
        }
        Ok((y, gate))
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        Ok(self.forward_with_gate(x, mode)?.0)
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let SaCache { x, argmax, gate } = self
            .cache
            .take()
            .expect("spatial attention backward without train-mode forward");
        let (b, h, w, c) = x.dim();
        let offset = if self.residual { F::one() } else { F::zero() };
        let mut gx = Array4::zeros((b, h, w, c));
        let mut ggate = Array4::<F>::zeros((b, h, w, 1));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let m = offset + gate[[bi, i, j, 0]];
                    let mut acc = F::zero();
                    for ch in 0..c {
                        let g = gy[[bi, i, j, ch]];
                        gx[[bi, i, j, ch]] = g * m;
                        acc += g * x[[bi, i, j, ch]];
                    }
                    ggate[[bi, i, j, 0]] = acc;
                }
            }
        }
        let ga = sigmoid_backward(&ggate, &gate);
        let gjoined = self.conv.backward(&ga);
        let parts = crate::nn::ops::split_channels(&gjoined, &[1, 1]).expect("two stat channels");
        gx + channel_stats_backward(&parts[0], &parts[1], &argmax, c)
    }
}

impl<F: Scalar> Parameterized<F> for SpatialAttention<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.conv.collect_params(&join_name(prefix, "conv"), out);
    }
}

struct PaCache<F> {
    x: Array4<F>,
    gate: Array4<F>,
}

/// Pixel attention: a 1x1 convolution n -> n plus sigmoid gives every
/// feature value its own gate.
pub struct PixelAttention<F> {
    conv: Conv2d<F>,
    residual: bool,
    cache: Option<PaCache<F>>,
}

impl<F: Scalar> PixelAttention<F> {
    pub fn new(channels: usize, residual: bool, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("pixel attention needs >= 1 channel".to_string()));
        }
        Ok(PixelAttention {
            conv: Conv2d::new(channels, channels, 1, 1, 1, true, rng),
            residual,
            cache: None,
        })
    }

    /// Returns the rescaled features and the `(B, h, w, n)` gate.
    pub fn forward_with_gate(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array4<F>, Array4<F>)> {
        let a = self.conv.forward(x, mode)?;
        let gate = a.mapv(Scalar::sigmoid);
        let offset = if self.residual { F::one() } else { F::zero() };
        let mut y = x.clone();
        y.zip_mut_with(&gate, |v, &g| *v *= offset + g);
        if mode == Mode::Train {
            self.cache = Some(PaCache {
                x: x.clone(),
                gate: gate.clone(),
            });
        }
        Ok((y, gate))
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        Ok(self.forward_with_gate(x, mode)?.0)
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let PaCache { x, gate } = self
            .cache
            .take()
            .expect("pixel attention backward without train-mode forward");
        let offset = if self.residual { F::one() } else { F::zero() };
        let mut gx = gy.clone();
        gx.zip_mut_with(&gate, |g, &s| *g *= offset + s);
        let mut ggate = gy.clone();
        ggate.zip_mut_with(&x, |g, &v| *g *= v);
        let ga = sigmoid_backward(&ggate, &gate);
        gx + self.conv.backward(&ga)
    }
}

impl<F: Scalar> Parameterized<F> for PixelAttention<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.conv.collect_params(&join_name(prefix, "conv"), out);
    }
}

/// Tri-level attention: channel, then spatial, then pixel gating applied
/// sequentially, coarse to fine.
pub struct Tau<F> {
    ca: ChannelAttention<F>,
    sa: SpatialAttention<F>,
    pa: PixelAttention<F>,
}

impl<F: Scalar> Tau<F> {
    pub fn new(
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        residual: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Tau {
            ca: ChannelAttention::new(channels, reduction, residual, rng)?,
            sa: SpatialAttention::new(spatial_kernel, residual, rng)?,
            pa: PixelAttention::new(channels, residual, rng)?,
        })
    }

    pub fn forward_with_gates(
        &mut self,
        x: &Array4<F>,
        mode: Mode,
    ) -> Result<(Array4<F>, AttentionGates<F>)> {
        let (b, _, _, c) = x.dim();
        let (y1, cgate) = self.ca.forward_with_gate(x, mode)?;
        let (y2, spatial_gate) = self.sa.forward_with_gate(&y1, mode)?;
        let (y3, pixel_gate) = self.pa.forward_with_gate(&y2, mode)?;
        let channel_gate = cgate.into_shape_with_order((b, 1, 1, c)).unwrap();
        Ok((
            y3,
            AttentionGates {
                channel_gate,
                spatial_gate,
                pixel_gate,
            },
        ))
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        Ok(self.forward_with_gates(x, mode)?.0)
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let g2 = self.pa.backward(gy);
        let g1 = self.sa.backward(&g2);
        self.ca.backward(&g1)
    }
}

impl<F: Scalar> Parameterized<F> for Tau<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.ca.collect_params(&join_name(prefix, "ca"), out);
        self.sa.collect_params(&join_name(prefix, "sa"), out);
        self.pa.collect_params(&join_name(prefix, "pa"), out);
    }

    fn collect_buffers<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<BufferMut<'a, F>>) {}
}

/// Re-derives the squeeze-excitation gate with plain scalar loops, for
/// cross-checking the block implementation.
#[cfg(test)]
pub(crate) fn se_gate_oracle(
    x: &Array4<f64>,
    w1: &Array2<f64>,
    b1: &[f64],
    w2: &Array2<f64>,
    b2: &[f64],
) -> Array2<f64> {
    let (b, h, w, c) = x.dim();
    let hidden = b1.len();
    let mut gates = Array2::zeros((b, c));
    for bi in 0..b {
        let mut pooled = vec![0.0; c];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    pooled[ch] += x[[bi, i, j, ch]];
                }
            }
        }
        for p in pooled.iter_mut() {
            *p /= (h * w) as f64;
        }
        let mut hid = vec![0.0; hidden];
        for k in 0..hidden {
            let mut a = b1[k];
            for ch in 0..c {
                a += pooled[ch] * w1[[ch, k]];
            }
            hid[k] = a.max(0.0);
        }
        for ch in 0..c {
            let mut a = b2[ch];
            for k in 0..hidden {
                a += hid[k] * w2[[k, ch]];
            }
            gates[[bi, ch]] = 1.0 / (1.0 + (-a).exp());
        }
    }
    gates
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use crate::nn::seeded;

    fn random_input(b: usize, h: usize, w: usize, c: usize, seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed);
        Array4::from_shape_fn((b, h, w, c), |_| crate::nn::sample_normal(&mut rng))
    }

    #[test]
    fn zero_input_gives_half_gates_and_zero_output() {
        let mut rng = seeded(1);
        let x = Array4::<f64>::zeros((2, 4, 4, 8));
        let mut se = SeBlock::new(8, 2, false, &mut rng).unwrap();
        let (y, gate) = se.forward_with_gate(&x, Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(gate.iter().all(|&g| g == 0.5));

        let mut sa = SpatialAttention::new(7, false, &mut rng).unwrap();
        let (y, gate) = sa.forward_with_gate(&x, Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(gate.iter().all(|&g| g == 0.5));

        let mut pa = PixelAttention::new(8, false, &mut rng).unwrap();
        let (y, gate) = pa.forward_with_gate(&x, Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(gate.iter().all(|&g| g == 0.5));

        let mut tau = Tau::new(8, 2, 7, false, &mut rng).unwrap();
        let y = tau.forward(&x, Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gate_is_the_identity() {
        // A huge positive bias saturates the sigmoid to exactly 1.0 in f64,
        // turning each block into the identity map.
        let mut rng = seeded(2);
        let x = random_input(1, 5, 5, 4, 10);

        let mut se = SeBlock::new(4, 2, false, &mut rng).unwrap();
        se.fc2 = {
            let mut fc2 = Dense::new(2, 4, &mut rng);
            let mut probe = Vec::new();
            fc2.collect_params("", &mut probe);
            for p in &mut probe {
                if p.name == "b" {
                    p.value.fill(40.0);
                } else {
                    p.value.fill(0.0);
                }
            }
            fc2
        };
        assert_eq!(se.forward(&x, Mode::Eval).unwrap(), x);

        let mut sa = SpatialAttention::new(3, false, &mut rng).unwrap();
        sa.conv.weights_mut().fill(0.0);
        sa.conv.bias_mut().unwrap().fill(40.0);
        assert_eq!(sa.forward(&x, Mode::Eval).unwrap(), x);

        let mut pa = PixelAttention::new(4, false, &mut rng).unwrap();
        pa.conv.weights_mut().fill(0.0);
        pa.conv.bias_mut().unwrap().fill(40.0);
        assert_eq!(pa.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn se_gates_match_scalar_oracle() {
        let mut rng = seeded(3);
        let mut se = SeBlock::<f64>::new(8, 4, false, &mut rng).unwrap();
        let x = random_input(1, 4, 4, 8, 11);
        let (y, gate) = se.forward_with_gate(&x, Mode::Eval).unwrap();

        // Pull the dense parameters out for the oracle.
        let mut params = Vec::new();
        se.collect_params("", &mut params);
        let grab = |params: &Vec<ParamMut<'_, f64>>, name: &str| -> Vec<f64> {
            params
                .iter()
                .find(|p| p.name == name)
                .unwrap()
                .value
                .iter()
                .copied()
                .collect()
        };
        let w1 = Array2::from_shape_vec((8, 2), grab(&params, "fc1.w")).unwrap();
        let b1 = grab(&params, "fc1.b");
        let w2 = Array2::from_shape_vec((2, 8), grab(&params, "fc2.w")).unwrap();
        let b2 = grab(&params, "fc2.b");
        drop(params);

        let expected = se_gate_oracle(&x, &w1, &b1, &w2, &b2);
        for (a, e) in gate.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        for bi in 0..1 {
            for i in 0..4 {
                for j in 0..4 {
                    for ch in 0..8 {
                        let want = x[[bi, i, j, ch]] * expected[[bi, ch]];
                        assert!((y[[bi, i, j, ch]] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_gate_ratio_is_spatially_constant() {
        let mut rng = seeded(4);
        let mut ca = ChannelAttention::<f64>::new(6, 2, false, &mut rng).unwrap();
        let x = random_input(2, 5, 5, 6, 12).mapv(|v| v + 3.0); // keep x nonzero
        let (y, gate) = ca.forward_with_gate(&x, Mode::Eval).unwrap();
        for bi in 0..2 {
            for ch in 0..6 {
                for i in 0..5 {
                    for j in 0..5 {
                        let ratio = y[[bi, i, j, ch]] / x[[bi, i, j, ch]];
                        assert!((ratio - gate[[bi, ch]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn spatial_gate_ratio_is_channel_constant() {
        let mut rng = seeded(5);
        let mut sa = SpatialAttention::<f64>::new(5, false, &mut rng).unwrap();
        let x = random_input(1, 6, 6, 4, 13).mapv(|v| v + 3.0);
        let (y, gate) = sa.forward_with_gate(&x, Mode::Eval).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for ch in 0..4 {
                    let ratio = y[[0, i, j, ch]] / x[[0, i, j, ch]];
                    assert!((ratio - gate[[0, i, j, 0]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pixel_gate_matches_hand_sigmoid() {
        let mut rng = seeded(6);
        let mut pa = PixelAttention::<f64>::new(2, false, &mut rng).unwrap();
        pa.conv.weights_mut()[[0, 0, 0, 0]] = 0.3;
        pa.conv.weights_mut()[[0, 0, 1, 0]] = -0.7;
        pa.conv.weights_mut()[[0, 0, 0, 1]] = 1.1;
        pa.conv.weights_mut()[[0, 0, 1, 1]] = 0.2;
        pa.conv.bias_mut().unwrap()[0] = 0.05;
        pa.conv.bias_mut().unwrap()[1] = -0.4;
        let mut x = Array4::zeros((1, 1, 1, 2));
        x[[0, 0, 0, 0]] = 0.9;
        x[[0, 0, 0, 1]] = -1.3;
        let (y, gate) = pa.forward_with_gate(&x, Mode::Eval).unwrap();
        let a0 = 0.3 * 0.9 + (-0.7) * (-1.3) + 0.05;
        let a1 = 1.1 * 0.9 + 0.2 * (-1.3) - 0.4;
        let g0 = 1.0 / (1.0 + (-a0 as f64).exp());
        let g1 = 1.0 / (1.0 + (-a1 as f64).exp());
        assert!((gate[[0, 0, 0, 0]] - g0).abs() < 1e-12);
        assert!((gate[[0, 0, 0, 1]] - g1).abs() < 1e-12);
        assert!((y[[0, 0, 0, 0]] - 0.9 * g0).abs() < 1e-12);
        assert!((y[[0, 0, 0, 1]] - -1.3 * g1).abs() < 1e-12);
    }

    #[test]
    fn tau_attenuates_and_keeps_gates_in_unit_interval() {
        let mut rng = seeded(7);
        let mut tau = Tau::<f64>::new(4, 2, 7, false, &mut rng).unwrap();
        for trial in 0..50 {
            let x = random_input(1, 6, 6, 4, 100 + trial);
            let (y, gates) = tau.forward_with_gates(&x, Mode::Eval).unwrap();
            for (o, i) in y.iter().zip(x.iter()) {
                assert!(o.abs() <= i.abs() + 1e-15);
            }
            for g in gates
                .channel_gate
                .iter()
                .chain(gates.spatial_gate.iter())
                .chain(gates.pixel_gate.iter())
            {
                assert!(*g > 0.0 && *g < 1.0);
            }
        }
    }

    #[test]
    fn residual_mode_amplifies_instead() {
        let mut rng = seeded(8);
        let mut tau = Tau::<f64>::new(4, 2, 3, true, &mut rng).unwrap();
        let x = random_input(1, 4, 4, 4, 200);
        let y = tau.forward(&x, Mode::Eval).unwrap();
        for (o, i) in y.iter().zip(x.iter()) {
            assert!(o.abs() >= i.abs() - 1e-15);
        }
    }

    #[test]
    fn se_gradients_match_finite_differences() {
        let mut rng = seeded(9);
        let mut se = SeBlock::<f64>::new(4, 2, false, &mut rng).unwrap();
        let x = random_input(1, 4, 4, 4, 300);
        let r = random_input(1, 4, 4, 4, 301);
        let report = check_params(
            &mut se,
            |blk, with_grads| {
                let y = blk.forward(&x, Mode::Train).unwrap();
                let loss = (&y * &r).sum();
                if with_grads {
                    blk.backward(&r);
                } else {
                    blk.cache = None;
                }
                loss
            },
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn spatial_gradients_match_finite_differences() {
        let mut rng = seeded(10);
        let mut sa = SpatialAttention::<f64>::new(3, false, &mut rng).unwrap();
        let x = random_input(1, 5, 5, 3, 400);
        let r = random_input(1, 5, 5, 3, 401);
        let report = check_params(
            &mut sa,
            |blk, with_grads| {
                let y = blk.forward(&x, Mode::Train).unwrap();
                let loss = (&y * &r).sum();
                if with_grads {
                    blk.backward(&r);
                } else {
                    blk.cache = None;
                }
                loss
            },
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn tau_gradients_match_finite_differences() {
        let mut rng = seeded(11);
        let mut tau = Tau::<f64>::new(4, 2, 3, false, &mut rng).unwrap();
        let x = random_input(1, 4, 4, 4, 500);
        let r = random_input(1, 4, 4, 4, 501);
        let report = check_params(
            &mut tau,
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
