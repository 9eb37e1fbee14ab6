//! 2-D convolution layers on channels-last maps, implemented as im2col plus
//! one matrix multiply, with symmetric same-padding for odd kernels.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use super::{join_name, sample_normal, Mode, ParamMut, Parameterized, Rng, Scalar};
use crate::error::{Error, Result};

/// Output extent of one spatial axis.
fn out_extent(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Result<usize> {
    let eff = dilation * (kernel - 1) + 1;
    if input + 2 * pad < eff {
        return Err(Error::Shape(format!(
            "input extent {input} (pad {pad}) smaller than dilated kernel extent {eff}"
        )));
    }
    Ok((input + 2 * pad - eff) / stride + 1)
}

/// Standard convolution. Weights are laid out `(kh, kw, cin, cout)`;
/// padding is the symmetric amount `dilation * (k - 1) / 2` that preserves
/// spatial dims at stride 1 and halves even dims at stride 2.
pub struct Conv2d<F> {
    w: Array4<F>,
    b: Option<Array1<F>>,
    gw: Array4<F>,
    gb: Option<Array1<F>>,
    stride: usize,
    dilation: usize,
    pad: usize,
    cache_x: Option<Array4<F>>,
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal weights, zero bias. `bias: false` is the right choice for
    /// convolutions feeding a batch-norm layer (the norm's shift would make
    /// the bias redundant and its gradient structurally zero).
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels are used");
        let std = (2.0 / (kernel * kernel * cin) as f64).sqrt();
        let w = Array4::from_shape_fn((kernel, kernel, cin, cout), |_| {
            F::from_f64(sample_normal(rng) * std)
        });
        Conv2d {
            gw: Array4::zeros(w.dim()),
            w,
            b: bias.then(|| Array1::zeros(cout)),
            gb: bias.then(|| Array1::zeros(cout)),
            stride,
            dilation,
            pad: dilation * (kernel - 1) / 2,
            cache_x: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().3
    }

    pub fn weights_mut(&mut self) -> &mut Array4<F> {
        &mut self.w
    }

    pub fn bias_mut(&mut self) -> Option<&mut Array1<F>> {
        self.b.as_mut()
    }

    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw, _, _) = self.w.dim();
        Ok((
            out_extent(h, kh, self.stride, self.dilation, self.pad)?,
            out_extent(w, kw, self.stride, self.dilation, self.pad)?,
        ))
    }

    /// Gathers kernel receptive fields into a `(B*OH*OW, kh*kw*cin)` matrix.
    fn im2col(&self, x: &Array4<F>, oh: usize, ow: usize) -> Array2<F> {
        let (b, h, w, cin) = x.dim();
        let (kh, kw, _, _) = self.w.dim();
        let mut col = Array2::zeros((b * oh * ow, kh * kw * cin));
        let xs = x.as_slice().expect("conv input must be standard layout");
        let cs = col.as_slice_mut().unwrap();
        let row_len = kh * kw * cin;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ky in 0..kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * cin;
                            let dst = row + (ky * kw + kx) * cin;
                            cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatters a column-matrix gradient back onto input positions.
    fn col2im(&self, gcol: &Array2<F>, dims: (usize, usize, usize, usize), oh: usize, ow: usize) -> Array4<F> {
        let (b, h, w, cin) = dims;
        let (kh, kw, _, _) = self.w.dim();
        let mut gx = Array4::zeros((b, h, w, cin));
        let gs = gx.as_slice_mut().unwrap();
        let cs = gcol.as_slice().unwrap();
        let row_len = kh * kw * cin;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ky in 0..kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((bi * h + iy as usize) * w + ix as usize) * cin;
                            let src = row + (ky * kw + kx) * cin;
                            for c in 0..cin {
                                gs[dst + c] += cs[src + c];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let (b, h, w, cin) = x.dim();
        let (kh, kw, wcin, cout) = self.w.dim();
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv expects {wcin} input channels, got {cin}"
            )));
        }
        let (oh, ow) = self.out_dims(h, w)?;
        let col = self.im2col(x, oh, ow);
        let w2 = self
            .w
            .view()
            .into_shape_with_order((kh * kw * wcin, cout))
            .unwrap();
        let mut y2 = super::standardize2(col.dot(&w2));
        if let Some(ref bias) = self.b {
            y2 += bias;
        }
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        Ok(y2.into_shape_with_order((b, oh, ow, cout)).unwrap())
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let x = self
            .cache_x
            .take()
            .expect("conv backward without train-mode forward");
        let (b, oh, ow, cout) = gy.dim();
        let (kh, kw, cin, _) = self.w.dim();
        let gy2 = gy
            .view()
            .into_shape_with_order((b * oh * ow, cout))
            .unwrap();
        let col = self.im2col(&x, oh, ow);
        let gw2 = super::standardize2(col.t().dot(&gy2));
        self.gw += &gw2.into_shape_with_order((kh, kw, cin, cout)).unwrap();
        if let Some(ref mut gb) = self.gb {
            *gb += &gy2.sum_axis(Axis(0));
        }
        let w2 = self
            .w
            .view()
            .into_shape_with_order((kh * kw * cin, cout))
            .unwrap();
        let gcol = super::standardize2(gy2.dot(&w2.t()));
        self.col2im(&gcol, x.dim(), oh, ow)
    }
}

impl<F: Scalar> Parameterized<F> for Conv2d<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            name: join_name(prefix, "w"),
            value: self.w.view_mut().into_dyn(),
            grad: self.gw.view_mut().into_dyn(),
        });
        if let (Some(b), Some(gb)) = (self.b.as_mut(), self.gb.as_mut()) {
            out.push(ParamMut {
                name: join_name(prefix, "b"),
                value: b.view_mut().into_dyn(),
                grad: gb.view_mut().into_dyn(),
            });
        }
    }
}

/// Depthwise convolution: one `kh x kw` filter per channel, no mixing.
pub struct DepthwiseConv2d<F> {
    w: Array3<F>,
    gw: Array3<F>,
    stride: usize,
    dilation: usize,
    pad: usize,
    cache_x: Option<Array4<F>>,
}

impl<F: Scalar> DepthwiseConv2d<F> {
    pub fn new(channels: usize, kernel: usize, stride: usize, dilation: usize, rng: &mut Rng) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels are used");
        let std = (2.0 / (kernel * kernel) as f64).sqrt();
        let w = Array3::from_shape_fn((kernel, kernel, channels), |_| {
            F::from_f64(sample_normal(rng) * std)
        });
        DepthwiseConv2d {
            gw: Array3::zeros(w.dim()),
            w,
            stride,
            dilation,
            pad: dilation * (kernel - 1) / 2,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let (b, h, w, c) = x.dim();
        let (kh, kw, wc) = self.w.dim();
        if c != wc {
            return Err(Error::Shape(format!(
                "depthwise conv expects {wc} channels, got {c}"
            )));
        }
        let oh = out_extent(h, kh, self.stride, self.dilation, self.pad)?;
        let ow = out_extent(w, kw, self.stride, self.dilation, self.pad)?;
        let mut y = Array4::zeros((b, oh, ow, c));
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                y[[bi, oy, ox, ch]] +=
                                    self.w[[ky, kx, ch]] * x[[bi, iy as usize, ix as usize, ch]];
                            }
                        }
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let x = self
            .cache_x
            .take()
            .expect("depthwise backward without train-mode forward");
        let (b, h, w, c) = x.dim();
        let (kh, kw, _) = self.w.dim();
        let (_, oh, ow, _) = gy.dim();
        let mut gx = Array4::zeros((b, h, w, c));
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                let g = gy[[bi, oy, ox, ch]];
                                self.gw[[ky, kx, ch]] += g * x[[bi, iy as usize, ix as usize, ch]];
                                gx[[bi, iy as usize, ix as usize, ch]] += g * self.w[[ky, kx, ch]];
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl<F: Scalar> Parameterized<F> for DepthwiseConv2d<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            name: join_name(prefix, "w"),
            value: self.w.view_mut().into_dyn(),
            grad: self.gw.view_mut().into_dyn(),
        });
    }
}
