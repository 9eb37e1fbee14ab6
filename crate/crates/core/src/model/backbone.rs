//! Compact encoder backbones. All three variants share the same skeleton —
//! a strided stem plus four stages — and differ in the block residing in
//! each stage:
//!
//! * `resnet-small`: basic residual blocks (two 3x3 convolutions),
//! * `mobilenet-like`: inverted residuals (expand, depthwise, project),
//! * `xception-like`: separable-convolution residual blocks.
//!
//! The stage widths are fixed at 24/48/96/96 over a 16-channel stem. The
//! low-level tap is the first stage's output (overall stride 4); the high
//! tap is the final stage (stride 16, or 8 with dilated later stages).

use ndarray::Array4;

use crate::config::Backbone;
use crate::error::{Error, Result};
use crate::nn::ops::{relu, relu_backward};
use crate::nn::{
    join_name, BatchNorm2d, BufferMut, Conv2d, DepthwiseConv2d, Mode, ParamMut, Parameterized,
    Rng, Scalar,
};

const STEM_CHANNELS: usize = 16;
const STAGE_WIDTHS: [usize; 4] = [24, 48, 96, 96];
const LOW_STAGE: usize = 0;

/// Features at the two taps the decoder consumes.
pub struct BackboneOut<F> {
    /// Stride-4 features, `STAGE_WIDTHS[0]` channels.
    pub low: Array4<F>,
    /// Stride-8 or stride-16 features, `STAGE_WIDTHS[3]` channels.
    pub high: Array4<F>,
}

struct ResBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    short: Option<(Conv2d<F>, BatchNorm2d<F>)>,
    act1: Option<Array4<F>>,
    out_act: Option<Array4<F>>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(cin: usize, cout: usize, stride: usize, dilation: usize, rng: &mut Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, dilation, false, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, dilation, false, rng),
            bn2: BatchNorm2d::new(cout),
            short: (stride != 1 || cin != cout)
                .then(|| (Conv2d::new(cin, cout, 1, stride, 1, false, rng), BatchNorm2d::new(cout))),
            act1: None,
            out_act: None,
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let a = relu(&self.bn1.forward(&self.conv1.forward(x, mode)?, mode));
        let m = self.bn2.forward(&self.conv2.forward(&a, mode)?, mode);
        let s = match &mut self.short {
            Some((conv, bn)) => bn.forward(&conv.forward(x, mode)?, mode),
            None => x.clone(),
        };
        let y = relu(&(m + s));
        if mode == Mode::Train {
            self.act1 = Some(a);
            self.out_act = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let out_act = self.out_act.take().expect("block backward without forward");
        let g = relu_backward(gy, &out_act);
        let gm = self.bn2.backward(&g);
        let ga = self.conv2.backward(&gm);
        let act1 = self.act1.take().expect("block backward without forward");
        let ga = relu_backward(&ga, &act1);
        let gx_main = self.conv1.backward(&self.bn1.backward(&ga));
        let gx_short = match &mut self.short {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)),
            None => g,
        };
        gx_main + gx_short
    }
}

impl<F: Scalar> Parameterized<F> for ResBlock<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.conv1.collect_params(&join_name(prefix, "conv1"), out);
        self.bn1.collect_params(&join_name(prefix, "bn1"), out);
        self.conv2.collect_params(&join_name(prefix, "conv2"), out);
        self.bn2.collect_params(&join_name(prefix, "bn2"), out);
        if let Some((conv, bn)) = &mut self.short {
            conv.collect_params(&join_name(prefix, "short_conv"), out);
            bn.collect_params(&join_name(prefix, "short_bn"), out);
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        self.bn1.collect_buffers(&join_name(prefix, "bn1"), out);
        self.bn2.collect_buffers(&join_name(prefix, "bn2"), out);
        if let Some((_, bn)) = &mut self.short {
            bn.collect_buffers(&join_name(prefix, "short_bn"), out);
        }
    }
}

/// Inverted residual: 1x1 expand (x4), depthwise 3x3, linear 1x1 project.
struct InvBlock<F> {
    expand: Conv2d<F>,
    bn_e: BatchNorm2d<F>,
    dw: DepthwiseConv2d<F>,
    bn_d: BatchNorm2d<F>,
    project: Conv2d<F>,
    bn_p: BatchNorm2d<F>,
    residual: bool,
    act_e: Option<Array4<F>>,
    act_d: Option<Array4<F>>,
}

impl<F: Scalar> InvBlock<F> {
    fn new(cin: usize, cout: usize, stride: usize, dilation: usize, rng: &mut Rng) -> Self {
        let mid = cin * 4;
        InvBlock {
            expand: Conv2d::new(cin, mid, 1, 1, 1, false, rng),
            bn_e: BatchNorm2d::new(mid),
            dw: DepthwiseConv2d::new(mid, 3, stride, dilation, rng),
            bn_d: BatchNorm2d::new(mid),
            project: Conv2d::new(mid, cout, 1, 1, 1, false, rng),
            bn_p: BatchNorm2d::new(cout),
            residual: stride == 1 && cin == cout,
            act_e: None,
            act_d: None,
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let e = relu(&self.bn_e.forward(&self.expand.forward(x, mode)?, mode));
        let d = relu(&self.bn_d.forward(&self.dw.forward(&e, mode)?, mode));
        let p = self.bn_p.forward(&self.project.forward(&d, mode)?, mode);
        let y = if self.residual { p + x } else { p };
        if mode == Mode::Train {
            self.act_e = Some(e);
            self.act_d = Some(d);
        }
        Ok(y)
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let gp = self.bn_p.backward(gy);
        let gd = self.project.backward(&gp);
        let act_d = self.act_d.take().expect("block backward without forward");
        let gd = relu_backward(&gd, &act_d);
        let ge = self.dw.backward(&self.bn_d.backward(&gd));
        let act_e = self.act_e.take().expect("block backward without forward");
        let ge = relu_backward(&ge, &act_e);
        let gx = self.expand.backward(&self.bn_e.backward(&ge));
        if self.residual {
            gx + gy
        } else {
            gx
        }
    }
}

impl<F: Scalar> Parameterized<F> for InvBlock<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.expand.collect_params(&join_name(prefix, "expand"), out);
        self.bn_e.collect_params(&join_name(prefix, "bn_e"), out);
        self.dw.collect_params(&join_name(prefix, "dw"), out);
        self.bn_d.collect_params(&join_name(prefix, "bn_d"), out);
        self.project.collect_params(&join_name(prefix, "project"), out);
        self.bn_p.collect_params(&join_name(prefix, "bn_p"), out);
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        self.bn_e.collect_buffers(&join_name(prefix, "bn_e"), out);
        self.bn_d.collect_buffers(&join_name(prefix, "bn_d"), out);
        self.bn_p.collect_buffers(&join_name(prefix, "bn_p"), out);
    }
}

/// Residual block built from two depthwise-separable convolutions.
struct SepBlock<F> {
    dw1: DepthwiseConv2d<F>,
    pw1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    dw2: DepthwiseConv2d<F>,
    pw2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    short: Option<(Conv2d<F>, BatchNorm2d<F>)>,
    act1: Option<Array4<F>>,
    out_act: Option<Array4<F>>,
}

impl<F: Scalar> SepBlock<F> {
    fn new(cin: usize, cout: usize, stride: usize, dilation: usize, rng: &mut Rng) -> Self {
        SepBlock {
            dw1: DepthwiseConv2d::new(cin, 3, 1, dilation, rng),
            pw1: Conv2d::new(cin, cout, 1, 1, 1, false, rng),
            bn1: BatchNorm2d::new(cout),
            dw2: DepthwiseConv2d::new(cout, 3, stride, dilation, rng),
            pw2: Conv2d::new(cout, cout, 1, 1, 1, false, rng),
            bn2: BatchNorm2d::new(cout),
            short: (stride != 1 || cin != cout)
                .then(|| (Conv2d::new(cin, cout, 1, stride, 1, false, rng), BatchNorm2d::new(cout))),
            act1: None,
            out_act: None,
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let a = relu(&self.bn1.forward(
            &self.pw1.forward(&self.dw1.forward(x, mode)?, mode)?,
            mode,
        ));
        let m = self.bn2.forward(
            &self.pw2.forward(&self.dw2.forward(&a, mode)?, mode)?,
            mode,
        );
        let s = match &mut self.short {
            Some((conv, bn)) => bn.forward(&conv.forward(x, mode)?, mode),
            None => x.clone(),
        };
        let y = relu(&(m + s));
        if mode == Mode::Train {
            self.act1 = Some(a);
            self.out_act = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let out_act = self.out_act.take().expect("block backward without forward");
        let g = relu_backward(gy, &out_act);
        let gm = self.bn2.backward(&g);
        let ga = self.dw2.backward(&self.pw2.backward(&gm));
        let act1 = self.act1.take().expect("block backward without forward");
        let ga = relu_backward(&ga, &act1);
        let gx_main = self.dw1.backward(&self.pw1.backward(&self.bn1.backward(&ga)));
        let gx_short = match &mut self.short {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)),
            None => g,
        };
        gx_main + gx_short
    }
}

impl<F: Scalar> Parameterized<F> for SepBlock<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.dw1.collect_params(&join_name(prefix, "dw1"), out);
        self.pw1.collect_params(&join_name(prefix, "pw1"), out);
        self.bn1.collect_params(&join_name(prefix, "bn1"), out);
        self.dw2.collect_params(&join_name(prefix, "dw2"), out);
        self.pw2.collect_params(&join_name(prefix, "pw2"), out);
        self.bn2.collect_params(&join_name(prefix, "bn2"), out);
        if let Some((conv, bn)) = &mut self.short {
            conv.collect_params(&join_name(prefix, "short_conv"), out);
            bn.collect_params(&join_name(prefix, "short_bn"), out);
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        self.bn1.collect_buffers(&join_name(prefix, "bn1"), out);
        self.bn2.collect_buffers(&join_name(prefix, "bn2"), out);
        if let Some((_, bn)) = &mut self.short {
            bn.collect_buffers(&join_name(prefix, "short_bn"), out);
        }
    }
}

enum Block<F> {
    Res(ResBlock<F>),
    Inv(InvBlock<F>),
    Sep(SepBlock<F>),
}

impl<F: Scalar> Block<F> {
    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        match self {
            Block::Res(b) => b.forward(x, mode),
            Block::Inv(b) => b.forward(x, mode),
            Block::Sep(b) => b.forward(x, mode),
        }
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        match self {
            Block::Res(b) => b.backward(gy),
            Block::Inv(b) => b.backward(gy),
            Block::Sep(b) => b.backward(gy),
        }
    }
}

impl<F: Scalar> Parameterized<F> for Block<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        match self {
            Block::Res(b) => b.collect_params(prefix, out),
            Block::Inv(b) => b.collect_params(prefix, out),
            Block::Sep(b) => b.collect_params(prefix, out),
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        match self {
            Block::Res(b) => b.collect_buffers(prefix, out),
            Block::Inv(b) => b.collect_buffers(prefix, out),
            Block::Sep(b) => b.collect_buffers(prefix, out),
        }
    }
}

/// The encoder: stem + four stages, with low- and high-level taps.
pub struct BackboneNet<F> {
    stem_conv: Conv2d<F>,
    stem_bn: BatchNorm2d<F>,
    stem_act: Option<Array4<F>>,
    blocks: Vec<Block<F>>,
    output_stride: usize,
}

impl<F: Scalar> BackboneNet<F> {
    pub fn new(kind: Backbone, output_stride: usize, rng: &mut Rng) -> Result<Self> {
        // (stride, dilation) per stage; reduced output stride trades the
        // later strides for dilation.
        let geom: [(usize, usize); 4] = match output_stride {
            16 => [(2, 1), (2, 1), (2, 1), (1, 1)],
            8 => [(2, 1), (2, 1), (1, 2), (1, 2)],
            other => {
                return Err(Error::Config(format!(
                    "output stride must be 8 or 16, got {other}"
                )))
            }
        };
        let stem_conv = Conv2d::new(3, STEM_CHANNELS, 3, 2, 1, false, rng);
        let stem_bn = BatchNorm2d::new(STEM_CHANNELS);
        let mut blocks = Vec::with_capacity(4);
        let mut cin = STEM_CHANNELS;
        for (&cout, &(stride, dilation)) in STAGE_WIDTHS.iter().zip(geom.iter()) {
            blocks.push(match kind {
                Backbone::ResnetSmall => Block::Res(ResBlock::new(cin, cout, stride, dilation, rng)),
                Backbone::MobilenetLike => {
                    Block::Inv(InvBlock::new(cin, cout, stride, dilation, rng))
                }
                Backbone::XceptionLike => {
                    Block::Sep(SepBlock::new(cin, cout, stride, dilation, rng))
                }
            });
            cin = cout;
        }
        Ok(BackboneNet {
            stem_conv,
            stem_bn,
            stem_act: None,
            blocks,
            output_stride,
        })
    }

    pub fn low_channels(&self) -> usize {
        STAGE_WIDTHS[LOW_STAGE]
    }

    pub fn high_channels(&self) -> usize {
        STAGE_WIDTHS[3]
    }

    pub fn output_stride(&self) -> usize {
        self.output_stride
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<BackboneOut<F>> {
        let s = relu(&self.stem_bn.forward(&self.stem_conv.forward(x, mode)?, mode));
        if mode == Mode::Train {
            self.stem_act = Some(s.clone());
        }
        let mut cur = s;
        let mut low = None;
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            cur = blk.forward(&cur, mode)?;
            if i == LOW_STAGE {
                low = Some(cur.clone());
            }
        }
        Ok(BackboneOut {
            low: low.expect("low-level tap"),
            high: cur,
        })
    }

    /// Takes the gradients flowing into both taps and returns the gradient
    /// with respect to the network input.
    pub fn backward(&mut self, glow: &Array4<F>, ghigh: &Array4<F>) -> Array4<F> {
        let mut g = ghigh.clone();
        for i in (0..self.blocks.len()).rev() {
            if i == LOW_STAGE {
                g = g + glow;
            }
            g = self.blocks[i].backward(&g);
        }
        let stem_act = self.stem_act.take().expect("backbone backward without forward");
        let g = relu_backward(&g, &stem_act);
        self.stem_conv.backward(&self.stem_bn.backward(&g))
    }
}

impl<F: Scalar> Parameterized<F> for BackboneNet<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.stem_conv.collect_params(&join_name(prefix, "stem.conv"), out);
        self.stem_bn.collect_params(&join_name(prefix, "stem.bn"), out);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.collect_params(&join_name(prefix, &format!("stage{i}")), out);
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        self.stem_bn.collect_buffers(&join_name(prefix, "stem.bn"), out);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.collect_buffers(&join_name(prefix, &format!("stage{i}")), out);
        }
    }
}
