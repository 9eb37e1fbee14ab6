//! The segmentation network: encoder backbone, attention-gated pyramid
//! head, and a squeeze-excitation-recalibrated decoder.
//!
//! Data path (spatial extents for input size S and output stride os):
//!
//! ```text
//! input (B,S,S,3)
//!   -> backbone -> low (S/4, 24 ch)         high (S/os, 96 ch)
//!                    |                        |
//!                    | 1x1 conv to 48 + bn    -> pyramid head (aspp_channels)
//!                    | + relu                 -> bilinear x(os/4)
//!                    +-----------+------------+
//!                                concat
//!                        3x3 conv + bn + relu   [+ optional SE]
//!                        3x3 conv + bn + relu
//!                        SE block
//!                        bilinear x4
//!                        1x1 conv -> (B,S,S,C) logits
//! ```

pub mod attention;
pub mod aspp;
pub mod backbone;
pub mod checkpoint;

pub use attention::{
    AttentionGates, ChannelAttention, PixelAttention, SeBlock, SpatialAttention, Tau,
};
pub use aspp::AsppTau;
pub use backbone::{BackboneNet, BackboneOut};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use ndarray::Array4;

use crate::config::{validate_config, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ops::{
    bilinear_resize, bilinear_resize_backward, concat_channels, relu, relu_backward,
    split_channels,
};
use crate::nn::{
    join_name, seeded, BatchNorm2d, BufferMut, Conv2d, Mode, ParamMut, Parameterized, Scalar,
};

/// Channel width the low-level features are projected to before fusion.
const LOW_PROJ_CHANNELS: usize = 48;

struct NetCache<F> {
    low_act: Array4<F>,
    d1_act: Array4<F>,
    d2_act: Array4<F>,
    feat_hw: (usize, usize),
    quarter_hw: (usize, usize),
}

/// A built network: configuration plus all trainable state.
pub struct DeepTriNet<F> {
    config: ModelConfig,
    backbone: BackboneNet<F>,
    aspp: AsppTau<F>,
    low_proj: Conv2d<F>,
    low_bn: BatchNorm2d<F>,
    dec1: Conv2d<F>,
    dec1_bn: BatchNorm2d<F>,
    se_mid: Option<SeBlock<F>>,
    dec2: Conv2d<F>,
    dec2_bn: BatchNorm2d<F>,
    se: SeBlock<F>,
    classifier: Conv2d<F>,
    cache: Option<NetCache<F>>,
}

/// Deterministically constructs the network described by `config`; the same
/// seed always yields identical initial parameters.
pub fn build_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<DeepTriNet<F>> {
    validate_config(config, &TrainConfig::default())
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = seeded(seed);
    let backbone = BackboneNet::new(config.backbone, config.output_stride, &mut rng)?;
    let feat = config.input_size / config.output_stride;
    let aspp = AsppTau::new(
        backbone.high_channels(),
        config.aspp_channels,
        &config.aspp_rates,
        (feat, feat),
        config.se_reduction,
        config.tau_spatial_kernel,
        config.tau_residual,
        &mut rng,
    )?;
    let low_proj = Conv2d::new(
        backbone.low_channels(),
        LOW_PROJ_CHANNELS,
        1,
        1,
        1,
        false,
        &mut rng,
    );
    let dec_in = config.aspp_channels + LOW_PROJ_CHANNELS;
    let dec1 = Conv2d::new(dec_in, config.decoder_channels, 3, 1, 1, false, &mut rng);
    let se_mid = if config.decoder_se_each_conv {
        Some(SeBlock::new(
            config.decoder_channels,
            config.se_reduction,
            false,
            &mut rng,
        )?)
    } else {
        None
    };
    let dec2 = Conv2d::new(
        config.decoder_channels,
        config.decoder_channels,
        3,
        1,
        1,
        false,
        &mut rng,
    );
    let se = SeBlock::new(config.decoder_channels, config.se_reduction, false, &mut rng)?;
    let classifier = Conv2d::new(config.decoder_channels, config.num_classes, 1, 1, 1, true, &mut rng);
    Ok(DeepTriNet {
        config: config.clone(),
        backbone,
        aspp,
        low_proj,
        low_bn: BatchNorm2d::new(LOW_PROJ_CHANNELS),
        dec1,
        dec1_bn: BatchNorm2d::new(config.decoder_channels),
        se_mid,
        dec2,
        dec2_bn: BatchNorm2d::new(config.decoder_channels),
        se,
        classifier,
        cache: None,
    })
}

impl<F: Scalar> DeepTriNet<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total count of trainable scalar parameters.
    pub fn num_params(&mut self) -> usize {
        crate::nn::num_params(self)
    }

    /// Runs the network on a normalized batch `(B, S, S, 3)` and returns
    /// per-pixel logits `(B, S, S, C)`.
    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let (_, h, w, c) = x.dim();
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "expected (B,{s},{s},3) input, got (B,{h},{w},{c})"
            )));
        }
        let train = mode == Mode::Train;

        let bb = self.backbone.forward(x, mode)?;
        let feat_hw = (bb.high.dim().1, bb.high.dim().2);
        let a = self.aspp.forward(&bb.high, mode)?;
        let quarter_hw = (h / 4, w / 4);
        let up1 = bilinear_resize(&a, quarter_hw.0, quarter_hw.1);

        let low = relu(&self.low_bn.forward(&self.low_proj.forward(&bb.low, mode)?, mode));

        let cat = concat_channels(&[&up1, &low])?;
        let mut d1 = relu(&self.dec1_bn.forward(&self.dec1.forward(&cat, mode)?, mode));
        let d1_act = train.then(|| d1.clone());
        if let Some(se) = &mut self.se_mid {
            d1 = se.forward(&d1, mode)?;
        }
        let mut d2 = relu(&self.dec2_bn.forward(&self.dec2.forward(&d1, mode)?, mode));
        let d2_act = train.then(|| d2.clone());
        d2 = self.se.forward(&d2, mode)?;

        let up2 = bilinear_resize(&d2, h, w);
        let logits = self.classifier.forward(&up2, mode)?;
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit value {bad}")));
        }

        if train {
            self.cache = Some(NetCache {
                low_act: low,
                d1_act: d1_act.unwrap(),
                d2_act: d2_act.unwrap(),
                feat_hw,
                quarter_hw,
            });
        }
        Ok(logits)
    }

    /// Accumulates parameter gradients from the logit gradient; returns the
    /// gradient with respect to the input batch.
    pub fn backward(&mut self, glogits: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("network backward without train-mode forward");
        let gup2 = self.classifier.backward(glogits);
        let gd2 = bilinear_resize_backward(&gup2, cache.quarter_hw.0, cache.quarter_hw.1);
        let gd2 = self.se.backward(&gd2);
        let gd2 = relu_backward(&gd2, &cache.d2_act);
        let gd1 = self.dec2.backward(&self.dec2_bn.backward(&gd2));
        let gd1 = match &mut self.se_mid {
            Some(se) => se.backward(&gd1),
            None => gd1,
        };
        let gd1 = relu_backward(&gd1, &cache.d1_act);
        let gcat = self.dec1.backward(&self.dec1_bn.backward(&gd1));
        let parts = split_channels(&gcat, &[self.config.aspp_channels, LOW_PROJ_CHANNELS])
            .expect("decoder channel split");
        let ga = bilinear_resize_backward(&parts[0], cache.feat_hw.0, cache.feat_hw.1);
        let ghigh = self.aspp.backward(&ga);
        let glow_act = relu_backward(&parts[1], &cache.low_act);
        let glow = self.low_proj.backward(&self.low_bn.backward(&glow_act));
        self.backbone.backward(&glow, &ghigh)
    }
}

impl<F: Scalar> Parameterized<F> for DeepTriNet<F> {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.backbone.collect_params(&join_name(prefix, "backbone"), out);
        self.aspp.collect_params(&join_name(prefix, "aspp"), out);
        self.low_proj.collect_params(&join_name(prefix, "low_proj"), out);
        self.low_bn.collect_params(&join_name(prefix, "low_bn"), out);
        self.dec1.collect_params(&join_name(prefix, "dec1"), out);
        self.dec1_bn.collect_params(&join_name(prefix, "dec1_bn"), out);
        if let Some(se) = &mut self.se_mid {
            se.collect_params(&join_name(prefix, "se_mid"), out);
        }
        self.dec2.collect_params(&join_name(prefix, "dec2"), out);
        self.dec2_bn.collect_params(&join_name(prefix, "dec2_bn"), out);
        self.se.collect_params(&join_name(prefix, "se"), out);
        self.classifier.collect_params(&join_name(prefix, "classifier"), out);
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferMut<'a, F>>) {
        self.backbone.collect_buffers(&join_name(prefix, "backbone"), out);
        self.aspp.collect_buffers(&join_name(prefix, "aspp"), out);
        self.low_bn.collect_buffers(&join_name(prefix, "low_bn"), out);
        self.dec1_bn.collect_buffers(&join_name(prefix, "dec1_bn"), out);
        self.dec2_bn.collect_buffers(&join_name(prefix, "dec2_bn"), out);
    }
}
