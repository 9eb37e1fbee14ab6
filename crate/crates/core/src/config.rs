//! Domain configuration: class maps, model hyperparameters, training
//! hyperparameters, and their validation.
//!
//! The class-map file is UTF-8 text with one `index,name,R,G,B` entry per
//! line (`#` starts a comment). The config file is flat `key = value` text
//! whose keys match the field names of [`ModelConfig`] and [`TrainConfig`].

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One class: its index, display name, and mask color.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub index: usize,
    pub name: String,
    pub color: [u8; 3],
}

/// Bijection between mask colors and class indices for a dataset.
///
/// Indices are contiguous `0..C-1`, colors are pairwise distinct, and
/// `C >= 2`. Index 0 conventionally holds the background/unlabeled class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    entries: Vec<ClassEntry>,
}

impl ClassMap {
    /// Builds a validated map from entries in any order.
    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.index);
        let mut violations = Vec::new();
        if entries.len() < 2 {
            violations.push(format!("need at least 2 classes, got {}", entries.len()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                violations.push(format!(
                    "class indices must be contiguous 0..C-1: expected {i}, found {} ({})",
                    e.index, e.name
                ));
            }
            if e.name.is_empty() {
                violations.push(format!("class {} has an empty name", e.index));
            }
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.color) {
                violations.push(format!(
                    "color ({},{},{}) assigned to more than one class (second: {})",
                    e.color[0], e.color[1], e.color[2], e.name
                ));
            }
        }
        if violations.is_empty() {
            Ok(ClassMap { entries })
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// Number of classes C.
    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn color_of(&self, index: usize) -> Result<[u8; 3]> {
        self.entries
            .get(index)
            .map(|e| e.color)
            .ok_or(Error::Index {
                index,
                classes: self.entries.len(),
            })
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.name.as_str())
    }

    /// Loads and validates a class map from its text format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    /// Parses the `index,name,R,G,B` line format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::parse(
                    "<class map>",
                    format!(
                        "line {}: expected `index,name,R,G,B`, got {} field(s): {raw:?}",
                        lineno + 1,
                        fields.len()
                    ),
                ));
            }
            let parse_num = |s: &str, what: &str| -> Result<usize> {
                s.parse::<usize>().map_err(|_| {
                    Error::parse(
                        "<class map>",
                        format!("line {}: {what} {s:?} is not a non-negative integer", lineno + 1),
                    )
                })
            };
            let index = parse_num(fields[0], "index")?;
            let mut color = [0u8; 3];
            for (slot, field) in color.iter_mut().zip(&fields[2..5]) {
                let v = parse_num(field, "color component")?;
                if v > 255 {
                    return Err(Error::parse(
                        "<class map>",
                        format!("line {}: color component {v} exceeds 255", lineno + 1),
                    ));
                }
                *slot = v as u8;
            }
            entries.push(ClassEntry {
                index,
                name: fields[1].to_string(),
                color,
            });
        }
        ClassMap::new(entries)
    }

    /// Serializes back to the line format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# index,name,R,G,B\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.index, e.name, e.color[0], e.color[1], e.color[2]
            ));
        }
        out
    }
}

/// Loads a validated [`ClassMap`] from a file.
pub fn load_class_map(path: &Path) -> Result<ClassMap> {
    ClassMap::load(path)
}

/// Encoder backbone family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// Small residual encoder; the default.
    ResnetSmall,
    /// Inverted-residual stages with depthwise convolutions.
    MobilenetLike,
    /// Separable-convolution residual stages.
    XceptionLike,
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet-small" => Ok(Backbone::ResnetSmall),
            "mobilenet-like" => Ok(Backbone::MobilenetLike),
            "xception-like" => Ok(Backbone::XceptionLike),
            other => Err(Error::Argument(format!(
                "unknown backbone {other:?} (expected resnet-small, mobilenet-like, or xception-like)"
            ))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::ResnetSmall => "resnet-small",
            Backbone::MobilenetLike => "mobilenet-like",
            Backbone::XceptionLike => "xception-like",
        })
    }
}

/// Metric that decides when the best checkpoint is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMetric {
    ValIou,
    ValAccuracy,
    ValLoss,
}

impl CheckpointMetric {
    /// Whether `candidate` improves on `best` under this metric.
    pub fn improves(self, candidate: f64, best: f64) -> bool {
        match self {
            CheckpointMetric::ValLoss => candidate < best,
            _ => candidate > best,
        }
    }

    /// Starting value that any finite observation improves on.
    pub fn worst(self) -> f64 {
        match self {
            CheckpointMetric::ValLoss => f64::INFINITY,
            _ => f64::NEG_INFINITY,
        }
    }
}

impl FromStr for CheckpointMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_iou" => Ok(CheckpointMetric::ValIou),
            "val_accuracy" => Ok(CheckpointMetric::ValAccuracy),
            "val_loss" => Ok(CheckpointMetric::ValLoss),
            other => Err(Error::Argument(format!(
                "unknown checkpoint metric {other:?} (expected val_iou, val_accuracy, or val_loss)"
            ))),
        }
    }
}

impl fmt::Display for CheckpointMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointMetric::ValIou => "val_iou",
            CheckpointMetric::ValAccuracy => "val_accuracy",
            CheckpointMetric::ValLoss => "val_loss",
        })
    }
}

/// Every architectural hyperparameter of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Side length of square input patches, in pixels.
    pub input_size: usize,
    pub backbone: Backbone,
    /// Ratio of input resolution to the deepest encoder feature map (8 or 16).
    pub output_stride: usize,
    /// Dilation rates of the ASPP branches; strictly increasing, first 1.
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    /// Bottleneck reduction of squeeze-excitation and channel attention.
    pub se_reduction: usize,
    /// Kernel size of the spatial-attention convolution; odd.
    pub tau_spatial_kernel: usize,
    pub decoder_channels: usize,
    /// Residual gating (`x * (1 + gate)`) instead of pure attenuation.
    pub tau_residual: bool,
    /// Adds a squeeze-excitation block after each decoder conv, not just one
    /// after decoder fusion.
    pub decoder_se_each_conv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 5,
            input_size: 256,
            backbone: Backbone::ResnetSmall,
            output_stride: 16,
            aspp_rates: vec![1, 6, 12, 18],
            aspp_channels: 64,
            se_reduction: 8,
            tau_spatial_kernel: 7,
            decoder_channels: 64,
            tau_residual: false,
            decoder_se_each_conv: false,
        }
    }
}

impl ModelConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !matches!(self.output_stride, 8 | 16) {
            v.push(format!("output_stride must be 8 or 16, got {}", self.output_stride));
        }
        if self.input_size == 0 || self.output_stride == 0 || self.input_size % self.output_stride != 0 {
            v.push(format!(
                "input_size ({}) must be divisible by output_stride ({})",
                self.input_size, self.output_stride
            ));
        }
        if self.aspp_rates.is_empty() {
            v.push("aspp_rates must be nonempty".to_string());
        } else {
            if self.aspp_rates[0] != 1 {
                v.push(format!(
                    "aspp_rates must start with 1, got {:?}",
                    self.aspp_rates
                ));
            }
            if self.aspp_rates.windows(2).any(|w| w[0] >= w[1]) {
                v.push(format!(
                    "aspp_rates must be strictly increasing, got {:?}",
                    self.aspp_rates
                ));
            }
        }
        if self.aspp_channels == 0 {
            v.push("aspp_channels must be positive".to_string());
        }
        if self.decoder_channels == 0 {
            v.push("decoder_channels must be positive".to_string());
        }
        if self.se_reduction == 0 {
            v.push("se_reduction must be >= 1".to_string());
        } else {
            if self.aspp_channels > 0 && self.aspp_channels % self.se_reduction != 0 {
                v.push(format!(
                    "se_reduction ({}) must divide aspp_channels ({})",
                    self.se_reduction, self.aspp_channels
                ));
            }
            if self.decoder_channels > 0 && self.decoder_channels % self.se_reduction != 0 {
                v.push(format!(
                    "se_reduction ({}) must divide decoder_channels ({})",
                    self.se_reduction, self.decoder_channels
                ));
            }
        }
        if self.tau_spatial_kernel % 2 == 0 || self.tau_spatial_kernel == 0 {
            v.push(format!(
                "tau_spatial_kernel must be odd and >= 1, got {}",
                self.tau_spatial_kernel
            ));
        }
        v
    }

    /// Serializes as `key = value` lines.
    pub fn to_text(&self) -> String {
        let rates: Vec<String> = self.aspp_rates.iter().map(|r| r.to_string()).collect();
        format!(
            "num_classes = {}\ninput_size = {}\nbackbone = {}\noutput_stride = {}\n\
             aspp_rates = {}\naspp_channels = {}\nse_reduction = {}\ntau_spatial_kernel = {}\n\
             decoder_channels = {}\ntau_residual = {}\ndecoder_se_each_conv = {}\n",
            self.num_classes,
            self.input_size,
            self.backbone,
            self.output_stride,
            rates.join(","),
            self.aspp_channels,
            self.se_reduction,
            self.tau_spatial_kernel,
            self.decoder_channels,
            self.tau_residual,
            self.decoder_se_each_conv,
        )
    }
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of pairs held out for validation, in (0,1).
    pub validation_fraction: f64,
    pub seed: u64,
    pub checkpoint_metric: CheckpointMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            validation_fraction: 0.2,
            seed: 42,
            checkpoint_metric: CheckpointMetric::ValIou,
        }
    }
}

impl TrainConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0) {
            v.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            v.push(format!(
                "validation_fraction must be in (0,1), got {}",
                self.validation_fraction
            ));
        }
        v
    }
}

/// Checks every invariant of both configs, reporting all violations at once.
///
/// Validation does not modify the configs, so it is idempotent.
pub fn validate_config(model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let mut v = model.violations();
    v.extend(train.violations());
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

/// Parses a flat `key = value` config file into both configs, starting from
/// the given defaults. Unknown keys are rejected.
pub fn parse_config_text(
    text: &str,
    mut model: ModelConfig,
    mut train: TrainConfig,
) -> Result<(ModelConfig, TrainConfig)> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(
                "<config>",
                format!("line {}: expected `key = value`, got {raw:?}", lineno + 1),
            )
        })?;
        let key = key.trim();
        let value = value.trim();
        apply_config_kv(key, value, &mut model, &mut train).map_err(|e| match e {
            Error::Parse { message, .. } => {
                Error::parse("<config>", format!("line {}: {message}", lineno + 1))
            }
            other => other,
        })?;
    }
    Ok((model, train))
}

/// Applies one `key = value` assignment; shared by file parsing and CLI
/// overrides.
pub fn apply_config_kv(
    key: &str,
    value: &str,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| Error::parse("<config>", format!("{key} = {value:?} is not a valid value")))
    }
    match key {
        "num_classes" => model.num_classes = num(key, value)?,
        "input_size" => model.input_size = num(key, value)?,
        "backbone" => model.backbone = value.parse()?,
        "output_stride" => model.output_stride = num(key, value)?,
        "aspp_rates" => {
            let mut rates = Vec::new();
            for part in value.split(',') {
                rates.push(num::<usize>(key, part.trim())?);
            }
            model.aspp_rates = rates;
        }
        "aspp_channels" => model.aspp_channels = num(key, value)?,
        "se_reduction" => model.se_reduction = num(key, value)?,
        "tau_spatial_kernel" => model.tau_spatial_kernel = num(key, value)?,
        "decoder_channels" => model.decoder_channels = num(key, value)?,
        "tau_residual" => model.tau_residual = num(key, value)?,
        "decoder_se_each_conv" => model.decoder_se_each_conv = num(key, value)?,
        "epochs" => train.epochs = num(key, value)?,
        "batch_size" => train.batch_size = num(key, value)?,
        "learning_rate" => train.learning_rate = num(key, value)?,
        "validation_fraction" => train.validation_fraction = num(key, value)?,
        "seed" => train.seed = num(key, value)?,
        "checkpoint_metric" => train.checkpoint_metric = value.parse()?,
        other => {
            return Err(Error::parse(
                "<config>",
                format!("unknown config key {other:?}"),
            ))
        }
    }
    Ok(())
}

/// Loads model and train configs from a file, applying defaults for absent
/// keys, then validates the pair.
pub fn load_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (model, train) = parse_config_text(&text, ModelConfig::default(), TrainConfig::default())
        .map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })?;
    validate_config(&model, &train)?;
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn landcover_map_text() -> &'static str {
        "# LandCover.ai palette\n\
         0,background,0,0,0\n\
         1,building,255,0,0\n\
         2,woods,0,255,0\n\
         3,water,0,0,255\n\
         4,road,255,255,0\n"
    }

    #[test]
    fn landcover_map_has_five_classes() {
        let map = ClassMap::parse(landcover_map_text()).unwrap();
        assert_eq!(map.num_classes(), 5);
        assert_eq!(map.name_of(2), Some("woods"));
        assert_eq!(map.color_of(4).unwrap(), [255, 255, 0]);
    }

    #[test]
    fn duplicate_color_rejected() {
        let err = ClassMap::parse("0,a,0,0,0\n1,b,0,0,0\n").unwrap_err();
        match err {
            Error::Validation(v) => assert!(v.iter().any(|m| m.contains("(0,0,0)")), "{v:?}"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn minimal_two_class_map() {
        let map = ClassMap::parse("0,bg,0,0,0\n1,fg,255,255,255\n").unwrap();
        assert_eq!(map.num_classes(), 2);
    }

    #[test]
    fn non_contiguous_indices_rejected() {
        let err = ClassMap::parse("0,a,0,0,0\n2,b,1,1,1\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn single_class_rejected() {
        assert!(ClassMap::parse("0,a,0,0,0\n").is_err());
    }

    #[test]
    fn map_round_trips_through_text() {
        let map = ClassMap::parse(landcover_map_text()).unwrap();
        let again = ClassMap::parse(&map.to_text()).unwrap();
        assert_eq!(map, again);
    }

    #[test]
    fn default_configs_validate() {
        validate_config(&ModelConfig::default(), &TrainConfig::default()).unwrap();
    }

    #[test]
    fn input_size_not_divisible_rejected() {
        let cfg = ModelConfig {
            input_size: 250,
            ..Default::default()
        };
        let err = validate_config(&cfg, &TrainConfig::default()).unwrap_err();
        match err {
            Error::Validation(v) => {
                assert!(v.iter().any(|m| m.contains("divisible")), "{v:?}")
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn bad_aspp_rates_rejected() {
        let cfg = ModelConfig {
            aspp_rates: vec![6, 1, 12],
            ..Default::default()
        };
        let err = validate_config(&cfg, &TrainConfig::default()).unwrap_err();
        match err {
            Error::Validation(v) => {
                assert!(v.iter().any(|m| m.contains("start with 1")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("strictly increasing")), "{v:?}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn all_violations_reported_at_once() {
        let cfg = ModelConfig {
            input_size: 250,
            aspp_rates: vec![2, 2],
            se_reduction: 7,
            ..Default::default()
        };
        let tcfg = TrainConfig {
            validation_fraction: 1.5,
            ..Default::default()
        };
        match validate_config(&cfg, &tcfg).unwrap_err() {
            Error::Validation(v) => assert!(v.len() >= 4, "expected >=4 violations, got {v:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn validation_is_idempotent() {
        let cfg = ModelConfig::default();
        let tcfg = TrainConfig::default();
        validate_config(&cfg, &tcfg).unwrap();
        let (cfg2, tcfg2) = (cfg.clone(), tcfg.clone());
        validate_config(&cfg2, &tcfg2).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(tcfg, tcfg2);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            num_classes: 15,
            aspp_rates: vec![1, 4, 8],
            backbone: Backbone::XceptionLike,
            ..Default::default()
        };
        let (parsed, _) =
            parse_config_text(&cfg.to_text(), ModelConfig::default(), TrainConfig::default())
                .unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_config_key_rejected() {
        let err = parse_config_text(
            "learning_rte = 0.1\n",
            ModelConfig::default(),
            TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn config_file_parses_train_fields() {
        let (_, t) = parse_config_text(
            "epochs = 7\nbatch_size = 2\nlearning_rate = 0.01\nseed = 9\ncheckpoint_metric = val_loss\n",
            ModelConfig::default(),
            TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(t.epochs, 7);
        assert_eq!(t.batch_size, 2);
        assert_eq!(t.learning_rate, 0.01);
        assert_eq!(t.seed, 9);
        assert_eq!(t.checkpoint_metric, CheckpointMetric::ValLoss);
    }
}
