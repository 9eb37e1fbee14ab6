//! The training loop: pixel cross-entropy with optional class weights,
//! Adam with global-norm gradient clipping, per-epoch metric bookkeeping,
//! best-checkpoint selection, and history export.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;

use crate::config::{ClassMap, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{argmax_batch, metrics, ConfusionMatrix};
use crate::model::{save_checkpoint, DeepTriNet};
use crate::nn::{seeded, Mode, Parameterized, Scalar};
use crate::preprocess::{encode_mask, normalize, ColorMode, DatasetManifest, Split};

/// Gradients are rescaled whenever their global L2 norm exceeds this.
pub const GRADIENT_CLIP_NORM: f64 = 5.0;

/// Loss value plus its gradient with respect to the logits.
pub struct LossGrad<F> {
    pub loss: f64,
    pub grad: Array4<F>,
}

/// Mean pixel cross-entropy over a batch of logits `(B, H, W, C)` against
/// integer targets `(B, H, W)`.
///
/// Pixels whose target equals `ignore_index` contribute nothing; optional
/// `class_weights` (one per class, non-negative and finite) reweight each
/// pixel by its target class. The loss is the weighted mean, and the
/// returned gradient is exactly the gradient of that mean.
pub fn loss_ce<F: Scalar>(
    logits: &Array4<F>,
    targets: &Array3<u16>,
    ignore_index: Option<usize>,
    class_weights: Option<&[f64]>,
) -> Result<LossGrad<F>> {
    let (b, h, w, c) = logits.dim();
    if targets.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "targets {:?} do not match logits {:?}",
            targets.dim(),
            logits.dim()
        )));
    }
    if c == 0 {
        return Err(Error::Shape("logits have zero classes".to_string()));
    }
    if let Some(ws) = class_weights {
        if ws.len() != c {
            return Err(Error::Shape(format!(
                "{} class weights for {c} classes",
                ws.len()
            )));
        }
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Range(
                "class weights must be finite and non-negative".to_string(),
            ));
        }
    }

    // All accumulation in f64 regardless of F, for a stable mean.
    let mut grad = Array4::<f64>::zeros((b, h, w, c));
    let mut loss_sum = 0.0f64;
    let mut weight_sum = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let t = targets[[bi, i, j]] as usize;
                if Some(t) == ignore_index {
                    continue;
                }
                if t >= c {
                    return Err(Error::Index { index: t, classes: c });
                }
                let weight = class_weights.map_or(1.0, |ws| ws[t]);
                if weight == 0.0 {
                    continue;
                }
                let mut maxv = f64::NEG_INFINITY;
                for k in 0..c {
                    maxv = maxv.max(logits[[bi, i, j, k]].to_f64());
                }
                if !maxv.is_finite() {
                    return Err(Error::NonFinite("logits fed to the loss".to_string()));
                }
                let mut denom = 0.0f64;
                for k in 0..c {
                    let e = (logits[[bi, i, j, k]].to_f64() - maxv).exp();
                    probs[k] = e;
                    denom += e;
                }
                let lse = maxv + denom.ln();
                loss_sum += weight * (lse - logits[[bi, i, j, t]].to_f64());
                weight_sum += weight;
                for k in 0..c {
                    let p = probs[k] / denom;
                    let delta = if k == t { 1.0 } else { 0.0 };
                    grad[[bi, i, j, k]] = weight * (p - delta);
                }
            }
        }
    }
    if weight_sum == 0.0 {
        return Err(Error::AllIgnored);
    }
    let scale = 1.0 / weight_sum;
    let grad = grad.mapv(|g| F::from_f64(g * scale));
    Ok(LossGrad {
        loss: loss_sum * scale,
        grad,
    })
}

/// Adam with bias correction and global-norm gradient clipping. Moments
/// are held in f64 and keyed by parameter visitation order, which is part
/// of the model's stable layout.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: GRADIENT_CLIP_NORM,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the gradients currently stored in the
    /// model. Returns the pre-clip global gradient norm.
    pub fn step<F: Scalar>(&mut self, block: &mut dyn Parameterized<F>) -> Result<f64> {
        let mut params = Vec::new();
        block.collect_params("", &mut params);
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.grad.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.grad.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed mid-run");

        let mut sq = 0.0f64;
        for p in &params {
            for g in p.grad.iter() {
                let g = g.to_f64();
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, p) in params.into_iter().enumerate() {
            assert_eq!(self.m[pi].len(), p.grad.len(), "parameter {} resized", p.name);
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let mut value = p.value;
            for (k, (val, g)) in value.iter_mut().zip(p.grad.iter()).enumerate() {
                let g = g.to_f64() * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
                *val = F::from_f64(val.to_f64() - delta);
            }
        }
        Ok(norm)
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub train_precision: f64,
    pub val_precision: f64,
    pub train_recall: f64,
    pub val_recall: f64,
    pub train_iou: f64,
    pub val_iou: f64,
}

/// Everything `fit` produces besides the trained weights.
#[derive(Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_checkpoint: PathBuf,
    /// Value of the checkpoint metric at the last saved checkpoint.
    pub best_value: f64,
    /// `(epoch, metric)` for every checkpoint refresh, in order.
    pub checkpoint_epochs: Vec<(usize, f64)>,
}

struct Sample<F> {
    image: Array3<F>,
    target: ndarray::Array2<u16>,
}

fn load_pairs<F: Scalar>(
    entries: &[&crate::preprocess::ManifestEntry],
    map: &ClassMap,
    patch: usize,
) -> Result<Vec<Sample<F>>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image = crate::io::load_rgb(&e.image_path)?;
        if image.dim().0 != patch || image.dim().1 != patch {
            return Err(Error::Shape(format!(
                "{}: training patches must be {patch}x{patch}, got {}x{}",
                e.image_path.display(),
                image.dim().0,
                image.dim().1
            )));
        }
        let mask = crate::io::load_rgb(&e.mask_path)?;
        if mask.dim() != image.dim() {
            return Err(Error::Shape(format!(
                "{}: mask {:?} does not match its image {:?}",
                e.mask_path.display(),
                mask.dim(),
                image.dim()
            )));
        }
        let encoded = encode_mask(&mask, map, ColorMode::Strict)?;
        out.push(Sample {
            image: normalize::<F>(&image),
            target: encoded.mask.into_data(),
        });
    }
    Ok(out)
}

fn stack_batch<F: Scalar>(
    samples: &[Sample<F>],
    idx: &[usize],
) -> (Array4<F>, Array3<u16>) {
    let (h, w, c) = samples[idx[0]].image.dim();
    let mut x = Array4::zeros((idx.len(), h, w, c));
    let mut t = Array3::zeros((idx.len(), h, w));
    for (bi, &si) in idx.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&samples[si].image);
        t.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&samples[si].target);
    }
    (x, t)
}

fn tally(cm: &mut ConfusionMatrix, preds: &Array3<u16>, targets: &Array3<u16>) {
    for (&p, &t) in preds.iter().zip(targets.iter()) {
        cm.record(t as usize, p as usize);
    }
}

struct SplitStats {
    loss: f64,
    accuracy: f64,
    precision: f64,
    recall: f64,
    iou: f64,
}

fn split_stats(loss_sum: f64, pixel_sum: f64, cm: &ConfusionMatrix) -> Result<SplitStats> {
    let report = metrics(cm)?;
    Ok(SplitStats {
        loss: loss_sum / pixel_sum,
        accuracy: report.accuracy,
        precision: report.macro_precision,
        recall: report.macro_recall,
        iou: report.macro_iou,
    })
}

/// Trains `model` on the manifest's train split, scoring the val split
/// after every epoch and saving `best.ckpt` in `out_dir` whenever the
/// checkpoint metric strictly improves.
///
/// The run is fully deterministic in `(model seed, tcfg.seed, data)`:
/// one seeded RNG stream drives every epoch's shuffle, and validation
/// runs in eval mode so it never perturbs weights or optimizer state.
pub fn fit<F: Scalar>(
    model: &mut DeepTriNet<F>,
    manifest: &DatasetManifest,
    map: &ClassMap,
    tcfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    if tcfg.epochs == 0 {
        return Err(Error::NoTraining);
    }
    let classes = model.config().num_classes;
    if classes != map.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {classes} classes but the class map defines {}",
            map.num_classes()
        )));
    }
    let train_entries = manifest.split_entries(Split::Train);
    let val_entries = manifest.split_entries(Split::Val);
    if train_entries.is_empty() {
        return Err(Error::EmptyDataset("the train split is empty".to_string()));
    }
    if val_entries.is_empty() {
        return Err(Error::EmptyDataset("the val split is empty".to_string()));
    }
    let patch = model.config().input_size;
    let train_set: Vec<Sample<F>> = load_pairs(&train_entries, map, patch)?;
    let val_set: Vec<Sample<F>> = load_pairs(&val_entries, map, patch)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_checkpoint = out_dir.join("best.ckpt");
    let mut best_value = tcfg.checkpoint_metric.worst();
    let mut checkpoint_epochs = Vec::new();
    let mut history = Vec::with_capacity(tcfg.epochs);

    let mut adam = Adam::new(tcfg.learning_rate);
    let mut rng = seeded(tcfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut train_cm = ConfusionMatrix::new(classes);
        let mut train_loss_sum = 0.0f64;
        let mut train_pixels = 0.0f64;
        for chunk in order.chunks(tcfg.batch_size) {
            let (x, t) = stack_batch(&train_set, chunk);
            crate::nn::zero_grads(model);
            let logits = model.forward(&x, Mode::Train)?;
            let lg = loss_ce(&logits, &t, None, None)?;
            let pixels = (t.len()) as f64;
            train_loss_sum += lg.loss * pixels;
            train_pixels += pixels;
            tally(&mut train_cm, &argmax_batch(&logits), &t);
            model.backward(&lg.grad);
            adam.step(model)?;
        }

        let mut val_cm = ConfusionMatrix::new(classes);
        let mut val_loss_sum = 0.0f64;
        let mut val_pixels = 0.0f64;
        let val_order: Vec<usize> = (0..val_set.len()).collect();
        for chunk in val_order.chunks(tcfg.batch_size) {
            let (x, t) = stack_batch(&val_set, chunk);
            let logits = model.forward(&x, Mode::Eval)?;
            let lg = loss_ce(&logits, &t, None, None)?;
            let pixels = (t.len()) as f64;
            val_loss_sum += lg.loss * pixels;
            val_pixels += pixels;
            tally(&mut val_cm, &argmax_batch(&logits), &t);
        }

        let tr = split_stats(train_loss_sum, train_pixels, &train_cm)?;
        let va = split_stats(val_loss_sum, val_pixels, &val_cm)?;
        history.push(EpochRecord {
            epoch,
            train_loss: tr.loss,
            val_loss: va.loss,
            train_accuracy: tr.accuracy,
            val_accuracy: va.accuracy,
            train_precision: tr.precision,
            val_precision: va.precision,
            train_recall: tr.recall,
            val_recall: va.recall,
            train_iou: tr.iou,
            val_iou: va.iou,
        });

        let candidate = match tcfg.checkpoint_metric {
            crate::config::CheckpointMetric::ValIou => va.iou,
            crate::config::CheckpointMetric::ValAccuracy => va.accuracy,
            crate::config::CheckpointMetric::ValLoss => va.loss,
        };
        if tcfg.checkpoint_metric.improves(candidate, best_value) {
            save_checkpoint(model, &best_checkpoint)?;
            best_value = candidate;
            checkpoint_epochs.push((epoch, candidate));
        }
    }

    Ok(FitOutcome {
        history,
        best_checkpoint,
        best_value,
        checkpoint_epochs,
    })
}

const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc,train_prec,val_prec,train_rec,val_rec,train_iou,val_iou";

/// Writes the history as CSV with nine-decimal floats.
pub fn export_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.train_accuracy,
            r.val_accuracy,
            r.train_precision,
            r.val_precision,
            r.train_recall,
            r.val_recall,
            r.train_iou,
            r.val_iou,
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a history CSV produced by [`export_history`].
pub fn parse_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HISTORY_HEADER => {}
        other => {
            return Err(Error::parse(
                path,
                format!("expected history header, got {other:?}"),
            ))
        }
    }
    let mut history = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::parse(
                path,
                format!("line {}: expected 11 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let bad = |what: &str| Error::parse(path, format!("line {}: bad {what}", lineno + 2));
        let f = |k: usize, what: &str| -> Result<f64> {
            fields[k].parse::<f64>().map_err(|_| bad(what))
        };
        history.push(EpochRecord {
            epoch: fields[0].parse::<usize>().map_err(|_| bad("epoch"))?,
            train_loss: f(1, "train_loss")?,
            val_loss: f(2, "val_loss")?,
            train_accuracy: f(3, "train_acc")?,
            val_accuracy: f(4, "val_acc")?,
            train_precision: f(5, "train_prec")?,
            val_precision: f(6, "val_prec")?,
            train_recall: f(7, "train_rec")?,
            val_recall: f(8, "val_rec")?,
            train_iou: f(9, "train_iou")?,
            val_iou: f(10, "val_iou")?,
        });
    }
    Ok(history)
}

const TRAIN_COLOR: [u8; 3] = [204, 51, 41];
const VAL_COLOR: [u8; 3] = [33, 87, 199];

fn metric_panel(title: &str, history: &[EpochRecord], pick: fn(&EpochRecord) -> (f64, f64)) -> crate::plot::Panel {
    let (train, val): (Vec<f64>, Vec<f64>) = history.iter().map(pick).unzip();
    crate::plot::Panel {
        title: title.to_string(),
        series: vec![
            crate::plot::Series { label: "TRAIN".into(), color: TRAIN_COLOR, values: train },
            crate::plot::Series { label: "VAL".into(), color: VAL_COLOR, values: val },
        ],
    }
}

/// Renders `history.png` (accuracy / precision / recall / IoU in a 2x2
/// grid) and `loss.png` next to it. Returns both paths.
pub fn plot_history(history: &[EpochRecord], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let panels = vec![
        metric_panel("ACCURACY", history, |r| (r.train_accuracy, r.val_accuracy)),
        metric_panel("PRECISION", history, |r| (r.train_precision, r.val_precision)),
        metric_panel("RECALL", history, |r| (r.train_recall, r.val_recall)),
        metric_panel("IOU", history, |r| (r.train_iou, r.val_iou)),
    ];
    let metrics_path = out_dir.join("history.png");
    crate::plot::render_panels(&panels, 2, &metrics_path)?;
    let loss_panel = vec![metric_panel("LOSS", history, |r| (r.train_loss, r.val_loss))];
    let loss_path = out_dir.join("loss.png");
    crate::plot::render_panels(&loss_panel, 1, &loss_path)?;
    Ok((metrics_path, loss_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CheckpointMetric, ModelConfig};
    use crate::model::{build_model, load_checkpoint};
    use crate::preprocess::ManifestEntry;
    use crate::synth::{synth_class_map, synth_pair};
    use ndarray::Array1;
    use std::path::PathBuf;

    #[test]
    fn uniform_logits_cost_ln_c() {
        let logits = Array4::<f64>::zeros((2, 3, 3, 5));
        let targets = Array3::<u16>::from_elem((2, 3, 3), 2);
        let lg = loss_ce(&logits, &targets, None, None).unwrap();
        assert!((lg.loss - (5.0f64).ln()).abs() < 1e-12);
        // Gradient per pixel: (1/C - onehot)/N.
        let n = (2 * 3 * 3) as f64;
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..5 {
                        let want = (0.2 - if k == 2 { 1.0 } else { 0.0 }) / n;
                        assert!((lg.grad[[bi, i, j, k]] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_a_scalar_oracle_on_a_tiny_batch() {
        let logits = Array4::from_shape_vec(
            (1, 2, 2, 3),
            vec![
                0.5, -1.0, 2.0, //
                1.5, 0.0, -0.5, //
                -2.0, 0.25, 0.75, //
                3.0, 3.0, 3.0,
            ],
        )
        .unwrap();
        let targets =
            Array3::from_shape_vec((1, 2, 2), vec![2u16, 0, 1, 1]).unwrap();
        let lg = loss_ce(&logits, &targets, None, None).unwrap();

        let mut expected = 0.0f64;
        for (px, t) in [(0usize, 2usize), (1, 0), (2, 1), (3, 1)] {
            let row: Vec<f64> = (0..3)
                .map(|k| logits[[0, px / 2, px % 2, k]])
                .collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expected += lse - row[t];
        }
        expected /= 4.0;
        assert!((lg.loss - expected).abs() < 1e-12, "{} vs {expected}", lg.loss);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut logits = Array4::<f64>::zeros((1, 2, 2, 4));
        let targets = Array3::<u16>::from_elem((1, 2, 2), 3);
        for i in 0..2 {
            for j in 0..2 {
                logits[[0, i, j, 3]] = 50.0;
            }
        }
        let lg = loss_ce(&logits, &targets, None, None).unwrap();
        assert!(lg.loss >= 0.0 && lg.loss < 1e-12, "{}", lg.loss);
    }

    #[test]
    fn ignore_index_and_weights_reshape_the_mean() {
        let logits = Array4::<f64>::zeros((1, 1, 3, 2));
        let targets = Array3::from_shape_vec((1, 1, 3), vec![0u16, 1, 1]).unwrap();

        // Ignoring class 0 leaves two pixels.
        let lg = loss_ce(&logits, &targets, Some(0), None).unwrap();
        assert!((lg.loss - (2.0f64).ln()).abs() < 1e-12);
        assert_eq!(lg.grad[[0, 0, 0, 0]], 0.0);
        assert_eq!(lg.grad[[0, 0, 0, 1]], 0.0);

        // Doubling class 0's weight shifts the weighted mean's gradient.
        let lg = loss_ce(&logits, &targets, None, Some(&[2.0, 1.0])).unwrap();
        // Pixel 0 grad for class 0: 2*(0.5-1)/4 = -0.25.
        assert!((lg.grad[[0, 0, 0, 0]] - (-0.25)).abs() < 1e-12);
        // Pixel 1 grad for class 1: 1*(0.5-1)/4 = -0.125.
        assert!((lg.grad[[0, 0, 1, 1]] - (-0.125)).abs() < 1e-12);

        // Everything ignored is an error.
        let all = Array3::from_elem((1, 1, 3), 1u16);
        assert!(matches!(
            loss_ce(&logits, &all, Some(1), None),
            Err(Error::AllIgnored)
        ));

        // Out-of-range target and bad weights are rejected.
        let bad = Array3::from_elem((1, 1, 3), 7u16);
        assert!(matches!(
            loss_ce(&logits, &bad, None, None),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            loss_ce(&logits, &targets, None, Some(&[1.0, -1.0])),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = seeded(9);
        let mut logits = Array4::<f64>::zeros((1, 2, 2, 3));
        for v in logits.iter_mut() {
            *v = crate::nn::sample_normal(&mut rng);
        }
        let targets =
            Array3::from_shape_vec((1, 2, 2), vec![0u16, 2, 1, 0]).unwrap();
        let weights = [1.5, 1.0, 0.5];
        let lg = loss_ce(&logits, &targets, None, Some(&weights)).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 0, 1, 2), (0, 1, 0, 1), (0, 1, 1, 0)] {
            let idx = [idx.0, idx.1, idx.2, idx.3];
            let orig = logits[idx];
            logits[idx] = orig + h;
            let up = loss_ce(&logits, &targets, None, Some(&weights)).unwrap().loss;
            logits[idx] = orig - h;
            let down = loss_ce(&logits, &targets, None, Some(&weights)).unwrap().loss;
            logits[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = lg.grad[idx];
            assert!(
                (fd - an).abs() / an.abs().max(1e-8) < 1e-5,
                "{idx:?}: fd {fd} vs {an}"
            );
        }
    }

    /// One flat parameter vector, for exercising the optimizer alone.
    struct FlatParams {
        w: Array1<f64>,
        g: Array1<f64>,
    }

    impl Parameterized<f64> for FlatParams {
        fn collect_params<'a>(
            &'a mut self,
            prefix: &str,
            out: &mut Vec<crate::nn::ParamMut<'a, f64>>,
        ) {
            out.push(crate::nn::ParamMut {
                name: if prefix.is_empty() { "w".into() } else { format!("{prefix}.w") },
                value: self.w.view_mut().into_dyn(),
                grad: self.g.view_mut().into_dyn(),
            });
        }
    }

    #[test]
    fn adam_matches_a_scalar_reference() {
        let mut p = FlatParams {
            w: Array1::from_vec(vec![1.0, -2.0, 0.5]),
            g: Array1::zeros(3),
        };
        let grads = [
            vec![0.1, -0.2, 0.3],
            vec![-0.05, 0.15, 0.25],
            vec![0.2, 0.2, -0.1],
        ];

        // Reference: scalar Adam, no clipping needed (norms are tiny).
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut w = [1.0, -2.0, 0.5];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for k in 0..3 {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mhat = m[k] / (1.0 - b1.powi(t));
                let vhat = v[k] / (1.0 - b2.powi(t));
                w[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }

        let mut adam = Adam::new(0.01);
        for g in &grads {
            p.g.assign(&Array1::from_vec(g.clone()));
            adam.step(&mut p).unwrap();
        }
        for k in 0..3 {
            assert!((p.w[k] - w[k]).abs() < 1e-14, "{k}: {} vs {}", p.w[k], w[k]);
        }
    }

    #[test]
    fn oversized_gradients_are_clipped_to_the_norm_budget() {
        // Gradient norm 10 → scaled by 0.5; a fresh Adam's first step is
        // then lr * sign(g) elementwise (bias corrections cancel).
        let mut p = FlatParams {
            w: Array1::from_vec(vec![0.0, 0.0]),
            g: Array1::from_vec(vec![6.0, 8.0]),
        };
        let mut adam = Adam::new(0.001);
        let norm = adam.step(&mut p).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        for k in 0..2 {
            assert!((p.w[k] + 0.001).abs() < 1e-9, "{k}: {}", p.w[k]);
        }

        // Non-finite gradients are refused.
        p.g[0] = f64::NAN;
        assert!(matches!(adam.step(&mut p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn history_csv_round_trips_exactly_at_nine_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history: Vec<EpochRecord> = (1..=3)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                val_loss: 1.1 / e as f64,
                train_accuracy: 0.5 + 0.1 * e as f64,
                val_accuracy: 0.4 + 0.1 * e as f64,
                train_precision: 0.333333333,
                val_precision: 0.25,
                train_recall: 0.6,
                val_recall: 0.55,
                train_iou: 0.123456789,
                val_iou: 0.987654321,
            })
            .collect();
        export_history(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(HISTORY_HEADER));
        assert!(text.contains("0.123456789"));
        let back = parse_history(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in history.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            for (x, y) in [
                (a.train_loss, b.train_loss),
                (a.val_loss, b.val_loss),
                (a.train_accuracy, b.train_accuracy),
                (a.val_iou, b.val_iou),
            ] {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn malformed_history_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "nope\n1,2,3\n").unwrap();
        assert!(matches!(parse_history(&path), Err(Error::Parse { .. })));
    }

    // --- end-to-end fit on a tiny synthetic dataset ---

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_classes: 4,
            input_size: 32,
            aspp_rates: vec![1, 2],
            aspp_channels: 8,
            se_reduction: 2,
            tau_spatial_kernel: 3,
            decoder_channels: 8,
            ..ModelConfig::default()
        }
    }

    fn write_dataset(dir: &Path, n_train: usize, n_val: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for k in 0..n_train + n_val {
            let (image, mask) = synth_pair(32, 32, 1000 + k as u64, 8);
            let image_path = dir.join(format!("img_{k}.png"));
            let mask_path = dir.join(format!("mask_{k}.png"));
            crate::io::save_rgb(&image_path, &image).unwrap();
            crate::io::save_rgb(&mask_path, &mask).unwrap();
            entries.push(ManifestEntry {
                image_path,
                mask_path,
                split: if k < n_train { Split::Train } else { Split::Val },
            });
        }
        DatasetManifest { entries, class_map_ref: None }
    }

    fn tiny_tcfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn collect_param_bits(model: &mut DeepTriNet<f32>) -> Vec<u32> {
        let mut params = Vec::new();
        model.collect_params("", &mut params);
        params
            .iter()
            .flat_map(|p| p.value.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn fit_is_deterministic_and_improves_the_loss() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), 4, 2);
        let map = synth_class_map();
        let tcfg = tiny_tcfg(3);

        let run = |out: PathBuf| {
            let mut model = build_model::<f32>(&tiny_config(), 7).unwrap();
            let outcome = fit(&mut model, &manifest, &map, &tcfg, &out).unwrap();
            (outcome, collect_param_bits(&mut model))
        };
        let (o1, p1) = run(dir.path().join("run1"));
        let (o2, p2) = run(dir.path().join("run2"));

        assert_eq!(o1.history, o2.history, "histories diverged");
        assert_eq!(p1, p2, "parameters diverged");
        assert_eq!(o1.checkpoint_epochs, o2.checkpoint_epochs);
        assert_eq!(o1.history.len(), 3);
        assert!(o1.best_checkpoint.is_file());
        // Finite, plausible values everywhere.
        for r in &o1.history {
            for v in [r.train_loss, r.val_loss, r.train_iou, r.val_iou] {
                assert!(v.is_finite());
            }
            assert!(r.train_loss > 0.0 && r.train_loss < (4.0f64).ln() * 2.0);
        }
        // Checkpoint metric strictly improves at every refresh.
        for pair in o1.checkpoint_epochs.windows(2) {
            assert!(
                tcfg.checkpoint_metric.improves(pair[1].1, pair[0].1),
                "{:?}",
                o1.checkpoint_epochs
            );
        }
        // The saved checkpoint loads and runs.
        let mut best = load_checkpoint::<f32>(&o1.best_checkpoint).unwrap();
        assert_eq!(*best.config(), tiny_config());
        let x = Array4::<f32>::zeros((1, 32, 32, 3));
        best.forward(&x, Mode::Eval).unwrap();
    }

    #[test]
    fn validation_data_never_touches_the_weights() {
        let dir = tempfile::tempdir().unwrap();
        let map = synth_class_map();
        let tcfg = tiny_tcfg(2);

        // Same train pairs, two very different validation sets.
        let m1 = write_dataset(&dir.path().join("a").tap_mkdir(), 4, 1);
        let mut m2 = m1.clone();
        let (vi, vm) = synth_pair(32, 32, 999_999, 4);
        let vi_path = dir.path().join("weird_val_img.png");
        let vm_path = dir.path().join("weird_val_mask.png");
        crate::io::save_rgb(&vi_path, &vi).unwrap();
        crate::io::save_rgb(&vm_path, &vm).unwrap();
        let n = m2.entries.len();
        m2.entries[n - 1] = ManifestEntry {
            image_path: vi_path,
            mask_path: vm_path,
            split: Split::Val,
        };

        let mut model1 = build_model::<f32>(&tiny_config(), 3).unwrap();
        fit(&mut model1, &m1, &map, &tcfg, &dir.path().join("o1")).unwrap();
        let mut model2 = build_model::<f32>(&tiny_config(), 3).unwrap();
        fit(&mut model2, &m2, &map, &tcfg, &dir.path().join("o2")).unwrap();

        assert_eq!(
            collect_param_bits(&mut model1),
            collect_param_bits(&mut model2),
            "validation content leaked into training"
        );
    }

    trait TapMkdir {
        fn tap_mkdir(self) -> Self;
    }
    impl TapMkdir for PathBuf {
        fn tap_mkdir(self) -> Self {
            std::fs::create_dir_all(&self).unwrap();
            self
        }
    }

    #[test]
    fn degenerate_runs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), 2, 1);
        let map = synth_class_map();
        let mut model = build_model::<f32>(&tiny_config(), 1).unwrap();

        let zero = tiny_tcfg(0);
        assert!(matches!(
            fit(&mut model, &manifest, &map, &zero, dir.path()),
            Err(Error::NoTraining)
        ));

        let mut train_only = manifest.clone();
        train_only.entries.retain(|e| e.split == Split::Train);
        assert!(matches!(
            fit(&mut model, &train_only, &map, &tiny_tcfg(1), dir.path()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn val_loss_checkpointing_also_works() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), 3, 1);
        let map = synth_class_map();
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            checkpoint_metric: CheckpointMetric::ValLoss,
            ..TrainConfig::default()
        };
        let mut model = build_model::<f32>(&tiny_config(), 5).unwrap();
        let outcome = fit(&mut model, &manifest, &map, &tcfg, &dir.path().join("out")).unwrap();
        assert!(!outcome.checkpoint_epochs.is_empty());
        assert!(outcome.best_value.is_finite());
        for pair in outcome.checkpoint_epochs.windows(2) {
            assert!(pair[1].1 < pair[0].1);
        }
    }

    #[test]
    fn plots_render_from_history() {
        let dir = tempfile::tempdir().unwrap();
        let history: Vec<EpochRecord> = (1..=5)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                val_loss: 1.2 / e as f64,
                train_accuracy: 1.0 - 0.5 / e as f64,
                val_accuracy: 1.0 - 0.6 / e as f64,
                train_precision: 0.7,
                val_precision: 0.65,
                train_recall: 0.8,
                val_recall: 0.75,
                train_iou: 0.5,
                val_iou: 0.45,
            })
            .collect();
        let (metrics_png, loss_png) = plot_history(&history, dir.path()).unwrap();
        assert!(metrics_png.is_file());
        assert!(loss_png.is_file());
        let img = image::open(&metrics_png).unwrap().to_rgb8();
        assert_eq!(img.width(), 720);
    }
}
