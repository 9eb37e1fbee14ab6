//! Pixel-by-pixel evaluation: confusion matrices, the derived metric
//! report (accuracy / precision / recall / IoU), and whole-image
//! prediction by smooth tiled blending.

use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::config::ClassMap;
use crate::error::{Error, Result};
use crate::model::DeepTriNet;
use crate::nn::ops::softmax;
use crate::nn::{Mode, Scalar};
use crate::preprocess::{decode_mask, encode_mask, normalize, ColorMode, IndexMask};
use crate::tiling::{
    extract_patch, make_blend_window, pad_image, patch_filename, plan_grid, SmoothAccumulator,
};

/// Pixel counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        assert!(classes >= 1, "a confusion matrix needs at least one class");
        ConfusionMatrix {
            counts: Array2::zeros((classes, classes)),
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Self {
        assert_eq!(counts.nrows(), counts.ncols(), "square matrix required");
        ConfusionMatrix { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn record(&mut self, target: usize, pred: usize) {
        self.counts[[target, pred]] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes(), other.classes());
        self.counts += &other.counts;
    }
}

/// Tallies one prediction/target mask pair. `ignore_index` drops pixels
/// whose *target* carries that class.
pub fn confusion(
    pred: &IndexMask,
    target: &IndexMask,
    classes: usize,
    ignore_index: Option<usize>,
) -> Result<ConfusionMatrix> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dim(),
            target.dim()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        let (p, t) = (p as usize, t as usize);
        if Some(t) == ignore_index {
            continue;
        }
        if t >= classes {
            return Err(Error::Index { index: t, classes });
        }
        if p >= classes {
            return Err(Error::Index { index: p, classes });
        }
        cm.record(t, p);
    }
    Ok(cm)
}

/// Per-class ratios; a `None` marks an undefined ratio (zero denominator)
/// rather than silently reporting 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
}

/// The full metric set reported for one evaluation.
///
/// Macro values average over classes with nonzero support; classes absent
/// from the target are excluded and listed in `absent_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_iou: f64,
    pub per_class: Vec<ClassMetrics>,
    pub absent_classes: Vec<usize>,
}

impl MetricsReport {
    /// `metric = value` lines, six decimal places. Undefined per-class
    /// ratios are omitted rather than printed as zero.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("accuracy = {:.6}\n", self.accuracy));
        out.push_str(&format!("macro_precision = {:.6}\n", self.macro_precision));
        out.push_str(&format!("macro_recall = {:.6}\n", self.macro_recall));
        out.push_str(&format!("macro_iou = {:.6}\n", self.macro_iou));
        for (c, m) in self.per_class.iter().enumerate() {
            if let Some(p) = m.precision {
                out.push_str(&format!("class_{c}_precision = {p:.6}\n"));
            }
            if let Some(r) = m.recall {
                out.push_str(&format!("class_{c}_recall = {r:.6}\n"));
            }
            if let Some(i) = m.iou {
                out.push_str(&format!("class_{c}_iou = {i:.6}\n"));
            }
        }
        let absent: Vec<String> = self.absent_classes.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!("absent_classes = {}\n", absent.join(",")));
        out
    }

    /// Machine-readable twin of the text report; f64 values round-trip
    /// bit-faithfully through serde_json.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Derives the metric report from a confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let c = cm.classes();
    let counts = cm.counts();
    let mut per_class = Vec::with_capacity(c);
    let mut absent = Vec::new();
    let mut diag_sum = 0u64;
    let (mut psum, mut pn) = (0.0, 0usize);
    let (mut rsum, mut rn) = (0.0, 0usize);
    let (mut isum, mut inn) = (0.0, 0usize);
    for k in 0..c {
        let row: u64 = (0..c).map(|j| counts[[k, j]]).sum();
        let col: u64 = (0..c).map(|t| counts[[t, k]]).sum();
        let diag = counts[[k, k]];
        diag_sum += diag;
        let precision = (col > 0).then(|| diag as f64 / col as f64);
        let recall = (row > 0).then(|| diag as f64 / row as f64);
        let union = row + col - diag;
        let iou = (union > 0).then(|| diag as f64 / union as f64);
        if row == 0 {
            absent.push(k);
        } else {
            // Macro averages run over supported classes; a ratio that is
            // still undefined there (class never predicted) is skipped,
            // not counted as zero.
            if let Some(p) = precision {
                psum += p;
                pn += 1;
            }
            if let Some(r) = recall {
                rsum += r;
                rn += 1;
            }
            if let Some(i) = iou {
                isum += i;
                inn += 1;
            }
        }
        per_class.push(ClassMetrics {
            support: row,
            precision,
            recall,
            iou,
        });
    }
    Ok(MetricsReport {
        accuracy: diag_sum as f64 / total as f64,
        macro_precision: if pn > 0 { psum / pn as f64 } else { 0.0 },
        macro_recall: if rn > 0 { rsum / rn as f64 } else { 0.0 },
        macro_iou: if inn > 0 { isum / inn as f64 } else { 0.0 },
        per_class,
        absent_classes: absent,
    })
}

/// Argmax over the channel axis of an `(H, W, C)` score map; ties take the
/// lowest class index.
pub fn argmax_image<F: Scalar>(scores: &Array3<F>) -> IndexMask {
    let (h, w, c) = scores.dim();
    let mut data = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut best = scores[[i, j, 0]];
            let mut best_c = 0u16;
            for ch in 1..c {
                let v = scores[[i, j, ch]];
                if v > best {
                    best = v;
                    best_c = ch as u16;
                }
            }
            data[[i, j]] = best_c;
        }
    }
    IndexMask::new_unchecked(data)
}

/// Argmax over the channel axis of an `(B, H, W, C)` logit batch.
pub fn argmax_batch<F: Scalar>(logits: &Array4<F>) -> Array3<u16> {
    let (b, h, w, c) = logits.dim();
    Array3::from_shape_fn((b, h, w), |(bi, i, j)| {
        let mut best = logits[[bi, i, j, 0]];
        let mut best_c = 0u16;
        for ch in 1..c {
            let v = logits[[bi, i, j, ch]];
            if v > best {
                best = v;
                best_c = ch as u16;
            }
        }
        best_c
    })
}

/// Whole-image prediction output.
pub struct Prediction<F> {
    /// Blended per-pixel class probabilities, `(H, W, C)`.
    pub probabilities: Array3<F>,
    pub index_mask: IndexMask,
    pub color_mask: Array3<u8>,
}

/// Predicts a whole raster: grid, pad, normalize, per-patch softmax,
/// smooth reassembly, argmax, decode. Optionally saves each patch's
/// predicted color tile into `emit_patches`.
pub fn predict_image<F: Scalar>(
    model: &mut DeepTriNet<F>,
    image: &Array3<u8>,
    map: &ClassMap,
    stride: usize,
    emit_patches: Option<&Path>,
) -> Result<Prediction<F>> {
    let classes = model.config().num_classes;
    if classes != map.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {classes} classes but the class map defines {}",
            map.num_classes()
        )));
    }
    let (h, w, _) = image.dim();
    let patch = model.config().input_size;
    let spec = plan_grid(h, w, patch, stride)?;
    let padded = pad_image(image, &spec)?;
    let window = make_blend_window::<F>(patch)?;
    let mut acc = SmoothAccumulator::new(&spec, &window, classes)?;
    if let Some(dir) = emit_patches {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let raw = extract_patch(&padded, &spec, row, col)?;
            let norm = normalize::<F>(&raw);
            let batch = norm
                .insert_axis(ndarray::Axis(0))
                .into_dimensionality::<ndarray::Ix4>()
                .expect("batch axis");
            let logits = model.forward(&batch, Mode::Eval)?;
            let probs = softmax(&logits);
            let tile = probs.index_axis(ndarray::Axis(0), 0);
            if let Some(dir) = emit_patches {
                let tile_mask = argmax_image(&tile.to_owned());
                let colors = decode_mask(&tile_mask, map)?;
                crate::io::save_rgb(&dir.join(patch_filename("patch", row, col)), &colors)?;
            }
            acc.push(tile)?;
        }
    }
    let probabilities = acc.finish()?;
    let index_mask = argmax_image(&probabilities);
    let color_mask = decode_mask(&index_mask, map)?;
    Ok(Prediction {
        probabilities,
        index_mask,
        color_mask,
    })
}

/// Predicts `image` and scores it against the color `mask`.
pub fn evaluate_image<F: Scalar>(
    model: &mut DeepTriNet<F>,
    image: &Array3<u8>,
    mask: &Array3<u8>,
    map: &ClassMap,
    stride: usize,
) -> Result<MetricsReport> {
    if image.dim().0 != mask.dim().0 || image.dim().1 != mask.dim().1 {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} dims differ",
            &image.dim(),
            &mask.dim()
        )));
    }
    let pred = predict_image(model, image, map, stride, None)?;
    let target = encode_mask(mask, map, ColorMode::Strict)?;
    let cm = confusion(&pred.index_mask, &target.mask, map.num_classes(), None)?;
    metrics(&cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClassEntry, ModelConfig};
    use crate::model::build_model;
    use crate::nn::seeded;
    use rand::Rng as _;

    fn mask_from(vals: &[&[u16]]) -> IndexMask {
        let h = vals.len();
        let w = vals[0].len();
        IndexMask::new_unchecked(Array2::from_shape_fn((h, w), |(i, j)| vals[i][j]))
    }

    #[test]
    fn identical_masks_give_a_diagonal_matrix() {
        let m = mask_from(&[&[0, 1, 2], &[2, 1, 0]]);
        let cm = confusion(&m, &m, 3, None).unwrap();
        let r = metrics(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_precision, 1.0);
        assert_eq!(r.macro_recall, 1.0);
        assert_eq!(r.macro_iou, 1.0);
        for k in 0..3 {
            for j in 0..3 {
                let want = if k == j { 2 } else { 0 };
                assert_eq!(cm.counts()[[k, j]], want);
            }
        }
    }

    #[test]
    fn constant_disagreement_lands_in_one_cell() {
        let pred = mask_from(&[&[0, 0], &[0, 0]]);
        let target = mask_from(&[&[1, 1], &[1, 1]]);
        let cm = confusion(&pred, &target, 2, None).unwrap();
        assert_eq!(cm.counts()[[1, 0]], 4);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.counts()[[0, 0]], 0);
        assert_eq!(cm.counts()[[0, 1]], 0);
        assert_eq!(cm.counts()[[1, 1]], 0);
    }

    #[test]
    fn worked_two_class_case() {
        let counts = Array2::from_shape_vec((2, 2), vec![2u64, 2, 0, 4]).unwrap();
        let r = metrics(&ConfusionMatrix::from_counts(counts)).unwrap();
        assert!((r.accuracy - 0.75).abs() < 1e-12);
        let c0 = &r.per_class[0];
        assert!((c0.precision.unwrap() - 1.0).abs() < 1e-12);
        assert!((c0.recall.unwrap() - 0.5).abs() < 1e-12);
        assert!((c0.iou.unwrap() - 0.5).abs() < 1e-12);
        let c1 = &r.per_class[1];
        assert!((c1.precision.unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!((c1.recall.unwrap() - 1.0).abs() < 1e-12);
        assert!((c1.iou.unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!((r.macro_iou - (0.5 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!((r.macro_precision - (1.0 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!((r.macro_recall - 0.75).abs() < 1e-12);
        assert!(r.absent_classes.is_empty());
    }

    #[test]
    fn absent_class_is_excluded_and_flagged() {
        // Class 2 never appears in the target.
        let pred = mask_from(&[&[0, 1, 2, 1]]);
        let target = mask_from(&[&[0, 1, 1, 1]]);
        let cm = confusion(&pred, &target, 3, None).unwrap();
        let r = metrics(&cm).unwrap();
        assert_eq!(r.absent_classes, vec![2]);
        assert_eq!(r.per_class[2].support, 0);
        assert_eq!(r.per_class[2].recall, None);
        // Macro recall averages class 0 (1.0) and class 1 (2/3) only.
        assert!((r.macro_recall - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ignore_index_excludes_target_pixels() {
        let pred = mask_from(&[&[0, 0, 1]]);
        let target = mask_from(&[&[0, 2, 1]]);
        let cm = confusion(&pred, &target, 3, Some(2)).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(metrics(&cm).unwrap().accuracy, 1.0);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(metrics(&cm), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let pred = mask_from(&[&[5]]);
        let target = mask_from(&[&[0]]);
        assert!(matches!(
            confusion(&pred, &target, 3, None),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn matches_brute_force_loop_on_random_pairs() {
        let mut rng = seeded(100);
        for _ in 0..100 {
            let c = 5usize;
            let pred = IndexMask::new_unchecked(Array2::from_shape_fn((32, 32), |_| {
                rng.gen_range(0..c as u16)
            }));
            let target = IndexMask::new_unchecked(Array2::from_shape_fn((32, 32), |_| {
                rng.gen_range(0..c as u16)
            }));
            let cm = confusion(&pred, &target, c, None).unwrap();

            // Independent tally.
            let mut naive = vec![vec![0u64; c]; c];
            for i in 0..32 {
                for j in 0..32 {
                    naive[target.get(i, j)][pred.get(i, j)] += 1;
                }
            }
            for t in 0..c {
                for p in 0..c {
                    assert_eq!(cm.counts()[[t, p]], naive[t][p]);
                }
            }

            // Ratio cross-check for one class.
            let r = metrics(&cm).unwrap();
            let col: u64 = (0..c).map(|t| naive[t][0]).sum();
            let row: u64 = naive[0].iter().sum();
            if col > 0 {
                assert!((r.per_class[0].precision.unwrap() - naive[0][0] as f64 / col as f64).abs() < 1e-12);
            }
            if row > 0 {
                assert!((r.per_class[0].recall.unwrap() - naive[0][0] as f64 / row as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_text_and_json_formats() {
        let counts = Array2::from_shape_vec((2, 2), vec![2u64, 2, 0, 4]).unwrap();
        let r = metrics(&ConfusionMatrix::from_counts(counts)).unwrap();
        let text = r.to_text();
        assert!(text.contains("accuracy = 0.750000\n"), "{text}");
        assert!(text.contains("macro_iou = 0.583333\n"), "{text}");
        assert!(text.contains("class_1_precision = 0.666667\n"), "{text}");
        assert!(text.contains("absent_classes = \n"), "{text}");

        let twin: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(twin, r);
        assert_eq!(twin.accuracy.to_bits(), r.accuracy.to_bits());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let scores =
            Array3::from_shape_vec((1, 1, 3), vec![0.5f64, 0.5, 0.1]).unwrap();
        assert_eq!(argmax_image(&scores).get(0, 0), 0);
        let scores = Array3::from_shape_vec((1, 1, 3), vec![0.1f64, 0.2, 0.7]).unwrap();
        assert_eq!(argmax_image(&scores).get(0, 0), 2);
    }

    fn tiny_map() -> ClassMap {
        ClassMap::new(vec![
            ClassEntry { index: 0, name: "a".into(), color: [0, 0, 0] },
            ClassEntry { index: 1, name: "b".into(), color: [255, 0, 0] },
            ClassEntry { index: 2, name: "c".into(), color: [0, 255, 0] },
        ])
        .unwrap()
    }

    fn tiny_model() -> DeepTriNet<f32> {
        let cfg = ModelConfig {
            num_classes: 3,
            input_size: 32,
            aspp_rates: vec![1, 2],
            aspp_channels: 8,
            se_reduction: 2,
            tau_spatial_kernel: 3,
            decoder_channels: 8,
            ..ModelConfig::default()
        };
        build_model(&cfg, 17).unwrap()
    }

    fn random_raster(h: usize, w: usize, seed: u64) -> Array3<u8> {
        let mut rng = seeded(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.gen::<u8>())
    }

    #[test]
    fn single_patch_prediction_collapses_to_one_forward() {
        let mut model = tiny_model();
        let map = tiny_map();
        let image = random_raster(32, 32, 1);
        let pred = predict_image(&mut model, &image, &map, 32, None).unwrap();

        let norm = normalize::<f32>(&image);
        let batch = norm
            .insert_axis(ndarray::Axis(0))
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let logits = model.forward(&batch, Mode::Eval).unwrap();
        let probs = softmax(&logits);
        let manual = argmax_image(&probs.index_axis(ndarray::Axis(0), 0).to_owned());
        assert_eq!(pred.index_mask.data(), manual.data());
        assert_eq!(pred.color_mask, decode_mask(&manual, &map).unwrap());
        assert_eq!(pred.probabilities.dim(), (32, 32, 3));
    }

    #[test]
    fn prediction_colors_stay_in_the_palette() {
        let mut model = tiny_model();
        let map = tiny_map();
        let image = random_raster(50, 70, 2);
        let pred = predict_image(&mut model, &image, &map, 16, None).unwrap();
        assert_eq!(pred.color_mask.dim(), (50, 70, 3));
        let palette: Vec<[u8; 3]> = (0..3).map(|c| map.color_of(c).unwrap()).collect();
        for i in 0..50 {
            for j in 0..70 {
                let px = [
                    pred.color_mask[[i, j, 0]],
                    pred.color_mask[[i, j, 1]],
                    pred.color_mask[[i, j, 2]],
                ];
                assert!(palette.contains(&px), "pixel ({i},{j}) = {px:?}");
            }
        }
        // Probabilities sum to one after blending.
        for i in 0..50 {
            for j in 0..70 {
                let s: f32 = (0..3).map(|c| pred.probabilities[[i, j, c]]).sum();
                assert!((s - 1.0).abs() < 1e-5, "({i},{j}): {s}");
            }
        }
    }

    #[test]
    fn stride_equal_to_patch_matches_direct_stitching() {
        let mut model = tiny_model();
        let map = tiny_map();
        let image = random_raster(64, 64, 3);
        let pred = predict_image(&mut model, &image, &map, 32, None).unwrap();

        for (pr, pc) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
            let mut patch = Array3::zeros((32, 32, 3));
            for i in 0..32 {
                for j in 0..32 {
                    for c in 0..3 {
                        patch[[i, j, c]] = image[[pr * 32 + i, pc * 32 + j, c]];
                    }
                }
            }
            let norm = normalize::<f32>(&patch);
            let batch = norm
                .insert_axis(ndarray::Axis(0))
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let logits = model.forward(&batch, Mode::Eval).unwrap();
            let probs = softmax(&logits);
            let tile = argmax_image(&probs.index_axis(ndarray::Axis(0), 0).to_owned());
            for i in 0..32 {
                for j in 0..32 {
                    assert_eq!(
                        pred.index_mask.get(pr * 32 + i, pc * 32 + j),
                        tile.get(i, j),
                        "patch ({pr},{pc}) pixel ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn evaluating_against_own_prediction_is_perfect() {
        let mut model = tiny_model();
        let map = tiny_map();
        let image = random_raster(40, 40, 4);
        let pred = predict_image(&mut model, &image, &map, 16, None).unwrap();
        let r = evaluate_image(&mut model, &image, &pred.color_mask, &map, 16).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_iou, 1.0);
    }

    #[test]
    fn emitted_patch_tiles_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let tiles = dir.path().join("tiles");
        let mut model = tiny_model();
        let map = tiny_map();
        let image = random_raster(40, 40, 5);
        predict_image(&mut model, &image, &map, 32, Some(&tiles)).unwrap();
        // 40 px at patch 32 / stride 32 → 2x2 grid.
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let f = tiles.join(patch_filename("patch", r, c));
            assert!(f.is_file(), "{}", f.display());
            let tile = crate::io::load_rgb(&f).unwrap();
            assert_eq!(tile.dim(), (32, 32, 3));
        }
    }
}
