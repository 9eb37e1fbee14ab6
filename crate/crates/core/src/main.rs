//! Command-line front end: grid rasters into patches, train, predict
//! whole images, and evaluate predictions against reference masks.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use deeptrinet::config::{load_class_map, load_config, TrainConfig};
use deeptrinet::eval::{evaluate_image, predict_image};
use deeptrinet::model::{build_model, load_checkpoint};
use deeptrinet::preprocess::build_manifest;
use deeptrinet::tiling::{extract_patch, pad_image, patch_filename, plan_grid};
use deeptrinet::train::{export_history, fit, plot_history};

#[derive(Parser)]
#[command(
    name = "deeptrinet",
    version,
    about = "Satellite-image semantic segmentation with tri-level attention"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cut paired rasters into patch grids and write a dataset manifest.
    Grid {
        /// Directory of source images.
        #[arg(long, value_name = "DIR")]
        image: PathBuf,
        /// Directory of color masks paired to images by basename.
        #[arg(long, value_name = "DIR")]
        mask: PathBuf,
        /// Patch side length in pixels.
        #[arg(long, default_value_t = 256)]
        patch: usize,
        /// Grid stride in pixels.
        #[arg(long, default_value_t = 256)]
        stride: usize,
        /// Output directory (images/, masks/, grids/, manifest.txt).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model from a manifest of patch pairs.
    Train {
        /// Dataset manifest file.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Class map file (index,name,R,G,B lines).
        #[arg(long, value_name = "FILE")]
        classes: PathBuf,
        /// Model/training config file (key = value lines).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Output directory for checkpoints, history, and plots.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Predict a whole raster with smooth tiled blending.
    Predict {
        /// Trained checkpoint file.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Image to segment.
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Class map file.
        #[arg(long, value_name = "FILE")]
        classes: PathBuf,
        /// Grid stride in pixels; smaller strides blend more patches.
        #[arg(long, default_value_t = 128)]
        stride: usize,
        /// Output color-mask PNG.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also save each patch's predicted tile in this directory.
        #[arg(long, value_name = "DIR")]
        emit_patches: Option<PathBuf>,
    },
    /// Score a prediction against a reference mask.
    Evaluate {
        /// Trained checkpoint file.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Image to segment.
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Reference color mask.
        #[arg(long, value_name = "FILE")]
        mask: PathBuf,
        /// Class map file.
        #[arg(long, value_name = "FILE")]
        classes: PathBuf,
        /// Report file; a `.json` twin is written next to it.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Grid { image, mask, patch, stride, out } => grid(&image, &mask, patch, stride, &out),
        Cmd::Train { manifest, classes, config, out } => train(&manifest, &classes, &config, &out),
        Cmd::Predict { checkpoint, image, classes, stride, out, emit_patches } => {
            predict(&checkpoint, &image, &classes, stride, &out, emit_patches.as_deref())
        }
        Cmd::Evaluate { checkpoint, image, mask, classes, report } => {
            evaluate(&checkpoint, &image, &mask, &classes, &report)
        }
    }
}

fn grid(image_dir: &Path, mask_dir: &Path, patch: usize, stride: usize, out: &Path) -> anyhow::Result<()> {
    // Pair rasters by basename first; the split assigned here is discarded.
    let pairing = build_manifest(image_dir, mask_dir, None, &TrainConfig::default())
        .context("pairing images with masks")?;
    for w in &pairing.warnings {
        eprintln!("warning: {w}");
    }

    let images_out = out.join("images");
    let masks_out = out.join("masks");
    let grids_out = out.join("grids");
    for dir in [&images_out, &masks_out, &grids_out] {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut total_patches = 0usize;
    for entry in &pairing.manifest.entries {
        let stem = entry
            .image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("image filename is not valid UTF-8")?;
        let image = deeptrinet::io::load_rgb(&entry.image_path)?;
        let mask = deeptrinet::io::load_rgb(&entry.mask_path)?;
        anyhow::ensure!(
            image.dim() == mask.dim(),
            "{stem}: image {:?} and mask {:?} dims differ",
            image.dim(),
            mask.dim()
        );
        let (h, w, _) = image.dim();
        let spec = plan_grid(h, w, patch, stride)?;
        spec.save(&grids_out.join(format!("{stem}.grid")))?;
        let padded_image = pad_image(&image, &spec)?;
        let padded_mask = pad_image(&mask, &spec)?;
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let name = patch_filename(stem, row, col);
                let ip = extract_patch(&padded_image, &spec, row, col)?;
                deeptrinet::io::save_rgb(&images_out.join(&name), &ip)?;
                let mp = extract_patch(&padded_mask, &spec, row, col)?;
                deeptrinet::io::save_rgb(&masks_out.join(&name), &mp)?;
            }
        }
        total_patches += spec.num_patches();
        println!(
            "{stem}: {h}x{w} -> {} patches ({} rows x {} cols)",
            spec.num_patches(),
            spec.rows,
            spec.cols
        );
    }

    let build = build_manifest(&images_out, &masks_out, None, &TrainConfig::default())
        .context("building the patch manifest")?;
    for w in &build.warnings {
        eprintln!("warning: {w}");
    }
    let manifest_path = out.join("manifest.txt");
    build.manifest.save(&manifest_path)?;
    println!(
        "wrote {} patch pairs to {} ({} train / {} val)",
        total_patches,
        manifest_path.display(),
        build.manifest.split_entries(deeptrinet::preprocess::Split::Train).len(),
        build.manifest.split_entries(deeptrinet::preprocess::Split::Val).len(),
    );
    Ok(())
}

fn train(manifest: &Path, classes: &Path, config: &Path, out: &Path) -> anyhow::Result<()> {
    let (mcfg, tcfg) = load_config(config)?;
    let map = load_class_map(classes)?;
    let manifest = deeptrinet::preprocess::DatasetManifest::load(manifest)?;
    let mut model = build_model::<f32>(&mcfg, tcfg.seed)?;
    println!(
        "model: {} parameters, {} classes, {}px patches",
        model.num_params(),
        mcfg.num_classes,
        mcfg.input_size
    );
    let outcome = fit(&mut model, &manifest, &map, &tcfg, out)?;
    let history_path = out.join("history.csv");
    export_history(&outcome.history, &history_path)?;
    let (metrics_png, loss_png) = plot_history(&outcome.history, out)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "epoch {}: train_loss {:.4} val_loss {:.4} val_iou {:.4}",
            last.epoch, last.train_loss, last.val_loss, last.val_iou
        );
    }
    println!(
        "best checkpoint: {} ({} = {:.6})",
        outcome.best_checkpoint.display(),
        tcfg.checkpoint_metric,
        outcome.best_value
    );
    println!(
        "history: {} plots: {} {}",
        history_path.display(),
        metrics_png.display(),
        loss_png.display()
    );
    Ok(())
}

fn predict(
    checkpoint: &Path,
    image: &Path,
    classes: &Path,
    stride: usize,
    out: &Path,
    emit_patches: Option<&Path>,
) -> anyhow::Result<()> {
    let mut model = load_checkpoint::<f32>(checkpoint)?;
    let map = load_class_map(classes)?;
    let raster = deeptrinet::io::load_rgb(image)?;
    let pred = predict_image(&mut model, &raster, &map, stride, emit_patches)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    deeptrinet::io::save_rgb(out, &pred.color_mask)?;
    let (h, w, _) = pred.color_mask.dim();
    println!("wrote {}x{w} mask to {}", h, out.display());
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    image: &Path,
    mask: &Path,
    classes: &Path,
    report: &Path,
) -> anyhow::Result<()> {
    let mut model = load_checkpoint::<f32>(checkpoint)?;
    let map = load_class_map(classes)?;
    let raster = deeptrinet::io::load_rgb(image)?;
    let reference = deeptrinet::io::load_rgb(mask)?;
    let stride = model.config().input_size / 2;
    let r = evaluate_image(&mut model, &raster, &reference, &map, stride)?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(report, r.to_text()).with_context(|| format!("writing {}", report.display()))?;
    let json_path = report.with_extension("json");
    std::fs::write(&json_path, r.to_json())
        .with_context(|| format!("writing {}", json_path.display()))?;
    print!("{}", r.to_text());
    println!("report: {} / {}", report.display(), json_path.display());
    Ok(())
}
