//! Pixel normalization, color-mask <-> index-mask codecs, and dataset
//! ingestion into paired (image, mask) manifests with a seeded train/val
//! split.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ClassMap, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Maps 8-bit pixels into [-1, 1] via `x / 127.5 - 1`.
pub fn normalize<F: Scalar>(image: &Array3<u8>) -> Array3<F> {
    image.mapv(|v| F::from_f64(f64::from(v) / 127.5 - 1.0))
}

/// [`normalize`] for integer inputs that may be out of gamut; rejects values
/// outside [0, 255].
pub fn normalize_checked<F: Scalar>(image: &Array3<i32>) -> Result<Array3<F>> {
    if let Some(bad) = image.iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::Range(format!(
            "pixel value {bad} outside [0, 255]"
        )));
    }
    Ok(image.mapv(|v| F::from_f64(f64::from(v) / 127.5 - 1.0)))
}

/// Inverse of [`normalize`]: `round((x + 1) * 127.5)` clipped to [0, 255].
/// Values outside [-1, 1] (beyond rounding slack) are rejected.
pub fn denormalize<F: Scalar>(norm: &Array3<F>) -> Result<Array3<u8>> {
    const SLACK: f64 = 1e-6;
    let mut out = Array3::zeros(norm.dim());
    for (o, v) in out.iter_mut().zip(norm.iter()) {
        let x = v.to_f64();
        if !(-1.0 - SLACK..=1.0 + SLACK).contains(&x) {
            return Err(Error::Range(format!("normalized value {x} outside [-1, 1]")));
        }
        *o = ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// Per-pixel class indices, always `< C` of the governing [`ClassMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMask {
    data: Array2<u16>,
}

impl IndexMask {
    /// Wraps label data after checking every value against `num_classes`.
    pub fn new(data: Array2<u16>, num_classes: usize) -> Result<Self> {
        if let Some(bad) = data.iter().find(|&&v| usize::from(v) >= num_classes) {
            return Err(Error::Index {
                index: usize::from(*bad),
                classes: num_classes,
            });
        }
        Ok(IndexMask { data })
    }

    /// Wraps label data the caller already knows to be in range.
    pub fn new_unchecked(data: Array2<u16>) -> Self {
        IndexMask { data }
    }

    pub fn data(&self) -> &Array2<u16> {
        &self.data
    }

    pub fn into_data(self) -> Array2<u16> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        usize::from(self.data[[i, j]])
    }

    /// Per-class pixel counts; the total always equals the pixel count.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0usize; num_classes];
        for &v in &self.data {
            h[usize::from(v)] += 1;
        }
        h
    }
}

/// Whether unknown mask colors abort or fold into the background class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    /// Unknown color -> error naming the first offending pixel.
    Strict,
    /// Unknown color -> class 0, counted.
    Lenient,
}

/// An encoded mask plus how many pixels had colors missing from the map
/// (always 0 in strict mode).
#[derive(Debug, Clone)]
pub struct EncodedMask {
    pub mask: IndexMask,
    pub unknown_pixels: usize,
}

/// Converts an RGB mask into class indices using the map's exact colors.
pub fn encode_mask(color_mask: &Array3<u8>, map: &ClassMap, mode: ColorMode) -> Result<EncodedMask> {
    let (h, w, bands) = color_mask.dim();
    if bands != 3 {
        return Err(Error::Shape(format!(
            "color mask must have 3 bands, got {bands}"
        )));
    }
    let lut: HashMap<[u8; 3], u16> = map
        .entries()
        .iter()
        .map(|e| (e.color, e.index as u16))
        .collect();
    let mut data = Array2::zeros((h, w));
    let mut unknown = 0usize;
    for i in 0..h {
        for j in 0..w {
            let rgb = [
                color_mask[[i, j, 0]],
                color_mask[[i, j, 1]],
                color_mask[[i, j, 2]],
            ];
            match lut.get(&rgb) {
                Some(&idx) => data[[i, j]] = idx,
                None => match mode {
                    ColorMode::Strict => {
                        return Err(Error::UnknownColor {
                            row: i,
                            col: j,
                            r: rgb[0],
                            g: rgb[1],
                            b: rgb[2],
                        })
                    }
                    ColorMode::Lenient => {
                        data[[i, j]] = 0;
                        unknown += 1;
                    }
                },
            }
        }
    }
    Ok(EncodedMask {
        mask: IndexMask::new_unchecked(data),
        unknown_pixels: unknown,
    })
}

/// Paints class indices back into the map's RGB colors.
pub fn decode_mask(mask: &IndexMask, map: &ClassMap) -> Result<Array3<u8>> {
    let (h, w) = mask.dim();
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let color = map.color_of(mask.get(i, j))?;
            for (c, &v) in color.iter().enumerate() {
                out[[i, j, c]] = v;
            }
        }
    }
    Ok(out)
}

/// Which half of the split a pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Argument(format!(
                "unknown split {other:?} (expected train or val)"
            ))),
        }
    }
}

/// One (image, mask) pair and its split assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

/// The dataset index: every image paired with exactly one mask, plus a
/// pointer to the class map that governs mask colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_map_ref: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Serializes as `image_path<TAB>mask_path<TAB>split` lines with the
    /// class-map reference in a comment header.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(ref cm) = self.class_map_ref {
            out.push_str(&format!("# class_map = {}\n", cm.display()));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.image_path.display(),
                e.mask_path.display(),
                e.split
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut class_map_ref = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.split_once('=') {
                    if key.trim() == "class_map" {
                        class_map_ref = Some(PathBuf::from(value.trim()));
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    "<manifest>",
                    format!(
                        "line {}: expected `image<TAB>mask<TAB>split`, got {raw:?}",
                        lineno + 1
                    ),
                ));
            }
            entries.push(ManifestEntry {
                image_path: PathBuf::from(fields[0]),
                mask_path: PathBuf::from(fields[1]),
                split: fields[2].parse()?,
            });
        }
        if entries.is_empty() {
            return Err(Error::EmptyDataset("manifest holds no pairs".to_string()));
        }
        Ok(DatasetManifest {
            entries,
            class_map_ref,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }
}

/// A built manifest plus warnings about files that had to be skipped.
#[derive(Debug, Clone)]
pub struct ManifestBuild {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

fn is_raster(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

fn scan_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut found = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_raster(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                found.insert(stem.to_string(), path);
            }
        }
    }
    Ok(found)
}

/// Pairs rasters in `image_dir` and `mask_dir` by shared basename and
/// assigns a deterministic seeded train/val split. Unpaired files are
/// excluded and reported as warnings; no usable pair at all is an error.
pub fn build_manifest(
    image_dir: &Path,
    mask_dir: &Path,
    class_map_ref: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<ManifestBuild> {
    let images = scan_rasters(image_dir)?;
    let mut masks = scan_rasters(mask_dir)?;
    let mut warnings = Vec::new();
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    for (stem, image_path) in images {
        match masks.remove(&stem) {
            Some(mask_path) => pairs.push((stem, image_path, mask_path)),
            None => warnings.push(format!(
                "image {} has no mask with the same basename; excluded",
                image_path.display()
            )),
        }
    }
    for (_, mask_path) in masks {
        warnings.push(format!(
            "mask {} has no image with the same basename; excluded",
            mask_path.display()
        ));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no (image, mask) pairs found under {} and {}",
            image_dir.display(),
            mask_dir.display()
        )));
    }

    // The scan is already basename-sorted (BTreeMap); the seeded shuffle
    // decides split membership, so the result is independent of filesystem
    // enumeration order.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let mut n_val = (pairs.len() as f64 * cfg.validation_fraction).round() as usize;
    if pairs.len() >= 2 {
        n_val = n_val.clamp(1, pairs.len() - 1);
    }
    let mut split = vec![Split::Train; pairs.len()];
    for &idx in order.iter().take(n_val) {
        split[idx] = Split::Val;
    }
    let entries = pairs
        .into_iter()
        .zip(split)
        .map(|((_, image_path, mask_path), split)| ManifestEntry {
            image_path,
            mask_path,
            split,
        })
        .collect();
    Ok(ManifestBuild {
        manifest: DatasetManifest {
            entries,
            class_map_ref: class_map_ref.map(Path::to_path_buf),
        },
        warnings,
    })
}
