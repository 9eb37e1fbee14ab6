//! Deterministic decomposition of large rasters into fixed-size patches and
//! smooth, overlap-weighted reconstruction of full-size prediction maps.
//!
//! A [`GridSpec`] is planned once per raster ([`plan_grid`]), the raster is
//! reflection-padded to the grid ([`pad_image`]), cut into row-major patches
//! ([`extract_patches`]), and per-patch probability maps are later merged
//! back with a squared-sine blend window ([`reassemble_smooth`]).

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Tiling plan for one raster: padding plus patch layout.
///
/// Invariants: `1 <= stride <= patch_size`; padded dims satisfy
/// `(padded - patch_size) % stride == 0` and are `>= patch_size`; the
/// `rows x cols` patches cover every padded pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub source_height: usize,
    pub source_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn padded_height(&self) -> usize {
        self.source_height + self.pad_top + self.pad_bottom
    }

    pub fn padded_width(&self) -> usize {
        self.source_width + self.pad_left + self.pad_right
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left corner of patch (row, col) in padded coordinates.
    pub fn patch_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.stride, col * self.stride)
    }

    /// Checks the structural invariants, reporting every violation.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.source_height == 0 || self.source_width == 0 {
            v.push(format!(
                "source dims must be positive, got {}x{}",
                self.source_height, self.source_width
            ));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            v.push(format!(
                "stride must be in [1, patch_size={}], got {}",
                self.patch_size, self.stride
            ));
        } else {
            for (name, padded, count) in [
                ("height", self.padded_height(), self.rows),
                ("width", self.padded_width(), self.cols),
            ] {
                if padded < self.patch_size || (padded - self.patch_size) % self.stride != 0 {
                    v.push(format!(
                        "padded {name} {padded} does not fit patch {} stride {}",
                        self.patch_size, self.stride
                    ));
                } else if count != (padded - self.patch_size) / self.stride + 1 {
                    v.push(format!(
                        "patch count {count} along {name} disagrees with padded extent {padded}"
                    ));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Serializes as the sidecar `key = value` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in [
            ("source_height", self.source_height),
            ("source_width", self.source_width),
            ("patch_size", self.patch_size),
            ("stride", self.stride),
            ("pad_top", self.pad_top),
            ("pad_bottom", self.pad_bottom),
            ("pad_left", self.pad_left),
            ("pad_right", self.pad_right),
            ("rows", self.rows),
            ("cols", self.cols),
        ] {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Parses the sidecar format and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = [None::<usize>; 10];
        const KEYS: [&str; 10] = [
            "source_height",
            "source_width",
            "patch_size",
            "stride",
            "pad_top",
            "pad_bottom",
            "pad_left",
            "pad_right",
            "rows",
            "cols",
        ];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    "<grid>",
                    format!("line {}: expected `key = value`, got {raw:?}", lineno + 1),
                )
            })?;
            let key = key.trim();
            let slot = KEYS.iter().position(|k| *k == key).ok_or_else(|| {
                Error::parse("<grid>", format!("line {}: unknown key {key:?}", lineno + 1))
            })?;
            let value = value.trim().parse::<usize>().map_err(|_| {
                Error::parse(
                    "<grid>",
                    format!("line {}: {key} value {:?} is not an integer", lineno + 1, value.trim()),
                )
            })?;
            fields[slot] = Some(value);
        }
        let mut got = [0usize; 10];
        for (i, f) in fields.iter().enumerate() {
            got[i] = f.ok_or_else(|| Error::parse("<grid>", format!("missing key {:?}", KEYS[i])))?;
        }
        let spec = GridSpec {
            source_height: got[0],
            source_width: got[1],
            patch_size: got[2],
            stride: got[3],
            pad_top: got[4],
            pad_bottom: got[5],
            pad_left: got[6],
            pad_right: got[7],
            rows: got[8],
            cols: got[9],
        };
        spec.validate()?;
        Ok(spec)
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

/// File name for the patch at grid position (row, col).
pub fn patch_filename(basename: &str, row: usize, col: usize) -> String {
    format!("{basename}_r{row}_c{col}.png")
}

/// Plans the minimal symmetric padding (extra pixel to bottom/right) that
/// makes `(padded - patch_size) % stride == 0` with `padded >= patch_size`,
/// and the resulting patch grid.
pub fn plan_grid(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<GridSpec> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "raster dimensions must be positive, got {height}x{width}"
        )));
    }
    if patch_size == 0 || stride == 0 || stride > patch_size {
        return Err(Error::Argument(format!(
            "stride must be in [1, patch_size={patch_size}], got {stride}"
        )));
    }
    // Steps of `stride` past the first patch needed to reach `dim`.
    let plan_axis = |dim: usize| -> (usize, usize, usize, usize) {
        let excess = dim.saturating_sub(patch_size);
        let steps = excess.div_ceil(stride);
        let padded = patch_size + steps * stride;
        let pad = padded - dim;
        (steps + 1, pad / 2, pad - pad / 2, padded)
    };
    let (rows, pad_top, pad_bottom, _) = plan_axis(height);
    let (cols, pad_left, pad_right, _) = plan_axis(width);
    let spec = GridSpec {
        source_height: height,
        source_width: width,
        patch_size,
        stride,
        pad_top,
        pad_bottom,
        pad_left,
        pad_right,
        rows,
        cols,
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

/// Mirror index without edge duplication, valid for any out-of-range offset.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Reflection-pads `image` to the padded dims of `spec`. No new pixel values
/// are introduced; a border pixel is never its own mirror image (except for
/// single-pixel axes, where it is the only value available).
pub fn pad_image<T: Copy>(image: &Array3<T>, spec: &GridSpec) -> Result<Array3<T>> {
    let (h, w, bands) = image.dim();
    if h != spec.source_height || w != spec.source_width {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but grid was planned for {}x{}",
            spec.source_height, spec.source_width
        )));
    }
    let rows: Vec<usize> = (0..spec.padded_height())
        .map(|i| reflect_index(i as isize - spec.pad_top as isize, h))
        .collect();
    let cols: Vec<usize> = (0..spec.padded_width())
        .map(|j| reflect_index(j as isize - spec.pad_left as isize, w))
        .collect();
    Ok(Array3::from_shape_fn(
        (rows.len(), cols.len(), bands),
        |(i, j, c)| image[[rows[i], cols[j], c]],
    ))
}

/// Copies out the patch at grid position (row, col) of the padded raster.
pub fn extract_patch<T: Copy>(
    padded: &Array3<T>,
    spec: &GridSpec,
    row: usize,
    col: usize,
) -> Result<Array3<T>> {
    check_padded_dims(padded.dim(), spec)?;
    if row >= spec.rows || col >= spec.cols {
        return Err(Error::Shape(format!(
            "patch ({row},{col}) outside grid {}x{}",
            spec.rows, spec.cols
        )));
    }
    let (y, x) = spec.patch_origin(row, col);
    let p = spec.patch_size;
    Ok(padded.slice(s![y..y + p, x..x + p, ..]).to_owned())
}

/// Cuts the padded raster into patches in row-major order (left to right,
/// top to bottom). Pure function of its inputs.
pub fn extract_patches<T: Copy>(padded: &Array3<T>, spec: &GridSpec) -> Result<Vec<Array3<T>>> {
    check_padded_dims(padded.dim(), spec)?;
    let mut out = Vec::with_capacity(spec.num_patches());
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            out.push(extract_patch(padded, spec, row, col)?);
        }
    }
    Ok(out)
}

fn check_padded_dims(dim: (usize, usize, usize), spec: &GridSpec) -> Result<()> {
    if dim.0 != spec.padded_height() || dim.1 != spec.padded_width() {
        return Err(Error::Shape(format!(
            "padded raster is {}x{} but grid expects {}x{}",
            dim.0,
            dim.1,
            spec.padded_height(),
            spec.padded_width()
        )));
    }
    Ok(())
}

/// Separable squared-sine blend window: symmetric, strictly positive, and 1
/// at the exact center for odd sizes.
#[derive(Debug, Clone)]
pub struct BlendWindow<F> {
    weights: Array2<F>,
}

impl<F: Scalar> BlendWindow<F> {
    pub fn weights(&self) -> &Array2<F> {
        &self.weights
    }

    pub fn patch_size(&self) -> usize {
        self.weights.nrows()
    }
}

/// Builds the blend window `w(i)*w(j)` with `w(i) = sin^2(pi*(i+0.5)/p)`.
pub fn make_blend_window<F: Scalar>(patch_size: usize) -> Result<BlendWindow<F>> {
    if patch_size < 2 {
        return Err(Error::Argument(format!(
            "blend window needs patch_size >= 2, got {patch_size}"
        )));
    }
    // Computed for the first half and mirrored so the window is exactly
    // flip-symmetric, which floating-point sin alone does not guarantee.
    let mut w1 = vec![0.0f64; patch_size];
    for i in 0..patch_size.div_ceil(2) {
        let x = std::f64::consts::PI * (i as f64 + 0.5) / patch_size as f64;
        let v = x.sin().powi(2);
        w1[i] = v;
        w1[patch_size - 1 - i] = v;
    }
    let weights =
        Array2::from_shape_fn((patch_size, patch_size), |(i, j)| F::from_f64(w1[i] * w1[j]));
    Ok(BlendWindow { weights })
}

/// Streaming weighted reconstruction: patches are pushed in row-major grid
/// order and the blended raster is produced at the end, so per-patch
/// probability maps never need to be held all at once.
pub struct SmoothAccumulator<F> {
    spec: GridSpec,
    window: Array2<F>,
    acc: Array3<F>,
    wsum: Array2<F>,
    channels: usize,
    next: usize,
}

impl<F: Scalar> SmoothAccumulator<F> {
    pub fn new(spec: &GridSpec, window: &BlendWindow<F>, channels: usize) -> Result<Self> {
        spec.validate()?;
        if window.patch_size() != spec.patch_size {
            return Err(Error::Shape(format!(
                "window size {} does not match patch size {}",
                window.patch_size(),
                spec.patch_size
            )));
        }
        if channels == 0 {
            return Err(Error::Argument("channel count must be positive".to_string()));
        }
        let (ph, pw) = (spec.padded_height(), spec.padded_width());
        Ok(SmoothAccumulator {
            spec: spec.clone(),
            window: window.weights().clone(),
            acc: Array3::from_elem((ph, pw, channels), F::zero()),
            wsum: Array2::from_elem((ph, pw), F::zero()),
            channels,
            next: 0,
        })
    }

    /// Grid position the next pushed patch will land on.
    pub fn next_position(&self) -> Option<(usize, usize)> {
        (self.next < self.spec.num_patches())
            .then(|| (self.next / self.spec.cols, self.next % self.spec.cols))
    }

    /// Adds the next patch's probability map, weighted by the blend window.
    pub fn push(&mut self, patch: ArrayView3<'_, F>) -> Result<()> {
        let (row, col) = self.next_position().ok_or_else(|| {
            Error::Shape(format!(
                "received more patches than the {} grid positions",
                self.spec.num_patches()
            ))
        })?;
        let p = self.spec.patch_size;
        if patch.dim() != (p, p, self.channels) {
            return Err(Error::Shape(format!(
                "patch ({row},{col}) has shape {:?}, expected ({p}, {p}, {})",
                patch.dim(),
                self.channels
            )));
        }
        let (y, x) = self.spec.patch_origin(row, col);
        for i in 0..p {
            for j in 0..p {
                let wij = self.window[[i, j]];
                self.wsum[[y + i, x + j]] += wij;
                for ch in 0..self.channels {
                    self.acc[[y + i, x + j, ch]] += patch[[i, j, ch]] * wij;
                }
            }
        }
        self.next += 1;
        Ok(())
    }

    /// Normalizes by accumulated weight and crops back to source dims.
    pub fn finish(self) -> Result<Array3<F>> {
        let total = self.spec.num_patches();
        if self.next != total {
            return Err(Error::Shape(format!(
                "grid expects {total} patches, received {}",
                self.next
            )));
        }
        let (h, w) = (self.spec.source_height, self.spec.source_width);
        let (top, left) = (self.spec.pad_top, self.spec.pad_left);
        let mut out = Array3::from_elem((h, w, self.channels), F::zero());
        for i in 0..h {
            for j in 0..w {
                let ws = self.wsum[[top + i, left + j]];
                // Strictly positive window + full coverage make this impossible
                // for a valid GridSpec.
                assert!(ws > F::zero(), "pixel ({i},{j}) received zero blend weight");
                for ch in 0..self.channels {
                    out[[i, j, ch]] = self.acc[[top + i, left + j, ch]] / ws;
                }
            }
        }
        Ok(out)
    }
}

/// Window-weighted average of overlapping patch probability maps, cropped to
/// source dims. Inputs that sum to 1 over channels at each pixel come back
/// summing to 1 (weighted averages of distributions are distributions).
pub fn reassemble_smooth<F: Scalar>(
    patch_probs: &[Array3<F>],
    spec: &GridSpec,
    window: &BlendWindow<F>,
) -> Result<Array3<F>> {
    if patch_probs.len() != spec.num_patches() {
        return Err(Error::Shape(format!(
            "grid expects {} patches, got {}",
            spec.num_patches(),
            patch_probs.len()
        )));
    }
    let channels = patch_probs[0].dim().2;
    let mut acc = SmoothAccumulator::new(spec, window, channels)?;
    for patch in patch_probs {
        acc.push(patch.view())?;
    }
    acc.finish()
}
