//! Deterministic synthetic rasters: block-structured four-class scenes
//! with per-pixel color jitter, for self-contained tests and demos.

use ndarray::Array3;
use rand::Rng as _;

use crate::config::{ClassEntry, ClassMap};
use crate::nn::seeded;

/// Number of classes in the synthetic palette.
pub const SYNTH_CLASSES: usize = 4;

/// Mask colors, by class index.
const MASK_COLORS: [[u8; 3]; SYNTH_CLASSES] =
    [[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255]];

/// Image base colors, by class index; pixels jitter around these.
const BASE_COLORS: [[u8; 3]; SYNTH_CLASSES] =
    [[40, 40, 40], [220, 60, 60], [60, 220, 60], [60, 60, 220]];

/// Largest per-channel jitter applied to image pixels.
pub const JITTER: i32 = 15;

/// The class map matching [`synth_pair`] masks.
pub fn synth_class_map() -> ClassMap {
    let names = ["background", "built", "vegetation", "water"];
    ClassMap::new(
        (0..SYNTH_CLASSES)
            .map(|i| ClassEntry {
                index: i,
                name: names[i].to_string(),
                color: MASK_COLORS[i],
            })
            .collect(),
    )
    .expect("synthetic palette is valid")
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-pixel channel jitter in `[-JITTER, JITTER]`.
fn jitter(seed: u64, i: usize, j: usize, c: usize) -> i32 {
    let key = seed
        ^ (i as u64).wrapping_mul(0x0000_0001_0000_01B3)
        ^ (j as u64).wrapping_mul(0x1000_0000_01B3_0001)
        ^ ((c as u64) << 56);
    (splitmix(key) % (2 * JITTER as u64 + 1)) as i32 - JITTER
}

/// Builds one deterministic (image, color mask) pair.
///
/// The scene is a grid of `block`-sized squares, each assigned one of the
/// four classes by a seeded draw. Image pixels sit at the class base color
/// plus hash-derived jitter, so the same `(height, width, seed, block)`
/// always reproduces the same pair bit for bit.
pub fn synth_pair(
    height: usize,
    width: usize,
    seed: u64,
    block: usize,
) -> (Array3<u8>, Array3<u8>) {
    assert!(height >= 1 && width >= 1, "raster must be non-empty");
    assert!(block >= 1, "block must be at least one pixel");
    let rows = height.div_ceil(block);
    let cols = width.div_ceil(block);
    let mut rng = seeded(seed);
    let classes: Vec<usize> = (0..rows * cols)
        .map(|_| rng.gen_range(0..SYNTH_CLASSES))
        .collect();

    let mut image = Array3::zeros((height, width, 3));
    let mut mask = Array3::zeros((height, width, 3));
    for i in 0..height {
        for j in 0..width {
            let k = classes[(i / block) * cols + (j / block)];
            for c in 0..3 {
                mask[[i, j, c]] = MASK_COLORS[k][c];
                let v = BASE_COLORS[k][c] as i32 + jitter(seed, i, j, c);
                image[[i, j, c]] = v.clamp(0, 255) as u8;
            }
        }
    }
    (image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{encode_mask, ColorMode};

    #[test]
    fn pairs_are_deterministic_in_the_seed() {
        let (i1, m1) = synth_pair(48, 64, 7, 16);
        let (i2, m2) = synth_pair(48, 64, 7, 16);
        assert_eq!(i1, i2);
        assert_eq!(m1, m2);
        let (i3, m3) = synth_pair(48, 64, 8, 16);
        assert!(i3 != i1 || m3 != m1);
    }

    #[test]
    fn masks_use_only_palette_colors_in_uniform_blocks() {
        let (_, mask) = synth_pair(40, 56, 3, 8);
        for i in 0..40 {
            for j in 0..56 {
                let px = [mask[[i, j, 0]], mask[[i, j, 1]], mask[[i, j, 2]]];
                assert!(MASK_COLORS.contains(&px), "({i},{j}) = {px:?}");
                // Every pixel matches its block's origin pixel.
                let (oi, oj) = (i / 8 * 8, j / 8 * 8);
                let origin = [mask[[oi, oj, 0]], mask[[oi, oj, 1]], mask[[oi, oj, 2]]];
                assert_eq!(px, origin);
            }
        }
    }

    #[test]
    fn image_pixels_stay_near_their_class_base_color() {
        let (image, mask) = synth_pair(32, 32, 11, 16);
        for i in 0..32 {
            for j in 0..32 {
                let px = [mask[[i, j, 0]], mask[[i, j, 1]], mask[[i, j, 2]]];
                let k = MASK_COLORS.iter().position(|c| *c == px).unwrap();
                for c in 0..3 {
                    let base = BASE_COLORS[k][c] as i32;
                    let got = image[[i, j, c]] as i32;
                    assert!(
                        (got - base).abs() <= JITTER,
                        "({i},{j},{c}): {got} vs base {base}"
                    );
                }
            }
        }
    }

    #[test]
    fn masks_encode_cleanly_under_the_synthetic_class_map() {
        let map = synth_class_map();
        assert_eq!(map.num_classes(), SYNTH_CLASSES);
        let (_, mask) = synth_pair(33, 47, 5, 16);
        let enc = encode_mask(&mask, &map, ColorMode::Strict).unwrap();
        assert_eq!(enc.unknown_pixels, 0);
        assert_eq!(enc.mask.dim(), (33, 47));
    }
}
