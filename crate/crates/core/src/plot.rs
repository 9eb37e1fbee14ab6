//! Self-contained PNG chart rendering: polyline panels with axes,
//! titles, legends, and a small built-in bitmap font. Keeps training
//! curve output free of heavyweight plotting dependencies.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// One labeled curve.
pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub values: Vec<f64>,
}

/// One chart: a title and any number of curves sharing the axes.
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const PANEL_W: u32 = 360;
const PANEL_H: u32 = 260;
const MARGIN_LEFT: u32 = 48;
const MARGIN_RIGHT: u32 = 10;
const MARGIN_TOP: u32 = 24;
const MARGIN_BOTTOM: u32 = 26;

const BLACK: [u8; 3] = [0, 0, 0];
const GRAY: [u8; 3] = [200, 200, 200];

/// 5x7 glyphs; each byte is one row, low five bits used, MSB-side left.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1E, 0x01, 0x01, 0x0E, 0x01, 0x01, 0x1E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F], // unknown: box
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5 {
                if row & (0x10 >> dx) != 0 {
                    put(img, cx + dx as i64, y + dy as i64, color);
                }
            }
        }
        cx += 6;
    }
}

fn text_width(text: &str) -> i64 {
    text.chars().count() as i64 * 6
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let (mut x, mut y) = (x0, y0);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fmt_val(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Value range over every finite sample, padded when flat or empty.
fn value_range(series: &[Series]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in &s.values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn draw_panel(img: &mut RgbImage, ox: i64, oy: i64, panel: &Panel) {
    let px0 = ox + MARGIN_LEFT as i64;
    let py0 = oy + MARGIN_TOP as i64;
    let pw = (PANEL_W - MARGIN_LEFT - MARGIN_RIGHT) as i64;
    let ph = (PANEL_H - MARGIN_TOP - MARGIN_BOTTOM) as i64;
    let px1 = px0 + pw - 1;
    let py1 = py0 + ph - 1;

    draw_text(img, ox + 4, oy + 8, &panel.title, BLACK);
    let mut lx = ox + PANEL_W as i64 - MARGIN_RIGHT as i64;
    for s in panel.series.iter().rev() {
        lx -= text_width(&s.label) + 10;
        draw_text(img, lx, oy + 8, &s.label, s.color);
    }

    // Axes and a midline.
    draw_line(img, px0, py0, px0, py1, BLACK);
    draw_line(img, px0, py1, px1, py1, BLACK);
    let mid = py0 + ph / 2;
    draw_line(img, px0 + 1, mid, px1, mid, GRAY);

    let (lo, hi) = value_range(&panel.series);
    draw_text(img, ox + 2, py0 - 3, &fmt_val(hi), BLACK);
    draw_text(img, ox + 2, py1 - 3, &fmt_val(lo), BLACK);
    draw_text(img, ox + 2, mid - 3, &fmt_val((lo + hi) / 2.0), BLACK);

    let n_max = panel.series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    if n_max >= 1 {
        draw_text(img, px0, py1 + 4, "1", BLACK);
        let last = n_max.to_string();
        draw_text(img, px1 - text_width(&last) + 1, py1 + 4, &last, BLACK);
    }

    let to_xy = |i: usize, n: usize, v: f64| -> (i64, i64) {
        let x = if n <= 1 {
            px0 + pw / 2
        } else {
            px0 + ((i as f64) * (pw - 1) as f64 / (n - 1) as f64).round() as i64
        };
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let y = py1 - ((ph - 1) as f64 * t).round() as i64;
        (x, y)
    };

    for s in &panel.series {
        let n = s.values.len();
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let (x, y) = to_xy(i, n, v);
            if let Some((x0, y0)) = prev {
                draw_line(img, x0, y0, x, y, s.color);
            }
            // A small dot so single points stay visible.
            put(img, x, y - 1, s.color);
            put(img, x, y + 1, s.color);
            put(img, x - 1, y, s.color);
            put(img, x + 1, y, s.color);
            prev = Some((x, y));
        }
    }
}

/// Renders the panels into a `cols`-wide grid and writes a PNG.
pub fn render_panels(panels: &[Panel], cols: usize, path: &Path) -> Result<()> {
    assert!(cols >= 1, "at least one panel column");
    let cols = cols.min(panels.len().max(1));
    let rows = panels.len().div_ceil(cols).max(1);
    let mut img = RgbImage::from_pixel(
        cols as u32 * PANEL_W,
        rows as u32 * PANEL_H,
        Rgb([255, 255, 255]),
    );
    for (k, panel) in panels.iter().enumerate() {
        let ox = (k % cols) as i64 * PANEL_W as i64;
        let oy = (k / cols) as i64 * PANEL_H as i64;
        draw_panel(&mut img, ox, oy, panel);
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
