//! Minimal raster line plots for sweep reports. Hand-drawn onto an RGB
//! buffer: axes, one polyline per series, numeric tick labels from a tiny
//! built-in glyph set.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: i64 = 56;

// 3x5 glyphs, row-major bits, for digits and a few symbols
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        ' ' => [0; 5],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(g) = glyph(ch) {
            for (ry, row) in g.iter().enumerate() {
                for rx in 0..3 {
                    if row >> (2 - rx) & 1 == 1 {
                        put(img, cx + rx as i64, y + ry as i64, color);
                    }
                }
            }
        }
        cx += 4;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

const SERIES_COLORS: [Rgb<u8>; 4] = [
    Rgb([200, 40, 40]),
    Rgb([40, 90, 200]),
    Rgb([30, 150, 60]),
    Rgb([150, 60, 180]),
];

/// One polyline per series over shared axes, with min/max tick labels.
pub fn line_plot(path: &Path, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axes = Rgb([0, 0, 0]);
    let (x0, y0) = (MARGIN, H as i64 - MARGIN);
    let (x1, y1) = (W as i64 - MARGIN / 2, MARGIN / 2);
    line(&mut img, x0, y0, x1, y0, axes);
    line(&mut img, x0, y0, x0, y1, axes);

    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if !pts.is_empty() {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if (xmax - xmin).abs() < 1e-12 {
            xmax = xmin + 1.0;
        }
        if (ymax - ymin).abs() < 1e-12 {
            ymax = ymin + 1.0;
        }
        let to_px = |x: f64, y: f64| -> (i64, i64) {
            (
                x0 + ((x - xmin) / (xmax - xmin) * (x1 - x0) as f64) as i64,
                y0 - ((y - ymin) / (ymax - ymin) * (y0 - y1) as f64) as i64,
            )
        };
        for (si, (_, p)) in series.iter().enumerate() {
            let color = SERIES_COLORS[si % SERIES_COLORS.len()];
            let mut sorted = p.clone();
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in sorted.windows(2) {
                let (ax, ay) = to_px(w[0].0, w[0].1);
                let (bx, by) = to_px(w[1].0, w[1].1);
                line(&mut img, ax, ay, bx, by, color);
            }
            for &(x, y) in &sorted {
                let (px, py) = to_px(x, y);
                for dx in -2i64..=2 {
                    for dy in -2i64..=2 {
                        if dx.abs() + dy.abs() <= 2 {
                            put(&mut img, px + dx, py + dy, color);
                        }
                    }
                }
            }
            // series marker in the legend corner
            draw_text(
                &mut img,
                x0 + 8 + 90 * si as i64,
                y1,
                &format!("{}", si),
                color,
            );
        }
        let fmt = |v: f64| {
            if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
                format!("{v:.2e}")
            } else {
                format!("{v:.2}")
            }
        };
        draw_text(&mut img, x0 - 4, y0 + 8, &fmt(xmin), axes);
        draw_text(&mut img, x1 - 30, y0 + 8, &fmt(xmax), axes);
        draw_text(&mut img, 8, y0 - 5, &fmt(ymin), axes);
        draw_text(&mut img, 8, y1, &fmt(ymax), axes);
    }
    img.save(path)?;
    Ok(())
}
