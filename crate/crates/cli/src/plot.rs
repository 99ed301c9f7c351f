//! Minimal PNG charts: loss curves and success-rate bars.
//!
//! Charts carry no text; the accompanying TSV files hold the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CliError, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 24;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    for i in 1..5 {
        let y = MARGIN + (HEIGHT - 2 * MARGIN) * i / 5;
        for x in MARGIN..WIDTH - MARGIN {
            img.put_pixel(x, y, GRID);
        }
    }
    for x in MARGIN..=WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, AXIS);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One curve per series over a shared step axis; the y axis spans zero to
/// the largest finite value.
pub fn curves(series: &[Vec<f64>]) -> RgbImage {
    let mut img = canvas();
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let top = series.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if n < 2 || top <= 0.0 {
        return img;
    }
    let (w, h) = (f64::from(WIDTH - 2 * MARGIN), f64::from(HEIGHT - 2 * MARGIN));
    let px = |i: usize, v: f64| {
        (f64::from(MARGIN) + w * i as f64 / (n - 1) as f64, f64::from(HEIGHT - MARGIN) - h * (v / top).clamp(0.0, 1.0))
    };
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                line(&mut img, px(i - 1, s[i - 1]), px(i, s[i]), color);
            }
        }
    }
    img
}

/// One bar per value in `[0, 1]`, left to right.
pub fn bars(values: &[f64]) -> RgbImage {
    let mut img = canvas();
    if values.is_empty() {
        return img;
    }
    let slot = (WIDTH - 2 * MARGIN) / values.len() as u32;
    let h = f64::from(HEIGHT - 2 * MARGIN);
    for (k, v) in values.iter().enumerate() {
        let height = (h * v.clamp(0.0, 1.0)).round() as u32;
        let x0 = MARGIN + 1 + slot * k as u32 + slot / 6;
        let x1 = MARGIN + slot * (k as u32 + 1) - slot / 6;
        for x in x0..x1.max(x0 + 1) {
            for y in (HEIGHT - MARGIN - height)..(HEIGHT - MARGIN) {
                img.put_pixel(x, y, PALETTE[k % PALETTE.len()]);
            }
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CliError::Plot { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_scale_with_value() {
        let img = bars(&[1.0, 0.5, 0.0]);
        let column = |x: u32| {
            (0..HEIGHT).filter(|&y| *img.get_pixel(x, y) != BACKGROUND && *img.get_pixel(x, y) != GRID).count()
        };
        let slot = (WIDTH - 2 * MARGIN) / 3;
        let mid = |k: u32| MARGIN + slot * k + slot / 2;
        assert!(column(mid(0)) > column(mid(1)));
        assert!(column(mid(1)) > column(mid(2)));
    }

    #[test]
    fn curves_are_deterministic_png() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![vec![3.0, 2.0, 1.5, f64::NAN, 1.0], vec![2.0, 2.0]];
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save(&curves(&s), &a).unwrap();
        save(&curves(&s), &b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert_eq!(bytes, std::fs::read(&b).unwrap());
        assert_eq!(image::open(&a).unwrap().width(), WIDTH);
    }
}
