//! Minimal PNG line plots for loss curves, sigma traces and per-angle
//! metrics. No text rendering; series are distinguished by gray level and
//! the value range is printed by the caller if needed.

use std::path::Path;

use crate::error::Result;
use crate::io::write_gray_png;

const W: usize = 640;
const H: usize = 360;
const MARGIN: usize = 24;

/// Draw one or more series as polylines over a shared y-range and write an
/// 8-bit grayscale PNG. Series are drawn darkest first.
pub fn line_plot(path: &Path, series: &[&[f64]]) -> Result<()> {
    let mut img = vec![235u8; W * H];

    // frame
    for x in MARGIN..W - MARGIN {
        img[MARGIN * W + x] = 140;
        img[(H - MARGIN) * W + x] = 140;
    }
    for y in MARGIN..H - MARGIN {
        img[y * W + MARGIN] = 140;
        img[y * W + (W - MARGIN)] = 140;
    }

    let finite: Vec<f64> = series
        .iter()
        .flat_map(|s| s.iter())
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    if finite.is_empty() {
        return write_gray_png(path, &img, W, H);
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let plot_w = (W - 2 * MARGIN) as f64;
    let plot_h = (H - 2 * MARGIN) as f64;

    for (si, s) in series.iter().enumerate() {
        if s.len() < 2 {
            continue;
        }
        let shade = (20 + 60 * (si % 3)) as u8;
        let px = |i: usize| MARGIN as f64 + plot_w * i as f64 / (s.len() - 1) as f64;
        let py = |v: f64| MARGIN as f64 + plot_h * (1.0 - (v - lo) / span);
        for i in 0..s.len() - 1 {
            if !s[i].is_finite() || !s[i + 1].is_finite() {
                continue;
            }
            draw_line(&mut img, px(i), py(s[i]), px(i + 1), py(s[i + 1]), shade);
        }
    }
    write_gray_png(path, &img, W, H)
}

fn draw_line(img: &mut [u8], x0: f64, y0: f64, x1: f64, y1: f64, shade: u8) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as isize;
        let y = (y0 + t * (y1 - y0)).round() as isize;
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            img[y as usize * W + x as usize] = shade;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_plot_file() {
        let dir = std::env::temp_dir().join("radfield_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("loss.png");
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin()).collect();
        let b: Vec<f64> = (0..100).map(|i| 1.0 / (1.0 + i as f64)).collect();
        line_plot(&path, &[&a, &b]).unwrap();
        let (pixels, w, h) = crate::io::read_gray_png(&path).unwrap();
        assert_eq!((w, h), (W, H));
        assert!(pixels.iter().any(|&p| p < 100), "a line must be drawn");
    }

    #[test]
    fn empty_series_still_writes() {
        let dir = std::env::temp_dir().join("radfield_plot_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.png");
        line_plot(&path, &[&[]]).unwrap();
        assert!(path.exists());
    }
}
