//! Static image output: tile grids, bitmap-font annotation and simple plots.

use font8x8::{UnicodeFonts, BASIC_FONTS};

use crate::error::{Error, Result};
use crate::image::{RgbImage, ValueRange};
use crate::resample::Filter;

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
pub const BLACK: [f64; 3] = [0.0, 0.0, 0.0];
const PALETTE: [[f64; 3]; 6] =
    [[0.12, 0.47, 0.71], [1.0, 0.5, 0.05], [0.17, 0.63, 0.17], [0.84, 0.15, 0.16], [0.58, 0.4, 0.74], [0.55, 0.34, 0.29]];

/// Width in pixels of `text` drawn at `scale`.
pub fn text_width(text: &str, scale: usize) -> usize {
    text.chars().count() * 8 * scale
}

/// Draws `text` with its top-left corner at `(y, x)`, clipping at the border.
pub fn draw_text(img: &mut RgbImage, y: usize, x: usize, text: &str, color: [f64; 3], scale: usize) {
    let (h, w) = (img.height(), img.width());
    for (k, ch) in text.chars().enumerate() {
        let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).expect("font has '?'");
        for (gy, row) in glyph.iter().enumerate() {
            for gx in 0..8 {
                if row >> gx & 1 == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let (py, px) = (y + gy * scale + sy, x + (k * 8 + gx) * scale + sx);
                        if py < h && px < w {
                            img.set_pixel(py, px, color);
                        }
                    }
                }
            }
        }
    }
}

/// Fills a rectangle, clipped to the image.
pub fn fill_rect(img: &mut RgbImage, y: usize, x: usize, h: usize, w: usize, color: [f64; 3]) {
    for py in y..(y + h).min(img.height()) {
        for px in x..(x + w).min(img.width()) {
            img.set_pixel(py, px, color);
        }
    }
}

/// Row-major grid of `tile`-sided tiles; every row must have the same length.
pub fn tile_grid(rows: &[Vec<RgbImage>], tile: usize) -> Result<RgbImage> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("grid rows must be non-empty and equally long".into()));
    }
    let mut canvas = RgbImage::constant(rows.len() * tile, cols * tile, WHITE, ValueRange::Unit)?;
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let img = img.to_unit();
            let t = if img.height() == tile && img.width() == tile { img } else { img.resize(tile, tile, Filter::Area) };
            canvas.paste(&t, r * tile, c * tile)?;
        }
    }
    Ok(canvas)
}

/// Prepends a white strip of width `strip` with one label per block of
/// `rows_per_block` tile rows.
pub fn annotate_rows(grid: &RgbImage, tile: usize, labels: &[String], rows_per_block: usize, strip: usize) -> Result<RgbImage> {
    let mut out = RgbImage::constant(grid.height(), grid.width() + strip, WHITE, ValueRange::Unit)?;
    out.paste(&grid.to_unit(), 0, strip)?;
    for (b, label) in labels.iter().enumerate() {
        let y = b * rows_per_block * tile + 2;
        draw_text(&mut out, y, 2, label, BLACK, 1);
    }
    Ok(out)
}

fn line(img: &mut RgbImage, (y0, x0): (f64, f64), (y1, x1): (f64, f64), color: [f64; 3]) {
    let n = ((y1 - y0).abs().max((x1 - x0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (y, x) = (y0 + t * (y1 - y0), x0 + t * (x1 - x0));
        if y >= 0.0 && x >= 0.0 && (y as usize) < img.height() && (x as usize) < img.width() {
            img.set_pixel(y as usize, x as usize, color);
        }
    }
}

const MARGIN_L: usize = 64;
const MARGIN_B: usize = 24;
const MARGIN_T: usize = 12;

fn axes(img: &mut RgbImage) -> (usize, usize, usize, usize) {
    let (h, w) = (img.height(), img.width());
    let (top, bottom, left, right) = (MARGIN_T, h - MARGIN_B, MARGIN_L, w - 8);
    line(img, (top as f64, left as f64), (bottom as f64, left as f64), BLACK);
    line(img, (bottom as f64, left as f64), (bottom as f64, right as f64), BLACK);
    (top, bottom, left, right)
}

/// Line plot of named `(x, y)` series with a log-scaled y axis when `log_y`.
pub fn line_plot(series: &[(String, Vec<(f64, f64)>)], width: usize, height: usize, log_y: bool) -> Result<RgbImage> {
    let mut img = RgbImage::constant(height, width, WHITE, ValueRange::Unit)?;
    if width < MARGIN_L + 32 || height < MARGIN_B + MARGIN_T + 16 {
        return Err(Error::Shape("plot too small".into()));
    }
    let tf = |v: f64| if log_y { v.max(1e-12).log10() } else { v };
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().map(|&(x, y)| (x, tf(y)))).filter(|p| p.1.is_finite()).collect();
    let (top, bottom, left, right) = axes(&mut img);
    if pts.is_empty() {
        return Ok(img);
    }
    let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (ymin, ymax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let (xr, yr) = ((xmax - xmin).max(1e-12), (ymax - ymin).max(1e-12));
    let map = |x: f64, y: f64| {
        (bottom as f64 - (y - ymin) / yr * (bottom - top) as f64, left as f64 + (x - xmin) / xr * (right - left) as f64)
    };
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let p: Vec<(f64, f64)> = s.iter().map(|&(x, y)| (x, tf(y))).filter(|p| p.1.is_finite()).collect();
        for w in p.windows(2) {
            line(&mut img, map(w[0].0, w[0].1), map(w[1].0, w[1].1), color);
        }
        draw_text(&mut img, top + 2 + i * 10, right.saturating_sub(text_width(name, 1) + 2), name, color, 1);
    }
    let fmt = |v: f64| if log_y { format!("1e{v:.1}") } else { format!("{v:.3}") };
    draw_text(&mut img, top, 2, &fmt(ymax), BLACK, 1);
    draw_text(&mut img, bottom - 8, 2, &fmt(ymin), BLACK, 1);
    draw_text(&mut img, bottom + 6, left, &format!("{xmin}"), BLACK, 1);
    let xl = format!("{xmax}");
    draw_text(&mut img, bottom + 6, right.saturating_sub(text_width(&xl, 1)), &xl, BLACK, 1);
    Ok(img)
}

/// Vertical bar chart of labelled non-negative values.
pub fn bar_plot(bars: &[(String, f64)], width: usize, height: usize, y_max: Option<f64>) -> Result<RgbImage> {
    let mut img = RgbImage::constant(height, width, WHITE, ValueRange::Unit)?;
    if bars.is_empty() || width < MARGIN_L + 16 * bars.len() || height < MARGIN_B + MARGIN_T + 16 {
        return Err(Error::Shape("bar plot too small for the number of bars".into()));
    }
    let (top, bottom, left, right) = axes(&mut img);
    let vmax = y_max.unwrap_or_else(|| bars.iter().map(|b| b.1).fold(0.0, f64::max)).max(1e-12);
    let slot = (right - left) / bars.len();
    for (i, (label, v)) in bars.iter().enumerate() {
        let bh = ((v / vmax).clamp(0.0, 1.0) * (bottom - top) as f64).round() as usize;
        let x = left + i * slot + slot / 6;
        fill_rect(&mut img, bottom - bh, x, bh, (slot * 2 / 3).max(1), PALETTE[i % PALETTE.len()]);
        let short: String = label.chars().take(slot / 8).collect();
        draw_text(&mut img, bottom + 6, left + i * slot, &short, BLACK, 1);
        let val = format!("{v:.2}");
        draw_text(&mut img, (bottom - bh).saturating_sub(10).max(top), x, &val, BLACK, 1);
    }
    draw_text(&mut img, top, 2, &format!("{vmax:.2}"), BLACK, 1);
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_marks_pixels_inside_its_box_only() {
        let mut img = RgbImage::constant(20, 40, WHITE, ValueRange::Unit).unwrap();
        draw_text(&mut img, 2, 3, "HER2", BLACK, 1);
        let mut inside = 0;
        for y in 0..20 {
            for x in 0..40 {
                let dark = img.pixel(y, x) == BLACK;
                let in_box = (2..10).contains(&y) && (3..35).contains(&x);
                assert!(!dark || in_box);
                inside += dark as usize;
            }
        }
        assert!(inside > 20);
    }

    #[test]
    fn grid_has_tile_layout() {
        let a = RgbImage::constant(4, 4, BLACK, ValueRange::Unit).unwrap();
        let rows = vec![vec![a.clone(), a.clone(), a.clone()]; 2];
        let g = tile_grid(&rows, 4).unwrap();
        assert_eq!((g.height(), g.width()), (8, 12));
        assert!(tile_grid(&[vec![a.clone()], vec![]], 4).is_err());
    }

    #[test]
    fn plots_render() {
        let s = vec![("l1".to_string(), (0..50).map(|i| (i as f64, 1.0 / (1.0 + i as f64))).collect())];
        let img = line_plot(&s, 320, 200, true).unwrap();
        assert!(img.data().iter().any(|&v| v < 1.0));
        let b = bar_plot(&[("a".into(), 0.2), ("b".into(), 0.7)], 200, 120, Some(1.0)).unwrap();
        assert_eq!((b.height(), b.width()), (120, 200));
    }
}
