//! Minimal chart and heat-map rendering for batch runs: PNG line charts of
//! scalar series and grayscale per-pixel error maps (white = no error).

use std::path::Path;

use crate::data::save_image;
use crate::error::{Result, SkError};
use crate::flow::FlowField;

pub const SERIES_COLORS: [[u8; 3]; 4] = [[202, 51, 51], [38, 90, 166], [36, 140, 66], [160, 100, 30]];

/// One named curve of (x, y) points.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [(f64, f64)],
}

fn draw_line(img: &mut image::RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

/// Render the series into a fixed-size chart: light gridlines, dark axes,
/// one palette color per curve (in order). Axis ranges cover all points.
pub fn line_chart(series: &[Series], width: u32, height: u32) -> Result<image::RgbImage> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(SkError::Invalid("chart needs at least one non-empty series".into()));
    }
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        if !x.is_finite() || !y.is_finite() {
            return Err(SkError::Invalid("chart data contains non-finite values".into()));
        }
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }

    let margin = 40.0;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let px = |x: f64| margin + (x - x_min) / (x_max - x_min) * (width as f64 - 2.0 * margin);
    let py = |y: f64| (height as f64 - margin) - (y - y_min) / (y_max - y_min) * (height as f64 - 2.0 * margin);

    for i in 0..=10 {
        let gx = margin + i as f64 / 10.0 * (width as f64 - 2.0 * margin);
        let gy = margin + i as f64 / 10.0 * (height as f64 - 2.0 * margin);
        draw_line(&mut img, gx, margin, gx, height as f64 - margin, [230, 230, 230]);
        draw_line(&mut img, margin, gy, width as f64 - margin, gy, [230, 230, 230]);
    }
    draw_line(&mut img, margin, margin, margin, height as f64 - margin, [40, 40, 40]);
    draw_line(&mut img, margin, height as f64 - margin, width as f64 - margin, height as f64 - margin, [40, 40, 40]);

    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        for w in s.points.windows(2) {
            draw_line(&mut img, px(w[0].0), py(w[0].1), px(w[1].0), py(w[1].1), color);
        }
    }
    Ok(img)
}

/// Chart plus a sidecar `.legend.txt` mapping palette order to series names.
pub fn save_chart(series: &[Series], width: u32, height: u32, path: &Path) -> Result<()> {
    let img = line_chart(series, width, height)?;
    save_image(&img, path)?;
    let legend: String = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = SERIES_COLORS[i % SERIES_COLORS.len()];
            format!("{} = rgb({},{},{})\n", s.name, c[0], c[1], c[2])
        })
        .collect();
    let lpath = path.with_extension("legend.txt");
    std::fs::write(&lpath, legend).map_err(|e| SkError::io(lpath.display().to_string(), e))
}

/// Per-pixel end-point error as grayscale: white is zero error, black is
/// `max` (the field's maximum error when None).
pub fn epe_heatmap(pred: &FlowField, gt: &FlowField, max: Option<f64>) -> Result<image::RgbImage> {
    if pred.w != gt.w || pred.h != gt.h {
        return Err(SkError::Invalid(format!(
            "error map needs matching fields, got {}x{} vs {}x{}",
            pred.w, pred.h, gt.w, gt.h
        )));
    }
    let err_at = |i: usize| {
        let du = pred.u[i] - gt.u[i];
        let dv = pred.v[i] - gt.v[i];
        (du * du + dv * dv).sqrt()
    };
    let norm = max
        .unwrap_or_else(|| (0..pred.u.len()).map(err_at).fold(0.0f64, f64::max))
        .max(1e-12);
    let mut img = image::RgbImage::new(pred.w as u32, pred.h as u32);
    for y in 0..pred.h {
        for x in 0..pred.w {
            let e = (err_at(y * pred.w + x) / norm).clamp(0.0, 1.0);
            let g = ((1.0 - e) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([g, g, g]));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;

    #[test]
    fn chart_has_requested_size_and_draws_curves() {
        let pts: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect();
        let img = line_chart(&[Series { name: "loss", points: &pts }], 320, 240).unwrap();
        assert_eq!((img.width(), img.height()), (320, 240));
        let painted = img.pixels().filter(|p| p.0 == SERIES_COLORS[0]).count();
        assert!(painted > 50, "only {painted} curve pixels");
    }

    #[test]
    fn empty_chart_rejected() {
        assert!(line_chart(&[], 100, 100).is_err());
        assert!(line_chart(&[Series { name: "x", points: &[] }], 100, 100).is_err());
    }

    #[test]
    fn chart_and_legend_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.png");
        let pts = [(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)];
        save_chart(&[Series { name: "train_loss", points: &pts }], 200, 150, &path).unwrap();
        assert!(path.exists());
        let legend = std::fs::read_to_string(dir.path().join("loss.legend.txt")).unwrap();
        assert!(legend.contains("train_loss"));
    }

    #[test]
    fn perfect_prediction_renders_white() {
        let f = FlowField::constant(6, 4, 1.0, -2.0, Resolution::Full);
        let img = epe_heatmap(&f, &f, None).unwrap();
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn larger_error_is_darker() {
        let gt = FlowField::zeros(2, 1, Resolution::Full);
        let p = FlowField::new(2, 1, vec![1.0, 4.0], vec![0.0, 0.0], Resolution::Full).unwrap();
        let img = epe_heatmap(&p, &gt, None).unwrap();
        let a = img.get_pixel(0, 0).0[0];
        let b = img.get_pixel(1, 0).0[0];
        assert!(b < a, "{b} !< {a}");
        assert_eq!(b, 0);
    }
}
