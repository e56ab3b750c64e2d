//! PNG plots: training curves and per-layer mask heatmaps.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::network::model::Network;
use crate::{Error, Result};

use super::metrics::MetricsLog;

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 24;

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn series(img: &mut RgbImage, values: &[f64], max: f64, c: Rgb<u8>) {
    let n = values.len();
    let span_x = (W - 2 * MARGIN) as f64;
    let span_y = (H - 2 * MARGIN) as f64;
    let at = |i: usize, v: f64| {
        let x = MARGIN as f64 + if n > 1 { span_x * i as f64 / (n - 1) as f64 } else { 0.0 };
        let y = (H - MARGIN) as f64 - span_y * (v / max).clamp(0.0, 1.0);
        (x, y)
    };
    for i in 1..n {
        line(img, at(i - 1, values[i - 1]), at(i, values[i]), c);
    }
    if n == 1 {
        let (x, y) = at(0, values[0]);
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Loss (red, scaled to its maximum) and train/test accuracy (blue/green,
/// on [0, 1]) against epoch.
pub fn loss_curve(metrics: &MetricsLog) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    line(
        &mut img,
        (MARGIN as f64, MARGIN as f64),
        (MARGIN as f64, (H - MARGIN) as f64),
        axis,
    );
    line(
        &mut img,
        (MARGIN as f64, (H - MARGIN) as f64),
        ((W - MARGIN) as f64, (H - MARGIN) as f64),
        axis,
    );
    let rows = metrics.rows();
    if rows.is_empty() {
        return img;
    }
    let loss: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let max_loss = loss.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    series(&mut img, &loss, max_loss, Rgb([200, 30, 30]));
    series(
        &mut img,
        &rows.iter().map(|r| r.train_acc).collect::<Vec<_>>(),
        1.0,
        Rgb([30, 30, 200]),
    );
    series(
        &mut img,
        &rows.iter().map(|r| r.test_acc).collect::<Vec<_>>(),
        1.0,
        Rgb([30, 160, 30]),
    );
    img
}

/// Continuous mask values of one layer, DC moved to the centre, white = 1.
pub fn mask_heatmap(values: &[crate::Real], rows: usize, cols: usize, scale: u32) -> GrayImage {
    let mut img = GrayImage::new(cols as u32 * scale, rows as u32 * scale);
    for (y, x, px) in img.enumerate_pixels_mut() {
        let (r, c) = ((y / scale) as usize, (x / scale) as usize);
        let (sr, sc) = ((r + rows / 2) % rows, (c + cols / 2) % cols);
        let v = values[sr * cols + sc].clamp(0.0, 1.0);
        *px = Luma([(v * 255.0).round() as u8]);
    }
    img
}

/// Write `loss.png` and `mask_<layer>.png` for every masked layer into
/// `dir`. Returns the written paths.
pub fn write_plots(dir: &Path, metrics: &MetricsLog, net: &Network) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut out = Vec::new();
    let p = dir.join("loss.png");
    loss_curve(metrics).save(&p)?;
    out.push(p);
    for conv in net.convs() {
        if !conv.layer.mask_trainable() {
            continue;
        }
        let m = conv.layer.mask();
        let p = dir.join(format!("mask_{}.png", conv.layer.name()));
        mask_heatmap(m.values(), m.height(), m.width(), 4).save(&p)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::EpochMetrics;

    #[test]
    fn heatmap_centres_dc() {
        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        let img = mask_heatmap(&v, 4, 4, 1);
        assert_eq!(img.get_pixel(2, 2)[0], 255);
        assert_eq!(img.get_pixel(0, 0)[0], 0);
    }

    #[test]
    fn curve_draws_series() {
        let mut m = MetricsLog::new(vec![]);
        for e in 1..=3 {
            m.push(EpochMetrics {
                epoch: e,
                loss: 3.0 / e as f64,
                train_acc: 0.3 * e as f64,
                test_acc: 0.2 * e as f64,
                mask_pct: vec![],
                seconds: 0.0,
            })
            .unwrap();
        }
        let img = loss_curve(&m);
        assert!(img.pixels().any(|p| *p == Rgb([200, 30, 30])));
        assert!(img.pixels().any(|p| *p == Rgb([30, 160, 30])));
    }
}
