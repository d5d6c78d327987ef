//! Run directory: manifest, loss log and curve, checkpoints, metric
//! reports, monitor counts, mask snapshots and prediction rasters.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{FobaError, Result};
use crate::metrics::MetricReport;
use crate::model::FoBaModel;
use crate::nn::{Graph, ParamStore};
use crate::trainer::{MaskMonitor, StepRecord};
use crate::types::BiTemporalSample;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_PLOT: &str = "loss_curve.png";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MONITOR_FILE: &str = "mask_monitor.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const MASKS_DIR: &str = "masks";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| FobaError::io(path, e))
}

impl RunDir {
    /// Creates the directory and writes the manifest for `cfg`.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| FobaError::io(root, e))?;
        let manifest = json!({
            "config": cfg,
            "config_hash": cfg.hash(),
            "version": env!("CARGO_PKG_VERSION"),
        });
        write(&root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(Self { root: root.to_path_buf() })
    }

    /// Opens an existing run and returns its configuration after checking
    /// the recorded hash.
    pub fn open(root: &Path) -> Result<(Self, RunConfig)> {
        let cfg = read_manifest(root)?;
        Ok((Self { root: root.to_path_buf() }, cfg))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn step_checkpoint_path(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{:06}.bin", step))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join(PREDICTIONS_DIR)
    }

    /// Rewrites the loss CSV and the loss curve from the full history.
    pub fn write_loss_log(&self, history: &[StepRecord]) -> Result<()> {
        write(&self.root.join(LOSS_CSV), loss_csv(history))?;
        let path = self.root.join(LOSS_PLOT);
        plot_losses(history).save(&path).map_err(|e| FobaError::Image {
            path: path.clone(),
            message: e.to_string(),
        })
    }

    /// `<name>.txt` and `<name>.json`.
    pub fn write_report(&self, name: &str, report: &MetricReport) -> Result<()> {
        write(&self.root.join(format!("{}.txt", name)), report.to_text())?;
        write(
            &self.root.join(format!("{}.json", name)),
            serde_json::to_string_pretty(&report.to_json())?,
        )
    }

    pub fn write_monitor(&self, monitor: &MaskMonitor) -> Result<()> {
        write(&self.root.join(MONITOR_FILE), serde_json::to_string_pretty(monitor)?)
    }

    /// Greyscale `m_c` of every decoder stage for one sample, upsampled to
    /// the input size, as `masks/<id>_stage<k>.png`.
    pub fn write_mask_snapshots(&self, model: &FoBaModel, store: &ParamStore<f32>, sample: &BiTemporalSample) -> Result<()> {
        let dir = self.root.join(MASKS_DIR);
        fs::create_dir_all(&dir).map_err(|e| FobaError::io(&dir, e))?;
        for (k, img) in mask_snapshots(model, store, sample)?.into_iter().enumerate() {
            let path = dir.join(format!("{}_stage{}.png", sample.id, k));
            img.save(&path).map_err(|e| FobaError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Reads `manifest.json` and verifies that the stored hash matches the stored config.
pub fn read_manifest(root: &Path) -> Result<RunConfig> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FobaError::MissingFile(path.clone()),
        _ => FobaError::io(&path, e),
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let cfg = RunConfig::from_value(v["config"].clone())?;
    if v["config_hash"].as_str() != Some(cfg.hash().as_str()) {
        return Err(FobaError::config("manifest.config_hash", "does not match the recorded config"));
    }
    Ok(cfg)
}

pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,l_bcd,l_scd,l_sample,l_f,l_cons,total\n");
    for r in history {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, l.l_bcd, l.l_scd, l.l_sample, l.l_f, l.l_cons, l.total
        ));
    }
    out
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
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

/// Loss components against step on a log10 axis. Total in black.
pub fn plot_losses(history: &[StepRecord]) -> RgbImage {
    const W: u32 = 640;
    const H: u32 = 400;
    const M: i64 = 40;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([120, 120, 120]);
    let (x_lo, x_hi, y_lo, y_hi) = (M, W as i64 - M / 2, M / 2, H as i64 - M);
    draw_line(&mut img, (x_lo, y_hi), (x_hi, y_hi), axis);
    draw_line(&mut img, (x_lo, y_lo), (x_lo, y_hi), axis);
    let series: [(fn(&StepRecord) -> f64, Rgb<u8>); 6] = [
        (|r| r.loss.total, Rgb([0, 0, 0])),
        (|r| r.loss.l_bcd, Rgb([214, 39, 40])),
        (|r| r.loss.l_scd, Rgb([31, 119, 180])),
        (|r| r.loss.l_sample, Rgb([44, 160, 44])),
        (|r| r.loss.l_f, Rgb([255, 127, 14])),
        (|r| r.loss.l_cons, Rgb([148, 103, 189])),
    ];
    let logs: Vec<f64> = history
        .iter()
        .flat_map(|r| series.iter().map(move |(f, _)| f(r)))
        .filter(|v| *v > 0.0 && v.is_finite())
        .map(f64::log10)
        .collect();
    if history.is_empty() || logs.is_empty() {
        return img;
    }
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-6);
    let n = history.len().max(2) - 1;
    let px = |i: usize| x_lo + ((x_hi - x_lo) as f64 * i as f64 / n as f64).round() as i64;
    let py = |v: f64| y_hi - ((y_hi - y_lo) as f64 * (v.log10() - lo) / (hi - lo)).round() as i64;
    for (f, color) in series {
        let mut prev: Option<(i64, i64)> = None;
        for (i, r) in history.iter().enumerate() {
            let v = f(r);
            if !(v > 0.0 && v.is_finite()) {
                prev = None;
                continue;
            }
            let p = (px(i), py(v));
            draw_line(&mut img, prev.unwrap_or(p), p, color);
            prev = Some(p);
        }
    }
    img
}

/// One greyscale image per stage mask of the sample, nearest-upsampled to the input size.
pub fn mask_snapshots(model: &FoBaModel, store: &ParamStore<f32>, sample: &BiTemporalSample) -> Result<Vec<GrayImage>> {
    let mut g = Graph::with_params(store);
    let shape = |t: &crate::nn::Tensor<f32>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        s
    };
    let x1 = g.constant(sample.image_t1.clone().reshaped(&shape(&sample.image_t1))?);
    let x2 = g.constant(sample.image_t2.clone().reshaped(&shape(&sample.image_t2))?);
    let out = model.forward(&mut g, x1, x2)?;
    let (h, w) = (sample.height(), sample.width());
    Ok(out
        .stage_masks
        .iter()
        .map(|m| {
            let t = g.value(m.m_c);
            let (_, _, mh, mw) = t.dims4();
            GrayImage::from_fn(w as u32, h as u32, |x, y| {
                let (sy, sx) = (y as usize * mh / h, x as usize * mw / w);
                image::Luma([(t.data()[sy * mw + sx].clamp(0.0, 1.0) * 255.0).round() as u8])
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    fn record(step: usize, total: f64) -> StepRecord {
        StepRecord {
            step,
            batch: vec![],
            loss: LossBreakdown {
                total,
                l_bcd: total / 2.0,
                ..LossBreakdown::default()
            },
        }
    }

    #[test]
    fn manifest_echoes_and_verifies_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.model.fbg_dim = 16;
        RunDir::create(dir.path(), &cfg).unwrap();
        let (_, back) = RunDir::open(dir.path()).unwrap();
        assert_eq!(back, cfg);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["config"]["train"]["lr"], 1e-4);
        assert_eq!(v["config"]["train"]["weight_decay"], 5e-4);
        let tampered = text.replace("\"fbg_dim\": 16", "\"fbg_dim\": 8");
        fs::write(dir.path().join(MANIFEST_FILE), tampered).unwrap();
        assert!(matches!(RunDir::open(dir.path()), Err(FobaError::Config { .. })));
    }

    #[test]
    fn loss_csv_has_one_row_per_step() {
        let csv = loss_csv(&[record(1, 2.0), record(2, 1.5)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "2,0.75,0,0,0,0,1.5");
    }

    #[test]
    fn plot_draws_something() {
        let img = plot_losses(&[record(1, 2.0), record(2, 1.0), record(3, 0.5)]);
        assert!(img.pixels().any(|p| p.0 == [0, 0, 0]));
        assert_eq!(plot_losses(&[]).dimensions(), (640, 400));
    }
}
