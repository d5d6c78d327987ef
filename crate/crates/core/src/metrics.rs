//! Semantic change detection scores from an `(N+1) x (N+1)` confusion matrix.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{FobaError, Result};
use crate::types::{ConfusionMatrix, LabelMap};

/// Adds the pixel pairs of one prediction/ground-truth pair to `cm`.
pub fn accumulate(cm: &mut ConfusionMatrix, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(FobaError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let k = cm.n_classes();
    for (which, map) in [("prediction", pred), ("ground truth", gt)] {
        let max = map.max_label() as usize;
        if max >= k {
            return Err(FobaError::LabelOutOfRange {
                label: max,
                max: k - 1,
                context: which.to_string(),
            });
        }
    }
    let mut local = vec![0u64; k * k];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        local[p as usize * k + g as usize] += 1;
    }
    for (i, &n) in local.iter().enumerate() {
        if n > 0 {
            cm.add_count(i / k, i % k, n);
        }
    }
    Ok(())
}

fn ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den <= 0.0 {
        return Err(FobaError::DegenerateMetric(format!("{} has a zero denominator", what)));
    }
    Ok(num / den)
}

fn q(cm: &ConfusionMatrix, i: usize, j: usize) -> f64 {
    cm.get(i, j) as f64
}

/// IoU of the unchanged class.
pub fn iou_nc(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.n_classes();
    let row0: f64 = (0..k).map(|j| q(cm, 0, j)).sum();
    let col0: f64 = (0..k).map(|i| q(cm, i, 0)).sum();
    let q00 = q(cm, 0, 0);
    ratio(q00, row0 + col0 - q00, "IoU_nc")
}

/// IoU of "changed" regardless of class.
pub fn iou_c(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.n_classes();
    let changed: f64 = (1..k).flat_map(|i| (1..k).map(move |j| (i, j))).map(|(i, j)| q(cm, i, j)).sum();
    ratio(changed, cm.total() as f64 - q(cm, 0, 0), "IoU_c")
}

/// `(IoU_nc, IoU_c, mIoU)`
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, f64, f64)> {
    let nc = iou_nc(cm)?;
    let c = iou_c(cm)?;
    Ok((nc, c, 0.5 * (nc + c)))
}

/// Overall accuracy.
pub fn oa(cm: &ConfusionMatrix) -> Result<f64> {
    let trace: f64 = (0..cm.n_classes()).map(|i| q(cm, i, i)).sum();
    ratio(trace, cm.total() as f64, "OA")
}

/// Separated kappa: kappa over the matrix with the unchanged/unchanged
/// cell removed, scaled by `exp(IoU_c - 1)`.
pub fn sek(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.n_classes();
    let qh = |i: usize, j: usize| if i == 0 && j == 0 { 0.0 } else { q(cm, i, j) };
    let total: f64 = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| qh(i, j)).sum();
    if total <= 0.0 {
        return Err(FobaError::DegenerateMetric("SeK: no pixels outside the unchanged/unchanged cell".into()));
    }
    let rho = (1..k).map(|i| qh(i, i)).sum::<f64>() / total;
    let eta = (1..k)
        .map(|i| {
            let row: f64 = (0..k).map(|j| qh(i, j)).sum();
            let col: f64 = (0..k).map(|j| qh(j, i)).sum();
            row * col
        })
        .sum::<f64>()
        / (total * total);
    if 1.0 - eta < 1e-12 {
        return Err(FobaError::DegenerateMetric("SeK: chance agreement is 1".into()));
    }
    let c = iou_c(cm)?;
    Ok((c - 1.0).exp() * (rho - eta) / (1.0 - eta))
}

fn change_counts(cm: &ConfusionMatrix) -> (f64, f64, f64) {
    let k = cm.n_classes();
    let hits: f64 = (1..k).map(|i| q(cm, i, i)).sum();
    let predicted: f64 = (1..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| q(cm, i, j)).sum();
    let actual: f64 = (0..k).flat_map(|i| (1..k).map(move |j| (i, j))).map(|(i, j)| q(cm, i, j)).sum();
    (hits, predicted, actual)
}

/// Precision over pixels predicted as changed.
pub fn p_scd(cm: &ConfusionMatrix) -> Result<f64> {
    let (hits, predicted, _) = change_counts(cm);
    ratio(hits, predicted, "P_scd")
}

/// Recall over pixels that changed.
pub fn r_scd(cm: &ConfusionMatrix) -> Result<f64> {
    let (hits, _, actual) = change_counts(cm);
    ratio(hits, actual, "R_scd")
}

/// Harmonic mean of `P_scd` and `R_scd`. With no matched change pixel it is
/// 0 as soon as either side has mass, since the defined factor is then 0.
pub fn f_scd(cm: &ConfusionMatrix) -> Result<f64> {
    let (hits, predicted, actual) = change_counts(cm);
    if hits == 0.0 && (predicted > 0.0 || actual > 0.0) {
        return Ok(0.0);
    }
    let p = p_scd(cm)?;
    let r = r_scd(cm)?;
    Ok(2.0 * p * r / (p + r))
}

/// All scores; `None` where a score is undefined for the matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: Option<f64>,
    pub iou_nc: Option<f64>,
    pub iou_c: Option<f64>,
    pub oa: Option<f64>,
    pub sek: Option<f64>,
    pub f_scd: Option<f64>,
    pub p_scd: Option<f64>,
    pub r_scd: Option<f64>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let nc = iou_nc(cm).ok();
        let c = iou_c(cm).ok();
        Self {
            miou: nc.zip(c).map(|(a, b)| 0.5 * (a + b)),
            iou_nc: nc,
            iou_c: c,
            oa: oa(cm).ok(),
            sek: sek(cm).ok(),
            f_scd: f_scd(cm).ok(),
            p_scd: p_scd(cm).ok(),
            r_scd: r_scd(cm).ok(),
        }
    }

    /// `(name, value)` pairs in display order.
    pub fn entries(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("miou", self.miou),
            ("iou_nc", self.iou_nc),
            ("iou_c", self.iou_c),
            ("oa", self.oa),
            ("sek", self.sek),
            ("f_scd", self.f_scd),
            ("p_scd", self.p_scd),
            ("r_scd", self.r_scd),
        ]
    }

    /// `key = value` lines, four decimals, `n/a` for undefined scores.
    pub fn to_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{} = {}\n", k, format_score(*v)))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map = self
            .entries()
            .iter()
            .map(|(k, v)| {
                let val = match v {
                    Some(x) => serde_json::json!((x * 1e4).round() / 1e4),
                    None => serde_json::Value::String("n/a".into()),
                };
                (k.to_string(), val)
            })
            .collect();
        serde_json::Value::Object(map)
    }
}

pub fn format_score(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}", x),
        None => "n/a".to_string(),
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
