//! Inference over a corpus, confusion accumulation, prediction rasters and
//! the mask-invariant monitor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_label_raster, read_mask_raster, write_label_raster, write_mask_raster, Palette};
use crate::error::{FobaError, Result};
use crate::metrics::{accumulate, MetricReport};
use crate::model::{FoBaModel, Prediction};
use crate::nn::{Graph, ParamStore, Real, Tensor};
use crate::types::{BiTemporalSample, ConfusionMatrix, MaskPair};

/// Samples per inference forward pass.
pub const EVAL_BATCH: usize = 4;

/// Counts violations of the mask and gating invariants over every observed pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMonitor {
    pub forward_passes: u64,
    pub mask_values: u64,
    /// `m_c` outside the open interval `(0, 1)` or non-finite.
    pub open_interval_violations: u64,
    /// `m_c + m_uc != 1` in the working precision.
    pub complement_violations: u64,
    pub gated_pixels: u64,
    /// Semantic label nonzero where the predicted change is 0.
    pub gating_violations: u64,
}

impl MaskMonitor {
    pub fn observe_masks<T: Real>(&mut self, g: &Graph<'_, T>, masks: &[MaskPair]) {
        self.forward_passes += 1;
        for m in masks {
            for (&c, &u) in g.value(m.m_c).data().iter().zip(g.value(m.m_uc).data()) {
                self.mask_values += 1;
                if !(c > T::zero() && c < T::one()) {
                    self.open_interval_violations += 1;
                }
                if c + u != T::one() {
                    self.complement_violations += 1;
                }
            }
        }
    }

    pub fn observe_prediction(&mut self, p: &Prediction) {
        for ((&c, &s1), &s2) in p.change.data().iter().zip(p.sem1.data()).zip(p.sem2.data()) {
            if c == 0 {
                self.gated_pixels += 1;
                if s1 != 0 || s2 != 0 {
                    self.gating_violations += 1;
                }
            }
        }
    }

    pub fn violations(&self) -> u64 {
        self.open_interval_violations + self.complement_violations + self.gating_violations
    }

    pub fn merge(&mut self, other: &MaskMonitor) {
        self.forward_passes += other.forward_passes;
        self.mask_values += other.mask_values;
        self.open_interval_violations += other.open_interval_violations;
        self.complement_violations += other.complement_violations;
        self.gated_pixels += other.gated_pixels;
        self.gating_violations += other.gating_violations;
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub confusion: ConfusionMatrix,
    /// `(sample id, prediction)` in corpus order.
    pub predictions: Vec<(String, Prediction)>,
}

/// Stacks `[C, H, W]` images of a batch into `[B, C, H, W]` tensors for both dates.
pub fn stack_images(batch: &[&BiTemporalSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let t1: Vec<Tensor<f32>> = batch.iter().map(|s| s.image_t1.clone()).collect();
    let t2: Vec<Tensor<f32>> = batch.iter().map(|s| s.image_t2.clone()).collect();
    Ok((Tensor::stack(&t1)?, Tensor::stack(&t2)?))
}

/// Adds both temporal directions of a prediction to `cm`.
pub fn accumulate_pair(cm: &mut ConfusionMatrix, p: &Prediction, s: &BiTemporalSample) -> Result<()> {
    accumulate(cm, &p.sem1, &s.sem_t1)?;
    accumulate(cm, &p.sem2, &s.sem_t2)
}

/// Runs the model over `samples` without touching its parameters.
pub fn evaluate(
    model: &FoBaModel,
    store: &ParamStore<f32>,
    samples: &[BiTemporalSample],
    mut monitor: Option<&mut MaskMonitor>,
) -> Result<EvalOutput> {
    let mut cm = ConfusionMatrix::new(model.cfg.n_classes + 1);
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&BiTemporalSample> = chunk.iter().collect();
        let (x1, x2) = stack_images(&refs)?;
        let mut g = Graph::with_params(store);
        let (v1, v2) = (g.constant(x1), g.constant(x2));
        let out = model.forward(&mut g, v1, v2)?;
        let preds = out.predict(&g, model.cfg.gate_semantics)?;
        if let Some(m) = monitor.as_deref_mut() {
            m.observe_masks(&g, &out.stage_masks);
        }
        for (p, s) in preds.into_iter().zip(chunk) {
            if let Some(m) = monitor.as_deref_mut() {
                m.observe_prediction(&p);
            }
            accumulate_pair(&mut cm, &p, s)?;
            predictions.push((s.id.clone(), p));
        }
    }
    Ok(EvalOutput {
        report: MetricReport::from_confusion(&cm),
        confusion: cm,
        predictions,
    })
}

/// Ground truth used as the prediction.
pub fn evaluate_oracle(samples: &[BiTemporalSample], n_classes: usize) -> Result<EvalOutput> {
    let mut cm = ConfusionMatrix::new(n_classes + 1);
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let p = Prediction {
            sem1: s.sem_t1.clone(),
            sem2: s.sem_t2.clone(),
            change: s.change_mask.clone(),
        };
        accumulate_pair(&mut cm, &p, s)?;
        predictions.push((s.id.clone(), p));
    }
    Ok(EvalOutput {
        report: MetricReport::from_confusion(&cm),
        confusion: cm,
        predictions,
    })
}

fn prediction_path(dir: &Path, id: &str, kind: &str) -> std::path::PathBuf {
    dir.join(format!("{}_{}.png", id, kind))
}

/// Writes `<id>_sem1.png`, `<id>_sem2.png` and `<id>_change.png` under `dir`.
pub fn write_predictions(dir: &Path, predictions: &[(String, Prediction)], palette: &Palette) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FobaError::io(dir, e))?;
    for (id, p) in predictions {
        write_label_raster(&prediction_path(dir, id, "sem1"), &p.sem1, palette)?;
        write_label_raster(&prediction_path(dir, id, "sem2"), &p.sem2, palette)?;
        write_mask_raster(&prediction_path(dir, id, "change"), &p.change)?;
    }
    Ok(())
}

pub fn read_prediction(dir: &Path, id: &str, palette: &Palette) -> Result<Prediction> {
    Ok(Prediction {
        sem1: read_label_raster(&prediction_path(dir, id, "sem1"), palette)?,
        sem2: read_label_raster(&prediction_path(dir, id, "sem2"), palette)?,
        change: read_mask_raster(&prediction_path(dir, id, "change"))?,
    })
}

/// Scores prediction rasters in `pred_dir` against the ground truth of
/// `samples`, with no model involved.
pub fn evaluate_rasters(pred_dir: &Path, samples: &[BiTemporalSample], palette: &Palette) -> Result<EvalOutput> {
    let mut cm = ConfusionMatrix::new(palette.n_classes() + 1);
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let p = read_prediction(pred_dir, &s.id, palette)?;
        accumulate_pair(&mut cm, &p, s)?;
        predictions.push((s.id.clone(), p));
    }
    Ok(EvalOutput {
        report: MetricReport::from_confusion(&cm),
        confusion: cm,
        predictions,
    })
}
