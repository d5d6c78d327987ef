//! Optimisation loop, checkpointing, evaluation and ablation runs.

pub mod ablation;
pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod run;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{FobaError, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::MetricReport;
use crate::model::FoBaModel;
use crate::nn::{Graph, ParamStore, Tensor};
use crate::types::{validate_sample, BiTemporalSample, LabelMap};

pub use ablation::{run_ablation, AblationEntry, AblationRow, AblationTable};
pub use checkpoint::Checkpoint;
pub use eval::{evaluate, evaluate_oracle, evaluate_rasters, write_predictions, EvalOutput, MaskMonitor};
pub use optim::AdamW;
pub use run::RunDir;

/// One optimiser step as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub batch: Vec<String>,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps: usize,
    /// Set when the target scores were reached before `max_steps`.
    pub early_stop_step: Option<usize>,
    /// `(step, train-set report)` for every periodic evaluation.
    pub evals: Vec<(usize, MetricReport)>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: FoBaModel,
    pub store: ParamStore<f32>,
    pub opt: AdamW,
    rng: ChaCha8Rng,
    /// Steps completed.
    pub step: usize,
    pub history: Vec<StepRecord>,
    pub monitor: MaskMonitor,
}

fn flip_tensor(t: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let (c, h, w) = t.dims3();
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).expect("same shape")
}

fn flip_labels(m: &LabelMap, horizontal: bool) -> LabelMap {
    let (h, w) = (m.height(), m.width());
    let mut out = LabelMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            out.set(y, x, m.get(sy, sx));
        }
    }
    out
}

/// Mirrors every raster of a sample.
pub fn flip_sample(s: &BiTemporalSample, horizontal: bool) -> BiTemporalSample {
    BiTemporalSample {
        id: s.id.clone(),
        image_t1: flip_tensor(&s.image_t1, horizontal),
        image_t2: flip_tensor(&s.image_t2, horizontal),
        sem_t1: flip_labels(&s.sem_t1, horizontal),
        sem_t2: flip_labels(&s.sem_t2, horizontal),
        change_mask: flip_labels(&s.change_mask, horizontal),
    }
}

impl Trainer {
    /// Fresh model and optimiser; the batch RNG is seeded from `cfg.train.seed`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = FoBaModel::new(&cfg.model, &mut store)?;
        let opt = AdamW::new(&cfg.train, &store);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.train.seed),
            cfg,
            model,
            store,
            opt,
            step: 0,
            history: Vec::new(),
            monitor: MaskMonitor::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            rng: self.rng.clone(),
            opt_t: self.opt.t,
            history: self.history.clone(),
            params: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            m: self.opt.first_moments().to_vec(),
            v: self.opt.second_moments().to_vec(),
        }
    }

    /// Rebuilds the trainer state stored in `ck`.
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config)?;
        if ck.params.len() != t.store.len() {
            return Err(FobaError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                ck.params.len(),
                t.store.len()
            )));
        }
        let ids: Vec<_> = t.store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(ck.params) {
            let p = t.store.get_mut(id);
            if p.name != name || p.value.shape() != value.shape() {
                return Err(FobaError::Checkpoint(format!(
                    "tensor {} {:?} does not match model parameter {} {:?}",
                    name,
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        t.opt.set_state(ck.opt_t, ck.m, ck.v, &t.store)?;
        t.rng = ck.rng;
        t.step = ck.step;
        t.history = ck.history;
        Ok(t)
    }

    fn draw_batch(&mut self, corpus: &[BiTemporalSample]) -> Vec<BiTemporalSample> {
        let k = self.cfg.train.batch_size.min(corpus.len());
        let idx = sample(&mut self.rng, corpus.len(), k).into_vec();
        idx.into_iter()
            .map(|i| {
                let mut s = corpus[i].clone();
                if self.cfg.train.augment_flips {
                    if self.rng.random_bool(0.5) {
                        s = flip_sample(&s, true);
                    }
                    if self.rng.random_bool(0.5) {
                        s = flip_sample(&s, false);
                    }
                }
                s
            })
            .collect()
    }

    /// One optimiser step on a random mini-batch of `corpus`.
    pub fn train_step(&mut self, corpus: &[BiTemporalSample]) -> Result<&StepRecord> {
        if corpus.is_empty() {
            return Err(FobaError::EmptySplit("training corpus is empty".into()));
        }
        let batch = self.draw_batch(corpus);
        let refs: Vec<&BiTemporalSample> = batch.iter().collect();
        let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
        let step = self.step + 1;
        let (x1, x2) = eval::stack_images(&refs)?;
        let mut g = Graph::with_params(&self.store);
        let (v1, v2) = (g.constant(x1), g.constant(x2));
        let out = self.model.forward(&mut g, v1, v2)?;
        self.monitor.observe_masks(&g, &out.stage_masks);
        let model_cfg = &self.cfg.model;
        let terms = total_loss(&mut g, &out, &refs, &model_cfg.loss_weights, model_cfg.consistency_loss_enabled)?;
        if !terms.breakdown.is_finite() {
            log::error!("non-finite loss at step {}: {:?} on batch {:?}", step, terms.breakdown, ids);
            return Err(FobaError::NonFiniteLoss { step, batch: ids });
        }
        let grads = g.backward(terms.total)?;
        let mut flat = Vec::with_capacity(self.store.len());
        for (id, p) in self.store.iter() {
            let grad = if p.trainable { grads.param(id).cloned() } else { None };
            if grad.as_ref().is_some_and(|t| !t.all_finite()) {
                return Err(FobaError::NonFiniteGradient(p.name.clone()));
            }
            flat.push(grad);
        }
        drop(grads);
        drop(g);
        self.opt.step(&mut self.store, &flat)?;
        self.step = step;
        self.history.push(StepRecord {
            step,
            batch: ids,
            loss: terms.breakdown,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    fn targets_met(&self, r: &MetricReport) -> bool {
        let t = &self.cfg.train;
        if t.target_miou.is_none() && t.target_sek.is_none() {
            return false;
        }
        let ok = |target: Option<f64>, got: Option<f64>| target.is_none_or(|v| got.is_some_and(|g| g >= v));
        ok(t.target_miou, r.miou) && ok(t.target_sek, r.sek)
    }

    /// Trains until `max_steps` or until the targets are met on the training
    /// set. With a run directory, writes periodic checkpoints and the loss log.
    pub fn fit(&mut self, corpus: &[BiTemporalSample], run: Option<&RunDir>) -> Result<TrainSummary> {
        if corpus.is_empty() {
            return Err(FobaError::EmptySplit("training corpus is empty".into()));
        }
        for s in corpus {
            validate_sample(s, self.cfg.model.n_classes)?;
        }
        let mut summary = TrainSummary::default();
        let train = self.cfg.train.clone();
        while self.step < train.max_steps {
            let rec = self.train_step(corpus)?;
            if rec.step % 50 == 0 || rec.step == 1 {
                log::info!("step {} total {:.5}", rec.step, rec.loss.total);
            }
            if let Some(run) = run {
                if train.checkpoint_every > 0 && self.step.is_multiple_of(train.checkpoint_every) {
                    self.checkpoint().save(&run.step_checkpoint_path(self.step))?;
                    run.write_loss_log(&self.history)?;
                }
            }
            if train.eval_every > 0 && self.step.is_multiple_of(train.eval_every) {
                let out = evaluate(&self.model, &self.store, corpus, Some(&mut self.monitor))?;
                log::info!(
                    "step {} train mIoU {} SeK {}",
                    self.step,
                    crate::metrics::format_score(out.report.miou),
                    crate::metrics::format_score(out.report.sek)
                );
                summary.evals.push((self.step, out.report));
                if self.targets_met(&out.report) {
                    summary.early_stop_step = Some(self.step);
                    break;
                }
            }
        }
        summary.steps = self.step;
        if let Some(run) = run {
            self.checkpoint().save(&run.checkpoint_path())?;
            run.write_loss_log(&self.history)?;
            run.write_monitor(&self.monitor)?;
        }
        Ok(summary)
    }

    pub fn evaluate(&mut self, samples: &[BiTemporalSample]) -> Result<EvalOutput> {
        evaluate(&self.model, &self.store, samples, Some(&mut self.monitor))
    }
}
