//! Training objective: change and semantic cross-entropy, Lovász-softmax on
//! the change head, per-stage mask BCE and the unchanged-region consistency
//! term.

use serde::{Deserialize, Serialize};

use crate::error::{FobaError, Result};
use crate::model::FoBaOutput;
use crate::nn::{Graph, Real, Tensor, Var};
use crate::types::{BiTemporalSample, LabelMap, LossWeights};

/// Probabilities are clamped to `[MASK_EPS, 1 - MASK_EPS]` inside the mask BCE.
pub const MASK_EPS: f64 = 1e-6;

fn check_targets<T: Real>(g: &Graph<'_, T>, x: Var, targets: &[&LabelMap], what: &str) -> Result<(usize, usize, usize, usize)> {
    let shape = g.shape(x);
    if shape.len() != 4 {
        return Err(FobaError::ShapeMismatch(format!("{}: expected [B, K, H, W], got {:?}", what, shape)));
    }
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if targets.len() != b || targets.iter().any(|t| t.height() != h || t.width() != w) {
        return Err(FobaError::ShapeMismatch(format!(
            "{}: {} targets for prediction {:?}",
            what,
            targets.len(),
            shape
        )));
    }
    Ok((b, k, h, w))
}

fn check_labels(targets: &[&LabelMap], k: usize, what: &str) -> Result<()> {
    for t in targets {
        let max = t.max_label() as usize;
        if max >= k {
            return Err(FobaError::LabelOutOfRange {
                label: max,
                max: k - 1,
                context: what.to_string(),
            });
        }
    }
    Ok(())
}

/// Mean pixel cross-entropy of `[B, K, H, W]` logits against label maps.
pub fn ce_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &[&LabelMap]) -> Result<Var> {
    let (b, k, h, w) = check_targets(g, logits, targets, "cross-entropy")?;
    check_labels(targets, k, "cross-entropy target")?;
    let hw = h * w;
    let n = T::from_usize(b * hw).unwrap();
    let x = g.value(logits).data();
    let mut probs = vec![T::zero(); x.len()];
    let mut total = T::zero();
    for bi in 0..b {
        let lab = targets[bi].data();
        for p in 0..hw {
            let at = |c: usize| (bi * k + c) * hw + p;
            let max = (0..k).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (x[at(c)] - max).exp();
                probs[at(c)] = e;
                z = z + e;
            }
            for c in 0..k {
                probs[at(c)] = probs[at(c)] / z;
            }
            total = total + (max + z.ln() - x[at(lab[p] as usize)]);
        }
    }
    let labels: Vec<Vec<u8>> = targets.iter().map(|t| t.data().to_vec()).collect();
    let shape = [b, k, h, w];
    Ok(g.push(
        Tensor::scalar(total / n),
        &[logits],
        Box::new(move |args| {
            let s = args.grad.data()[0] / n;
            let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
            for (bi, lab) in labels.iter().enumerate() {
                for (p, &c) in lab.iter().enumerate() {
                    let i = (bi * k + c as usize) * hw + p;
                    d[i] = d[i] - s;
                }
            }
            vec![Some(Tensor::from_vec(&shape, d).unwrap())]
        }),
    ))
}

/// Increments of the Jaccard loss along a ranking: entry `i` is
/// `J(first i+1) - J(first i)` for foreground indicators sorted by
/// decreasing error.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut inter_cum = 0.0;
    let mut union_cum = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                inter_cum += 1.0;
            } else {
                union_cum += 1.0;
            }
            let jac = 1.0 - (gts - inter_cum) / (gts + union_cum);
            let inc = jac - prev;
            prev = jac;
            inc
        })
        .collect()
}

/// Lovász-softmax over `[B, K, H, W]` class probabilities: per image, the
/// mean over classes present in the target of the Lovász extension of the
/// Jaccard loss; averaged over images.
pub fn lovasz_softmax<T: Real>(g: &mut Graph<'_, T>, probs: Var, targets: &[&LabelMap]) -> Result<Var> {
    let (b, k, h, w) = check_targets(g, probs, targets, "lovasz")?;
    check_labels(targets, k, "lovasz target")?;
    let hw = h * w;
    if b == 0 || hw == 0 {
        return Err(FobaError::DegenerateTarget("lovasz loss over zero pixels".into()));
    }
    let pv = g.value(probs).data();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); pv.len()];
    for bi in 0..b {
        let lab = targets[bi].data();
        let present: Vec<usize> = (0..k).filter(|&c| lab.iter().any(|&l| l as usize == c)).collect();
        let scale = 1.0 / (present.len() as f64 * b as f64);
        let mut image = 0.0;
        for &c in &present {
            let base = (bi * k + c) * hw;
            let errs: Vec<(f64, bool, usize)> = (0..hw)
                .map(|p| {
                    let fg = lab[p] as usize == c;
                    let pr = pv[base + p].as_f64();
                    ((if fg { 1.0 } else { 0.0 } - pr).abs(), fg, p)
                })
                .collect();
            let mut order: Vec<usize> = (0..hw).collect();
            order.sort_by(|&i, &j| errs[j].0.total_cmp(&errs[i].0));
            let fg_sorted: Vec<bool> = order.iter().map(|&i| errs[i].1).collect();
            let weights = lovasz_grad(&fg_sorted);
            for (rank, &i) in order.iter().enumerate() {
                let (e, fg, p) = errs[i];
                image += e * weights[rank];
                let sign = if fg { -1.0 } else { 1.0 };
                grad[base + p] = T::from_f64_lossy(sign * weights[rank] * scale);
            }
        }
        total += image / present.len() as f64;
    }
    let shape = [b, k, h, w];
    Ok(g.push(
        Tensor::scalar(T::from_f64_lossy(total / b as f64)),
        &[probs],
        Box::new(move |args| {
            let s = args.grad.data()[0];
            vec![Some(Tensor::from_vec(&shape, grad.iter().map(|&d| d * s).collect()).unwrap())]
        }),
    ))
}

/// Max-pools a binary map by `factor`: a coarse pixel is set if any covered pixel is.
pub fn downsample_change(map: &LabelMap, factor: usize) -> Result<LabelMap> {
    let (h, w) = (map.height(), map.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(FobaError::ShapeMismatch(format!(
            "cannot pool {}x{} by {}",
            h, w, factor
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = LabelMap::zeros(ho, wo);
    for y in 0..h {
        for x in 0..w {
            if map.get(y, x) != 0 {
                out.set(y / factor, x / factor, 1);
            }
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy of `[B, 1, h, w]` probabilities against 0/1 targets.
fn bce_mean<T: Real>(g: &mut Graph<'_, T>, m: Var, targets: &[LabelMap]) -> Result<Var> {
    let refs: Vec<&LabelMap> = targets.iter().collect();
    let (b, c, h, w) = check_targets(g, m, &refs, "mask bce")?;
    if c != 1 {
        return Err(FobaError::ShapeMismatch(format!("mask bce expects one channel, got {}", c)));
    }
    let hw = h * w;
    let n = (b * hw) as f64;
    let (lo, hi) = (MASK_EPS, 1.0 - MASK_EPS);
    let mv = g.value(m).data();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); mv.len()];
    for (bi, t) in targets.iter().enumerate() {
        for p in 0..hw {
            let i = bi * hw + p;
            let raw = mv[i].as_f64();
            let q = raw.clamp(lo, hi);
            let y = t.data()[p] as f64;
            total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            if (lo..=hi).contains(&raw) {
                grad[i] = T::from_f64_lossy((q - y) / (q * (1.0 - q)) / n);
            }
        }
    }
    let shape = [b, 1, h, w];
    Ok(g.push(
        Tensor::scalar(T::from_f64_lossy(total / n)),
        &[m],
        Box::new(move |args| {
            let s = args.grad.data()[0];
            vec![Some(Tensor::from_vec(&shape, grad.iter().map(|&d| d * s).collect()).unwrap())]
        }),
    ))
}

/// Mean over stages of the BCE between each stage's change probability and
/// the max-pooled ground-truth change mask at that resolution.
pub fn mask_bce<T: Real>(g: &mut Graph<'_, T>, stage_masks: &[Var], change: &[&LabelMap]) -> Result<Var> {
    if stage_masks.is_empty() {
        return Err(FobaError::ShapeMismatch("mask bce over zero stages".into()));
    }
    let mut terms = Vec::with_capacity(stage_masks.len());
    let weight = T::one() / T::from_usize(stage_masks.len()).unwrap();
    for &m in stage_masks {
        let shape = g.shape(m).to_vec();
        if shape.len() != 4 || change.is_empty() || shape[2] == 0 || !change[0].height().is_multiple_of(shape[2]) {
            return Err(FobaError::ShapeMismatch(format!("stage mask {:?} against ground truth", shape)));
        }
        let factor = change[0].height() / shape[2];
        let pooled = change
            .iter()
            .map(|c| downsample_change(c, factor))
            .collect::<Result<Vec<_>>>()?;
        terms.push((weight, bce_mean(g, m, &pooled)?));
    }
    g.weighted_sum(&terms)
}

/// Mean over ground-truth unchanged pixels of the squared Euclidean distance
/// between the two probability vectors; 0 when no pixel is unchanged.
pub fn consistency_loss<T: Real>(g: &mut Graph<'_, T>, p1: Var, p2: Var, change: &[&LabelMap]) -> Result<Var> {
    let (b, k, h, w) = check_targets(g, p1, change, "consistency")?;
    if g.shape(p2) != g.shape(p1) {
        return Err(FobaError::ShapeMismatch(format!(
            "consistency: {:?} vs {:?}",
            g.shape(p1),
            g.shape(p2)
        )));
    }
    let hw = h * w;
    let unchanged: usize = change.iter().map(|c| c.data().iter().filter(|&&v| v == 0).count()).sum();
    if unchanged == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let inv = T::one() / T::from_usize(unchanged).unwrap();
    let (a, bv) = (g.value(p1).data(), g.value(p2).data());
    let mut diff = vec![T::zero(); a.len()];
    let mut total = T::zero();
    for bi in 0..b {
        let cm = change[bi].data();
        for c in 0..k {
            for p in 0..hw {
                if cm[p] == 0 {
                    let i = (bi * k + c) * hw + p;
                    let d = a[i] - bv[i];
                    diff[i] = d;
                    total = total + d * d;
                }
            }
        }
    }
    let shape = [b, k, h, w];
    Ok(g.push(
        Tensor::scalar(total * inv),
        &[p1, p2],
        Box::new(move |args| {
            let s = args.grad.data()[0] * inv * T::from_f64_lossy(2.0);
            let d1: Vec<T> = diff.iter().map(|&d| d * s).collect();
            let d2: Vec<T> = d1.iter().map(|&d| -d).collect();
            vec![
                Some(Tensor::from_vec(&shape, d1).unwrap()),
                Some(Tensor::from_vec(&shape, d2).unwrap()),
            ]
        }),
    ))
}

/// Component values of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bcd: f64,
    pub l_scd: f64,
    pub l_sample: f64,
    pub l_f: f64,
    pub l_cons: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the components.
    pub fn compose(l_bcd: f64, l_scd: f64, l_sample: f64, l_f: f64, l_cons: f64, w: &LossWeights) -> Self {
        Self {
            l_bcd,
            l_scd,
            l_sample,
            l_f,
            l_cons,
            total: w.lambda1 * l_bcd + w.lambda2 * (l_scd + l_cons) + w.lambda3 * l_sample + w.lambda4 * l_f,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_bcd, self.l_scd, self.l_sample, self.l_f, self.l_cons, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss nodes on the tape together with their values.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_bcd: Var,
    pub l_scd: Var,
    pub l_sample: Var,
    pub l_f: Var,
    pub l_cons: Option<Var>,
    /// Differentiable weighted total.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// The full objective for a batch of samples matching `out`.
pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &FoBaOutput,
    samples: &[&BiTemporalSample],
    w: &LossWeights,
    consistency: bool,
) -> Result<LossTerms> {
    let change: Vec<&LabelMap> = samples.iter().map(|s| &s.change_mask).collect();
    let sem1: Vec<&LabelMap> = samples.iter().map(|s| &s.sem_t1).collect();
    let sem2: Vec<&LabelMap> = samples.iter().map(|s| &s.sem_t2).collect();
    let l_bcd = ce_loss(g, out.bcd_logits, &change)?;
    let ce1 = ce_loss(g, out.scd1_logits, &sem1)?;
    let ce2 = ce_loss(g, out.scd2_logits, &sem2)?;
    let half = T::from_f64_lossy(0.5);
    let l_scd = g.weighted_sum(&[(half, ce1), (half, ce2)])?;
    let bcd_probs = g.softmax(out.bcd_logits, 1)?;
    let l_sample = lovasz_softmax(g, bcd_probs, &change)?;
    let masks: Vec<Var> = out.stage_masks.iter().map(|m| m.m_c).collect();
    let l_f = mask_bce(g, &masks, &change)?;
    let l_cons = if consistency {
        let p1 = g.softmax(out.scd1_logits, 1)?;
        let p2 = g.softmax(out.scd2_logits, 1)?;
        Some(consistency_loss(g, p1, p2, &change)?)
    } else {
        None
    };
    let lam = |v: f64| T::from_f64_lossy(v);
    let mut terms = vec![
        (lam(w.lambda1), l_bcd),
        (lam(w.lambda2), l_scd),
        (lam(w.lambda3), l_sample),
        (lam(w.lambda4), l_f),
    ];
    if let Some(c) = l_cons {
        terms.push((lam(w.lambda2), c));
    }
    let total = g.weighted_sum(&terms)?;
    let val = |v: Var| g.value(v).data()[0].as_f64();
    let breakdown = LossBreakdown::compose(
        val(l_bcd),
        val(l_scd),
        val(l_sample),
        val(l_f),
        l_cons.map_or(0.0, val),
        w,
    );
    Ok(LossTerms {
        l_bcd,
        l_scd,
        l_sample,
        l_f,
        l_cons,
        total,
        breakdown,
    })
}
