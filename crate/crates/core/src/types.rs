//! Shared domain types: samples, feature maps, mask pairs, confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{FobaError, Result};
use crate::nn::{Graph, Real, Tensor, Var};

/// Spatial sizes must be multiples of the coarsest encoder stride.
pub const SIZE_MULTIPLE: usize = 32;

/// Integer raster `[H, W]` of class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(FobaError::ShapeMismatch(format!(
                "label map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// A co-registered image pair with from-to semantic labels.
///
/// Class 0 means "unchanged" and is used in both semantic maps for every
/// pixel outside the change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    pub id: String,
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image_t1: Tensor<f32>,
    pub image_t2: Tensor<f32>,
    pub sem_t1: LabelMap,
    pub sem_t2: LabelMap,
    /// 1 for changed pixels.
    pub change_mask: LabelMap,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.sem_t1.height()
    }

    pub fn width(&self) -> usize {
        self.sem_t1.width()
    }
}

/// Checks every structural invariant of a sample against `n_classes` change classes.
pub fn validate_sample(s: &BiTemporalSample, n_classes: usize) -> Result<()> {
    let shape = s.image_t1.shape();
    if shape.len() != 3 {
        return Err(FobaError::ShapeMismatch(format!(
            "{}: image must be [C, H, W], got {:?}",
            s.id, shape
        )));
    }
    if s.image_t2.shape() != shape {
        return Err(FobaError::ShapeMismatch(format!(
            "{}: t1 image {:?} vs t2 image {:?}",
            s.id,
            shape,
            s.image_t2.shape()
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
        return Err(FobaError::ShapeMismatch(format!(
            "{}: {}x{} is not a positive multiple of {}",
            s.id, h, w, SIZE_MULTIPLE
        )));
    }
    for (name, map) in [("sem_t1", &s.sem_t1), ("sem_t2", &s.sem_t2), ("change", &s.change_mask)] {
        if map.height() != h || map.width() != w {
            return Err(FobaError::ShapeMismatch(format!(
                "{}: {} is {}x{}, image is {}x{}",
                s.id,
                name,
                map.height(),
                map.width(),
                h,
                w
            )));
        }
    }
    if let Some(v) = s
        .image_t1
        .data()
        .iter()
        .chain(s.image_t2.data())
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(FobaError::ShapeMismatch(format!(
            "{}: image value {} outside [0, 1]",
            s.id, v
        )));
    }
    for (name, map) in [("sem_t1", &s.sem_t1), ("sem_t2", &s.sem_t2)] {
        let max = map.max_label() as usize;
        if max > n_classes {
            return Err(FobaError::LabelOutOfRange {
                label: max,
                max: n_classes,
                context: format!("{} of {}", name, s.id),
            });
        }
    }
    let max = s.change_mask.max_label() as usize;
    if max > 1 {
        return Err(FobaError::LabelOutOfRange {
            label: max,
            max: 1,
            context: format!("change mask of {}", s.id),
        });
    }
    for y in 0..h {
        for x in 0..w {
            let changed = s.sem_t1.get(y, x) != 0 || s.sem_t2.get(y, x) != 0;
            if changed != (s.change_mask.get(y, x) == 1) {
                return Err(FobaError::MaskInconsistent { y, x });
            }
        }
    }
    Ok(())
}

/// A feature tensor `[B, C, h, w]` on the tape together with its stride
/// relative to the input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub scale: usize,
}

/// Four encoder stages at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    stages: [FeatureMap; 4],
}

impl FeaturePyramid {
    pub const SCALES: [usize; 4] = [4, 8, 16, 32];

    /// Validates the strides and the spatial extent of every stage against
    /// an `input_h x input_w` image.
    pub fn new<T: Real>(g: &Graph<'_, T>, stages: [FeatureMap; 4], input_h: usize, input_w: usize) -> Result<Self> {
        for (st, &scale) in stages.iter().zip(&Self::SCALES) {
            let shape = g.shape(st.var);
            if st.scale != scale
                || shape.len() != 4
                || shape[1] == 0
                || shape[2] * scale != input_h
                || shape[3] * scale != input_w
            {
                return Err(FobaError::ShapeMismatch(format!(
                    "pyramid stage at scale {} has shape {:?} for input {}x{}",
                    st.scale, shape, input_h, input_w
                )));
            }
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[FeatureMap; 4] {
        &self.stages
    }

    pub fn stage(&self, i: usize) -> FeatureMap {
        self.stages[i]
    }
}

/// Change probability `m_c` and its exact complement `m_uc = 1 - m_c`,
/// both `[B, 1, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub m_c: Var,
    pub m_uc: Var,
}

impl MaskPair {
    /// The complement is always recomputed from `m_c`, never carried separately.
    pub fn from_change<T: Real>(g: &mut Graph<'_, T>, m_c: Var) -> Self {
        let m_uc = g.one_minus(m_c);
        Self { m_c, m_uc }
    }
}

/// `(N+1) x (N+1)` pixel counts; `q[i][j]` counts pixels predicted `i` with
/// ground truth `j`. Class 0 is "unchanged".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Empty matrix over `n_classes` labels (including the unchanged class).
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(FobaError::ShapeMismatch("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self {
            n_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.n_classes + gt]
    }

    pub fn add_count(&mut self, pred: usize, gt: usize, n: u64) {
        self.counts[pred * self.n_classes + gt] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes).map(|r| r.to_vec()).collect()
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(FobaError::ShapeMismatch(format!(
                "merging {}-class and {}-class confusion matrices",
                self.n_classes, other.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Weights of the combined training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Binary change cross-entropy.
    pub lambda1: f64,
    /// Semantic cross-entropy plus the consistency term.
    pub lambda2: f64,
    /// Lovász-softmax on the change head.
    pub lambda3: f64,
    /// Per-stage mask BCE.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.75,
            lambda3: 0.5,
            lambda4: 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, n: u8) -> BiTemporalSample {
        let mut sem_t1 = LabelMap::zeros(h, w);
        let mut sem_t2 = LabelMap::zeros(h, w);
        let mut change = LabelMap::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if (x + y) % 5 == 0 {
                    sem_t1.set(y, x, (x % n as usize) as u8 + 1);
                    sem_t2.set(y, x, (y % n as usize) as u8);
                }
                let c = sem_t1.get(y, x) != 0 || sem_t2.get(y, x) != 0;
                change.set(y, x, c as u8);
            }
        }
        BiTemporalSample {
            id: "s".into(),
            image_t1: Tensor::full(&[3, h, w], 0.5),
            image_t2: Tensor::full(&[3, h, w], 0.25),
            sem_t1,
            sem_t2,
            change_mask: change,
        }
    }

    #[test]
    fn consistent_sample_validates() {
        validate_sample(&sample(64, 64, 3), 3).unwrap();
    }

    #[test]
    fn empty_mask_with_labels_is_inconsistent() {
        let mut s = sample(64, 64, 3);
        s.change_mask = LabelMap::zeros(64, 64);
        assert!(matches!(validate_sample(&s, 3), Err(FobaError::MaskInconsistent { .. })));
    }

    #[test]
    fn size_must_be_multiple_of_32() {
        let mut s = sample(64, 64, 3);
        s.image_t1 = Tensor::zeros(&[3, 60, 64]);
        s.image_t2 = Tensor::zeros(&[3, 60, 64]);
        assert!(matches!(validate_sample(&s, 3), Err(FobaError::ShapeMismatch(_))));
    }

    #[test]
    fn labels_above_class_count_are_rejected() {
        let s = sample(32, 32, 3);
        assert!(matches!(
            validate_sample(&s, 2),
            Err(FobaError::LabelOutOfRange { label: 3, max: 2, .. })
        ));
    }

    #[test]
    fn mask_complement_is_exact() {
        let mut g = Graph::<f32>::new();
        let vals: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.7919).sin() * 0.5 + 0.5).collect();
        let m = g.constant(Tensor::from_vec(&[1, 1, 10, 100], vals).unwrap());
        let pair = MaskPair::from_change(&mut g, m);
        for (&a, &b) in g.value(pair.m_c).data().iter().zip(g.value(pair.m_uc).data()) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn confusion_merge_is_additive() {
        let mut a = ConfusionMatrix::from_rows(&[vec![1, 2], vec![3, 4]]).unwrap();
        let b = ConfusionMatrix::from_rows(&[vec![10, 0], vec![0, 1]]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.rows(), vec![vec![11, 2], vec![3, 5]]);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn default_loss_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2, w.lambda3, w.lambda4), (1.0, 0.75, 0.5, 0.5));
    }
}
