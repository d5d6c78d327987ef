//! Foreground/background co-guided decoding.
//!
//! Each decode step projects the fused features of one encoder stage,
//! upsamples the previous state, runs one guided block under the change
//! mask and one under its complement, merges them with the previous
//! features and predicts the next mask.

pub mod attention;
pub mod ssm;

use crate::config::{FbgVariant, FoBaConfig};
use crate::error::{FobaError, Result};
use crate::nn::{Conv2d, ConvSpec, Graph, ParamBuilder, Real, Var};
use crate::types::{FeatureMap, MaskPair};

pub use attention::{masked_attention, AttentionBlock, AttentionOutput, FeedForward};
pub use ssm::{scan_orders, Ss2d, SsmBlock};

/// Logits are clamped to this magnitude before the sigmoid so that the
/// change probability stays strictly inside `(0, 1)` in single precision.
pub const MASK_LOGIT_BOUND: f64 = 15.0;

/// `m_c = sigmoid(conv3x3(f))`, `m_uc = 1 - m_c`.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub conv: Conv2d,
}

impl MaskHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, name, channels, 1, 3, ConvSpec::same(3), true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<MaskPair> {
        let c = g.shape(f).get(1).copied().unwrap_or(0);
        if c != self.conv.in_channels {
            return Err(FobaError::ChannelMismatch(format!(
                "mask head expects {} channels, got {}",
                self.conv.in_channels, c
            )));
        }
        let logits = self.conv.forward(g, f)?;
        let bound = T::from_f64_lossy(MASK_LOGIT_BOUND);
        let logits = g.clamp(logits, -bound, bound);
        let m_c = g.sigmoid(logits);
        Ok(MaskPair::from_change(g, m_c))
    }
}

/// Decoder state carried between steps.
#[derive(Clone, Copy, Debug)]
pub struct FbgState {
    /// `[B, fbg_dim, h, w]`
    pub f_pre: FeatureMap,
    pub masks: MaskPair,
}

#[derive(Clone, Debug)]
pub enum GuidedBlock {
    Attention(AttentionBlock),
    Ssm(SsmBlock),
}

impl GuidedBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &FoBaConfig) -> Result<Self> {
        Ok(match cfg.fbg_variant {
            FbgVariant::Attention => GuidedBlock::Attention(AttentionBlock::new(pb, name, cfg.fbg_dim)?),
            FbgVariant::Ssm => GuidedBlock::Ssm(SsmBlock::new(pb, name, cfg.fbg_dim, cfg.ssm_state_dim)?),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, mask: Var) -> Result<Var> {
        match self {
            GuidedBlock::Attention(b) => b.forward(g, f, mask),
            GuidedBlock::Ssm(b) => b.forward(g, f, mask),
        }
    }
}

/// Seeds the decoder from the coarsest fused features.
#[derive(Clone, Debug)]
pub struct InitialState {
    pub proj: Conv2d,
    pub head: MaskHead,
}

impl InitialState {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, fbg_dim: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            proj: Conv2d::pointwise(&mut sub, "proj", in_channels, fbg_dim, true)?,
            head: MaskHead::new(&mut sub, "mask_head", fbg_dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f_out: FeatureMap) -> Result<FbgState> {
        let f_pre = self.proj.forward(g, f_out.var)?;
        let masks = self.head.forward(g, f_pre)?;
        Ok(FbgState {
            f_pre: FeatureMap {
                var: f_pre,
                scale: f_out.scale,
            },
            masks,
        })
    }
}

/// One decode step.
#[derive(Clone, Debug)]
pub struct FbgStage {
    pub proj: Conv2d,
    /// `None` when the stage is disabled.
    pub fg: Option<GuidedBlock>,
    pub bg: Option<GuidedBlock>,
    pub merge: Conv2d,
    pub head: MaskHead,
}

/// Tensors of one decode step.
#[derive(Clone, Copy, Debug)]
pub struct FbgStepTrace {
    pub f_proj: Var,
    /// Upsampled guidance masks.
    pub guidance: MaskPair,
    pub fg: Option<Var>,
    pub bg: Option<Var>,
    pub state: FbgState,
}

impl FbgStage {
    /// `enabled` switches the guided blocks on; `cfg.bg_branch_enabled`
    /// controls the background block.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, enabled: bool, cfg: &FoBaConfig) -> Result<Self> {
        let mut sub = pb.sub(name);
        let c = cfg.fbg_dim;
        let proj = Conv2d::pointwise(&mut sub, "proj", in_channels, c, true)?;
        let fg = if enabled { Some(GuidedBlock::new(&mut sub, "fg", cfg)?) } else { None };
        let bg = if enabled && cfg.bg_branch_enabled {
            Some(GuidedBlock::new(&mut sub, "bg", cfg)?)
        } else {
            None
        };
        Ok(Self {
            proj,
            fg,
            bg,
            merge: Conv2d::new(&mut sub, "merge", c, c, 3, ConvSpec::same(3), true)?,
            head: MaskHead::new(&mut sub, "mask_head", c)?,
        })
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, f_out: FeatureMap, state: &FbgState) -> Result<FbgStepTrace> {
        let cur = g.shape(f_out.var).to_vec();
        let prev = g.shape(state.f_pre.var).to_vec();
        if cur.len() != 4
            || prev.len() != 4
            || state.f_pre.scale < f_out.scale
            || !state.f_pre.scale.is_multiple_of(f_out.scale)
            || prev[2] * (state.f_pre.scale / f_out.scale) != cur[2]
            || prev[3] * (state.f_pre.scale / f_out.scale) != cur[3]
        {
            return Err(FobaError::ShapeMismatch(format!(
                "decoder state {:?} at scale {} cannot feed stage {:?} at scale {}",
                prev, state.f_pre.scale, cur, f_out.scale
            )));
        }
        let factor = state.f_pre.scale / f_out.scale;
        let f_proj = self.proj.forward(g, f_out.var)?;
        let f_pre = g.upsample_bilinear(state.f_pre.var, factor)?;
        let m_c = g.upsample_bilinear(state.masks.m_c, factor)?;
        let guidance = MaskPair::from_change(g, m_c);
        let fg = match &self.fg {
            Some(block) => Some(block.forward(g, f_proj, guidance.m_c)?),
            None => None,
        };
        let bg = match &self.bg {
            Some(block) => Some(block.forward(g, f_proj, guidance.m_uc)?),
            None => None,
        };
        // a disabled stage passes the projected features straight through
        let mut terms: Vec<Var> = match fg {
            Some(v) => std::iter::once(v).chain(bg).collect(),
            None => vec![f_proj],
        };
        terms.push(f_pre);
        let sum = g.add_n(&terms)?;
        let merged = self.merge.forward(g, sum)?;
        let masks = self.head.forward(g, merged)?;
        Ok(FbgStepTrace {
            f_proj,
            guidance,
            fg,
            bg,
            state: FbgState {
                f_pre: FeatureMap {
                    var: merged,
                    scale: f_out.scale,
                },
                masks,
            },
        })
    }

    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, f_out: FeatureMap, state: &FbgState) -> Result<FbgState> {
        Ok(self.trace(g, f_out, state)?.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, GradCheckOptions, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_cfg(variant: FbgVariant) -> FoBaConfig {
        FoBaConfig {
            fbg_dim: 4,
            fbg_variant: variant,
            ssm_state_dim: 2,
            ..FoBaConfig::default()
        }
    }

    fn set(store: &mut ParamStore<f64>, id: crate::nn::ParamId, v: f64) {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = v);
    }

    #[test]
    fn mask_head_values() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let head = MaskHead::new(&mut pb, "head", 3).unwrap();
        set(&mut store, head.conv.weight, 0.0);
        set(&mut store, head.conv.bias.unwrap(), 0.0);
        let f = rand_t(&[2, 3, 4, 4], 1);
        let eval = |store: &ParamStore<f64>| {
            let mut g = Graph::with_params(store);
            let fv = g.constant(f.clone());
            let m = head.forward(&mut g, fv).unwrap();
            (g.value(m.m_c).clone(), g.value(m.m_uc).clone())
        };
        let (mc, muc) = eval(&store);
        assert_eq!(mc.shape(), &[2, 1, 4, 4]);
        assert!(mc.data().iter().all(|&v| v == 0.5));
        assert!(mc.data().iter().zip(muc.data()).all(|(a, b)| a + b == 1.0));
        set(&mut store, head.conv.bias.unwrap(), 10.0);
        let (mc, _) = eval(&store);
        let s10 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!(mc.data().iter().all(|&v| (v - s10).abs() < 1e-15));
        set(&mut store, head.conv.bias.unwrap(), 1e4);
        let (mc, muc) = eval(&store);
        assert!(mc.data().iter().all(|&v| v < 1.0));
        assert!(muc.data().iter().all(|&v| v > 0.0));
        let mut g = Graph::with_params(&store);
        let bad = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(head.forward(&mut g, bad), Err(FobaError::ChannelMismatch(_))));
    }

    #[test]
    fn mask_stays_open_in_single_precision() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let head = MaskHead::new(&mut pb, "head", 1).unwrap();
        store.get_mut(head.conv.weight).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for bias in [-1e3f32, 1e3] {
            store.get_mut(head.conv.bias.unwrap()).value.data_mut()[0] = bias;
            let mut g = Graph::with_params(&store);
            let f = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
            let m = head.forward(&mut g, f).unwrap();
            for (&c, &u) in g.value(m.m_c).data().iter().zip(g.value(m.m_uc).data()) {
                assert!(c > 0.0 && c < 1.0 && u > 0.0 && u < 1.0);
                assert_eq!(c + u, 1.0);
            }
        }
    }

    fn stage(cfg: &FoBaConfig, enabled: bool, seed: u64) -> (ParamStore<f64>, InitialState, FbgStage) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let init = InitialState::new(&mut pb, "initial", 6, cfg.fbg_dim).unwrap();
        let st = FbgStage::new(&mut pb, "d2", 6, enabled, cfg).unwrap();
        (store, init, st)
    }

    fn run_step(store: &ParamStore<f64>, init: &InitialState, st: &FbgStage) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::with_params(store);
        let coarse = g.constant(rand_t(&[2, 6, 2, 2], 40));
        let fine = g.constant(rand_t(&[2, 6, 4, 4], 41));
        let s0 = init
            .forward(&mut g, FeatureMap { var: coarse, scale: 32 })
            .unwrap();
        let s1 = st.step(&mut g, FeatureMap { var: fine, scale: 16 }, &s0).unwrap();
        assert_eq!(s1.f_pre.scale, 16);
        (g.value(s1.f_pre.var).clone(), g.value(s1.masks.m_c).clone())
    }

    #[test]
    fn step_doubles_resolution() {
        for variant in [FbgVariant::Attention, FbgVariant::Ssm] {
            let cfg = small_cfg(variant);
            let (store, init, st) = stage(&cfg, true, 2);
            let (f, m) = run_step(&store, &init, &st);
            assert_eq!(f.shape(), &[2, 4, 4, 4]);
            assert_eq!(m.shape(), &[2, 1, 4, 4]);
            assert!(f.all_finite() && m.all_finite());
        }
    }

    #[test]
    fn zero_initialised_step_is_neutral() {
        let cfg = small_cfg(FbgVariant::Ssm);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut store, &mut rng).zero_init(true);
        let init = InitialState::new(&mut pb, "initial", 6, 4).unwrap();
        let st = FbgStage::new(&mut pb, "d2", 6, true, &cfg).unwrap();
        let (f, m) = run_step(&store, &init, &st);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn background_branch_matters() {
        let with_bg = small_cfg(FbgVariant::Attention);
        let without = FoBaConfig {
            bg_branch_enabled: false,
            ..with_bg.clone()
        };
        let (s1, i1, st1) = stage(&with_bg, true, 5);
        let (s2, i2, st2) = stage(&without, true, 5);
        assert!(st1.bg.is_some() && st2.bg.is_none());
        assert!(s2.len() < s1.len());
        let (f1, _) = run_step(&s1, &i1, &st1);
        let (f2, _) = run_step(&s2, &i2, &st2);
        assert!(f1.max_abs_diff(&f2) > 1e-6);
    }

    #[test]
    fn disabled_stage_has_no_guided_blocks() {
        let cfg = small_cfg(FbgVariant::Attention);
        let (store, init, st) = stage(&cfg, false, 6);
        assert!(st.fg.is_none() && st.bg.is_none());
        assert!(store.iter().all(|(_, p)| !p.name.contains(".fg.") && !p.name.contains(".bg.")));
        let (f, _) = run_step(&store, &init, &st);
        assert_eq!(f.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn mismatched_scales_are_rejected() {
        let cfg = small_cfg(FbgVariant::Attention);
        let (store, init, st) = stage(&cfg, true, 7);
        let mut g = Graph::with_params(&store);
        let coarse = g.constant(rand_t(&[1, 6, 2, 2], 1));
        let wrong = g.constant(rand_t(&[1, 6, 6, 6], 2));
        let s0 = init.forward(&mut g, FeatureMap { var: coarse, scale: 32 }).unwrap();
        assert!(matches!(
            st.step(&mut g, FeatureMap { var: wrong, scale: 16 }, &s0),
            Err(FobaError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn step_parameter_gradients() {
        for variant in [FbgVariant::Attention, FbgVariant::Ssm] {
            let cfg = small_cfg(variant);
            let (mut store, init, st) = stage(&cfg, true, 8);
            let dt: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with("dt_bias")).map(|(id, _)| id).collect();
            for id in dt {
                set(&mut store, id, 0.5);
            }
            let probe = rand_t(&[1, 4, 4, 4], 9);
            let r = grad_check_params(
                |g| {
                    let coarse = g.constant(rand_t(&[1, 6, 2, 2], 10));
                    let fine = g.constant(rand_t(&[1, 6, 4, 4], 11));
                    let s0 = init.forward(g, FeatureMap { var: coarse, scale: 32 })?;
                    let s1 = st.step(g, FeatureMap { var: fine, scale: 16 }, &s0)?;
                    let a = g.dot_const(s1.f_pre.var, &probe)?;
                    let b = g.sum_all(s1.masks.m_c);
                    g.add(a, b)
                },
                &store,
                &GradCheckOptions {
                    step: 1e-5,
                    abs_floor: 1e-5,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.passes(1e-4), "{:?}: {:?}", variant, r);
        }
    }
}
