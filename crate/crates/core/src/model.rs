//! End-to-end assembly: siamese encoder, per-stage fusion, guided decoder
//! cascade and the three task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FoBaConfig;
use crate::encoder::{Backbone, Encoder};
use crate::error::{FobaError, Result};
use crate::fbg::{FbgStage, InitialState};
use crate::gif::{gif_bypass, GifModule};
use crate::nn::{Conv2d, Graph, ParamBuilder, ParamStore, Real, Tensor, Var};
use crate::types::{FeatureMap, LabelMap, MaskPair};

/// Prefix of every encoder parameter name.
pub const ENCODER_PREFIX: &str = "encoder.";

/// Upsampling factor from the finest decoder state to the input.
const HEAD_UPSAMPLE: usize = 4;

#[derive(Clone, Debug)]
pub struct FoBaModel<E = Encoder> {
    pub cfg: FoBaConfig,
    pub encoder: E,
    /// Shared 1x1 projection from encoder width to fusion width, per stage.
    pub stage_proj: [Option<Conv2d>; 4],
    pub gif: [Option<GifModule>; 4],
    pub init: InitialState,
    /// Consume fused stages 3, 2 and 1.
    pub decoder: [FbgStage; 3],
    pub bcd_head: Conv2d,
    pub scd1_head: Conv2d,
    pub scd2_head: Conv2d,
}

/// Model outputs for a batch.
#[derive(Clone, Debug)]
pub struct FoBaOutput {
    /// `[B, 2, H, W]`
    pub bcd_logits: Var,
    /// `[B, N+1, H, W]`
    pub scd1_logits: Var,
    pub scd2_logits: Var,
    /// Coarse to fine: the initial mask and one per decode step.
    pub stage_masks: Vec<MaskPair>,
}

impl FoBaModel<Encoder> {
    /// Builds the model and registers its parameters, seeded from `cfg.seed`.
    pub fn new<T: Real>(cfg: &FoBaConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let model = Self::build(cfg, &mut pb)?;
        if cfg.encoder.frozen {
            store.set_trainable_prefix(ENCODER_PREFIX, false);
        }
        Ok(model)
    }

    pub fn build<T: Real>(cfg: &FoBaConfig, pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&mut pb.sub("encoder"), &cfg.encoder, cfg.image_channels, cfg.gn_groups)?;
        Self::with_backbone(cfg, pb, encoder)
    }
}

impl<E: Backbone> FoBaModel<E> {
    /// Assembles the fusion and decoding stages around any backbone.
    pub fn with_backbone<T: Real>(cfg: &FoBaConfig, pb: &mut ParamBuilder<'_, T>, encoder: E) -> Result<Self> {
        cfg.validate()?;
        let enc_dims = encoder.dims();
        let mut fusion = pb.sub("fusion");
        let mut stage_proj: [Option<Conv2d>; 4] = Default::default();
        let mut gif: [Option<GifModule>; 4] = Default::default();
        for i in 0..4 {
            let name = format!("stage{}", i + 1);
            let mut sub = fusion.sub(&name);
            if enc_dims[i] != cfg.gif_dims[i] {
                stage_proj[i] = Some(Conv2d::pointwise(&mut sub, "proj", enc_dims[i], cfg.gif_dims[i], true)?);
            }
            if cfg.gif_enabled[i] {
                gif[i] = Some(GifModule::new(&mut sub, "gif", cfg.gif_dims[i], cfg.bottleneck_ratio, cfg.gn_groups)?);
            }
        }
        let mut dec = pb.sub("decoder");
        let init = InitialState::new(&mut dec, "initial", 2 * cfg.gif_dims[3], cfg.fbg_dim)?;
        let stages = (0..3)
            .map(|j| {
                // decode module j reads fused stage 3 - j (coarse to fine)
                let stage = 2 - j;
                FbgStage::new(
                    &mut dec,
                    &format!("d{}", j + 2),
                    2 * cfg.gif_dims[stage],
                    cfg.fbg_enabled[j],
                    cfg,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder: [FbgStage; 3] = stages.try_into().expect("three decode stages");
        let mut heads = pb.sub("heads");
        let k = cfg.n_classes + 1;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            stage_proj,
            gif,
            init,
            decoder,
            bcd_head: Conv2d::pointwise(&mut heads, "bcd", cfg.fbg_dim, 2, true)?,
            scd1_head: Conv2d::pointwise(&mut heads, "scd1", cfg.fbg_dim, k, true)?,
            scd2_head: Conv2d::pointwise(&mut heads, "scd2", cfg.fbg_dim, k, true)?,
        })
    }

    /// Fused features `[B, 2 * gif_dims[i], h, w]` of every stage.
    pub fn fuse_stages<T: Real>(&self, g: &mut Graph<'_, T>, t1: Var, t2: Var) -> Result<[FeatureMap; 4]> {
        if g.shape(t1) != g.shape(t2) {
            return Err(FobaError::ShapeMismatch(format!(
                "image pair {:?} vs {:?}",
                g.shape(t1),
                g.shape(t2)
            )));
        }
        let p1 = self.encoder.encode(g, t1)?;
        let p2 = self.encoder.encode(g, t2)?;
        let mut fused = Vec::with_capacity(4);
        for i in 0..4 {
            let (mut a, mut b) = (p1.stage(i).var, p2.stage(i).var);
            if let Some(proj) = &self.stage_proj[i] {
                a = proj.forward(g, a)?;
                b = proj.forward(g, b)?;
            }
            let var = match &self.gif[i] {
                Some(m) => m.fuse(g, a, b)?,
                None => gif_bypass(g, a, b)?,
            };
            fused.push(FeatureMap {
                var,
                scale: p1.stage(i).scale,
            });
        }
        Ok(fused.try_into().expect("four stages"))
    }

    /// `t1`, `t2`: `[B, C, H, W]` image batches.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, t1: Var, t2: Var) -> Result<FoBaOutput> {
        let fused = self.fuse_stages(g, t1, t2)?;
        let mut state = self.init.forward(g, fused[3])?;
        let mut stage_masks = vec![state.masks];
        for (j, stage) in self.decoder.iter().enumerate() {
            state = stage.step(g, fused[2 - j], &state)?;
            stage_masks.push(state.masks);
        }
        let f = state.f_pre.var;
        let mut head = |conv: &Conv2d| -> Result<Var> {
            let logits = conv.forward(g, f)?;
            g.upsample_bilinear(logits, HEAD_UPSAMPLE)
        };
        Ok(FoBaOutput {
            bcd_logits: head(&self.bcd_head)?,
            scd1_logits: head(&self.scd1_head)?,
            scd2_logits: head(&self.scd2_head)?,
            stage_masks,
        })
    }
}

/// Number of trainable scalars of the model described by `cfg`.
pub fn count_params(cfg: &FoBaConfig) -> Result<usize> {
    let mut store = ParamStore::<f32>::new();
    FoBaModel::new(cfg, &mut store)?;
    Ok(store.count_trainable())
}

/// Hard predictions for one image pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub sem1: LabelMap,
    pub sem2: LabelMap,
    pub change: LabelMap,
}

fn argmax<T: Real>(logits: &[T], hw: usize, p: usize, classes: std::ops::Range<usize>) -> usize {
    let mut best = classes.start;
    for k in classes {
        if logits[k * hw + p] > logits[best * hw + p] {
            best = k;
        }
    }
    best
}

/// Per-item label maps from logit tensors `[B, 2, H, W]` and `[B, N+1, H, W]`.
///
/// `change` is the argmax of the binary logits. With `gate` set, semantic
/// labels are the argmax over classes `1..=N` on changed pixels and 0
/// elsewhere; otherwise they are the plain argmax over all classes.
pub fn predict<T: Real>(bcd: &Tensor<T>, scd1: &Tensor<T>, scd2: &Tensor<T>, gate: bool) -> Result<Vec<Prediction>> {
    let (b, two, h, w) = bcd.dims4();
    let (b1, k, h1, w1) = scd1.dims4();
    if two != 2 || scd1.shape() != scd2.shape() || b1 != b || h1 != h || w1 != w || k < 2 {
        return Err(FobaError::ShapeMismatch(format!(
            "predict: bcd {:?}, scd {:?} / {:?}",
            bcd.shape(),
            scd1.shape(),
            scd2.shape()
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let bl = &bcd.data()[bi * 2 * hw..(bi + 1) * 2 * hw];
        let s1 = &scd1.data()[bi * k * hw..(bi + 1) * k * hw];
        let s2 = &scd2.data()[bi * k * hw..(bi + 1) * k * hw];
        let mut change = vec![0u8; hw];
        let mut sem1 = vec![0u8; hw];
        let mut sem2 = vec![0u8; hw];
        for p in 0..hw {
            let changed = bl[hw + p] > bl[p];
            change[p] = changed as u8;
            if gate {
                if changed {
                    sem1[p] = argmax(s1, hw, p, 1..k) as u8;
                    sem2[p] = argmax(s2, hw, p, 1..k) as u8;
                }
            } else {
                sem1[p] = argmax(s1, hw, p, 0..k) as u8;
                sem2[p] = argmax(s2, hw, p, 0..k) as u8;
            }
        }
        out.push(Prediction {
            sem1: LabelMap::new(h, w, sem1)?,
            sem2: LabelMap::new(h, w, sem2)?,
            change: LabelMap::new(h, w, change)?,
        });
    }
    Ok(out)
}

impl FoBaOutput {
    pub fn predict<T: Real>(&self, g: &Graph<'_, T>, gate: bool) -> Result<Vec<Prediction>> {
        predict(
            g.value(self.bcd_logits),
            g.value(self.scd1_logits),
            g.value(self.scd2_logits),
            gate,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FbgVariant;
    use crate::nn::{grad_check_params, GradCheckOptions};
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn tiny(variant: FbgVariant) -> FoBaConfig {
        FoBaConfig {
            n_classes: 2,
            encoder: crate::config::EncoderConfig {
                dims: [8, 8, 8, 8],
                ..Default::default()
            },
            gif_dims: [8, 8, 8, 8],
            fbg_dim: 4,
            fbg_variant: variant,
            ssm_state_dim: 2,
            gn_groups: 2,
            ..FoBaConfig::default()
        }
    }

    fn conv(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> usize {
        cout * (cin / groups) * k * k + if bias { cout } else { 0 }
    }

    fn ffn(c: usize) -> usize {
        2 * c + conv(c, 2 * c, 1, 1, true) + conv(2 * c, c, 1, 1, true)
    }

    fn guided(cfg: &FoBaConfig) -> usize {
        let f = cfg.fbg_dim;
        match cfg.fbg_variant {
            FbgVariant::Attention => {
                2 * f + conv(f, 3 * f, 1, 1, true) + conv(3 * f, 3 * f, 3, 3 * f, false) + 1 + conv(f, f, 1, 1, true) + ffn(f)
            }
            FbgVariant::Ssm => {
                let (e, n, r) = (2 * f, cfg.ssm_state_dim, f.div_ceil(16));
                let scan = conv(4 * e, 4 * r, 1, 4, false)
                    + 2 * conv(4 * e, 4 * n, 1, 4, false)
                    + conv(4 * r, 4 * e, 1, 4, false)
                    + 4 * e
                    + 4 * e * n
                    + 4 * e;
                2 * f + 2 * conv(f, e, 1, 1, true) + conv(e, e, 3, e, true) + scan + 2 * e + conv(e, f, 1, 1, true) + ffn(f)
            }
        }
    }

    /// Parameter count assembled layer by layer.
    fn hand_count(cfg: &FoBaConfig) -> usize {
        let d = cfg.encoder.dims;
        let mut total = 0;
        for i in 0..4 {
            let (cin, k) = if i == 0 { (cfg.image_channels, 4) } else { (d[i - 1], 2) };
            total += conv(cin, d[i], k, 1, false) + 2 * d[i];
            total += cfg.encoder.blocks_per_stage * (conv(d[i], d[i], 3, 1, false) + 2 * d[i] + conv(d[i], d[i], 3, 1, true));
        }
        for i in 0..4 {
            let c = cfg.gif_dims[i];
            if d[i] != c {
                total += conv(d[i], c, 1, 1, true);
            }
            if cfg.gif_enabled[i] {
                let m = c / cfg.bottleneck_ratio;
                total += 8 * (conv(c, m, 1, 1, false) + conv(m, m, 3, m, false) + conv(m, c, 1, 1, false) + 2 * c);
            }
        }
        let f = cfg.fbg_dim;
        let head = conv(f, 1, 3, 1, true);
        total += conv(2 * cfg.gif_dims[3], f, 1, 1, true) + head;
        for j in 0..3 {
            total += conv(2 * cfg.gif_dims[2 - j], f, 1, 1, true) + conv(f, f, 3, 1, true) + head;
            if cfg.fbg_enabled[j] {
                total += guided(cfg) * if cfg.bg_branch_enabled { 2 } else { 1 };
            }
        }
        total + conv(f, 2, 1, 1, true) + 2 * conv(f, cfg.n_classes + 1, 1, 1, true)
    }

    #[test]
    fn parameter_count_matches_layer_sum() {
        let mut cfgs = vec![
            FoBaConfig::default(),
            FoBaConfig::default().baseline(),
            FoBaConfig {
                fbg_variant: FbgVariant::Ssm,
                ..FoBaConfig::default()
            },
            FoBaConfig {
                bg_branch_enabled: false,
                gif_enabled: [true, false, true, false],
                ..tiny(FbgVariant::Ssm)
            },
        ];
        cfgs.push(FoBaConfig {
            gif_dims: [16, 16, 32, 32],
            ..tiny(FbgVariant::Attention)
        });
        for cfg in &cfgs {
            assert_eq!(count_params(cfg).unwrap(), hand_count(cfg), "{:?}", cfg);
        }
    }

    #[test]
    fn components_add_parameters() {
        let base = FoBaConfig::default().baseline();
        let mut with_gif = base.clone();
        with_gif.gif_enabled = [true; 4];
        let mut with_fbg = with_gif.clone();
        with_fbg.fbg_enabled = [true; 3];
        let counts: Vec<usize> = [&base, &with_gif, &with_fbg].iter().map(|c| count_params(c).unwrap()).collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
        let frozen = FoBaConfig {
            encoder: crate::config::EncoderConfig {
                frozen: true,
                ..Default::default()
            },
            ..FoBaConfig::default()
        };
        assert!(count_params(&frozen).unwrap() < count_params(&FoBaConfig::default()).unwrap());
    }

    fn forward(cfg: &FoBaConfig, store: &ParamStore<f64>, model: &FoBaModel, size: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut g = Graph::with_params(store);
        let t1 = g.constant(rand_t(&[2, 3, size, size], seed));
        let t2 = g.constant(rand_t(&[2, 3, size, size], seed + 1));
        let out = model.forward(&mut g, t1, t2).unwrap();
        assert_eq!(out.stage_masks.len(), 4);
        let mut v = vec![
            g.value(out.bcd_logits).clone(),
            g.value(out.scd1_logits).clone(),
            g.value(out.scd2_logits).clone(),
        ];
        for (i, m) in out.stage_masks.iter().enumerate() {
            let side = size / [32, 16, 8, 4][i];
            assert_eq!(g.shape(m.m_c), &[2, 1, side, side]);
            v.push(g.value(m.m_c).clone());
        }
        assert_eq!(v[0].shape(), &[2, 2, size, size]);
        assert_eq!(v[1].shape(), &[2, cfg.n_classes + 1, size, size]);
        v
    }

    #[test]
    fn output_shapes_and_determinism() {
        for variant in [FbgVariant::Attention, FbgVariant::Ssm] {
            let cfg = tiny(variant);
            let mut s1 = ParamStore::new();
            let m1 = FoBaModel::new(&cfg, &mut s1).unwrap();
            let mut s2 = ParamStore::new();
            let m2 = FoBaModel::new(&cfg, &mut s2).unwrap();
            let a = forward(&cfg, &s1, &m1, 64, 3);
            let b = forward(&cfg, &s2, &m2, 64, 3);
            assert_eq!(a, b);
            assert!(a.iter().all(|t| t.all_finite()));
        }
    }

    #[test]
    fn disabled_fusion_is_concatenation() {
        let cfg = FoBaConfig {
            gif_enabled: [false; 4],
            ..tiny(FbgVariant::Attention)
        };
        let mut store = ParamStore::<f64>::new();
        let model = FoBaModel::new(&cfg, &mut store).unwrap();
        assert!(store.iter().all(|(_, p)| !p.name.contains(".gif.")));
        let mut g = Graph::with_params(&store);
        let t1 = g.constant(rand_t(&[1, 3, 32, 32], 1));
        let t2 = g.constant(rand_t(&[1, 3, 32, 32], 2));
        let fused = model.fuse_stages(&mut g, t1, t2).unwrap();
        let p1 = model.encoder.encode(&mut g, t1).unwrap();
        let p2 = model.encoder.encode(&mut g, t2).unwrap();
        for i in 0..4 {
            let want = gif_bypass(&mut g, p1.stage(i).var, p2.stage(i).var).unwrap();
            assert_eq!(g.value(fused[i].var), g.value(want));
        }
    }

    #[test]
    fn rejects_mismatched_pairs() {
        let cfg = tiny(FbgVariant::Attention);
        let mut store = ParamStore::<f64>::new();
        let model = FoBaModel::new(&cfg, &mut store).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.constant(rand_t(&[1, 3, 32, 32], 1));
        let b = g.constant(rand_t(&[1, 3, 64, 32], 2));
        assert!(matches!(model.forward(&mut g, a, b), Err(FobaError::ShapeMismatch(_))));
        let c = g.constant(rand_t(&[1, 3, 48, 48], 2));
        assert!(matches!(model.forward(&mut g, c, c), Err(FobaError::ShapeMismatch(_))));
    }

    #[test]
    fn predict_gates_and_breaks_ties_low() {
        // one item, 1x3 pixels, two change classes
        let bcd = Tensor::from_vec(&[1, 2, 1, 3], vec![0.0, 1.0, 0.5, 1.0, 0.0, 0.5]).unwrap();
        let scd1 = Tensor::from_vec(&[1, 3, 1, 3], vec![9.0, 9.0, 9.0, 1.0, 2.0, 3.0, 2.0, 1.0, 3.0]).unwrap();
        let scd2 = Tensor::from_vec(&[1, 3, 1, 3], vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 6.0, 4.0]).unwrap();
        let gated = &predict(&bcd, &scd1, &scd2, true).unwrap()[0];
        assert_eq!(gated.change.data(), &[1, 0, 0]);
        assert_eq!(gated.sem1.data(), &[2, 0, 0]);
        assert_eq!(gated.sem2.data(), &[1, 0, 0]);
        let plain = &predict(&bcd, &scd1, &scd2, false).unwrap()[0];
        assert_eq!(plain.change, gated.change);
        assert_eq!(plain.sem1.data(), &[0, 0, 0]);
        assert_eq!(plain.sem2.data(), &[1, 2, 1]);
        let bad = Tensor::<f64>::zeros(&[1, 3, 1, 3]);
        assert!(predict(&bad, &scd1, &scd2, true).is_err());
    }

    #[test]
    fn end_to_end_gradients() {
        for variant in [FbgVariant::Attention, FbgVariant::Ssm] {
            let cfg = tiny(variant);
            let mut store = ParamStore::<f64>::new();
            let model = FoBaModel::new(&cfg, &mut store).unwrap();
            let dt: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with("dt_bias")).map(|(id, _)| id).collect();
            for id in dt {
                store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.5);
            }
            let t1 = rand_t(&[1, 3, 32, 32], 5);
            let t2 = rand_t(&[1, 3, 32, 32], 6);
            // probes scaled so the objective stays O(1) and rounding noise small
            let probes: Vec<Tensor<f64>> = [2, 3, 3]
                .iter()
                .enumerate()
                .map(|(i, &k)| rand_t(&[1, k, 32, 32], 10 + i as u64).map(|v| (v - 0.5) / 256.0))
                .collect();
            let r = grad_check_params(
                |g| {
                    let (a, b) = (g.constant(t1.clone()), g.constant(t2.clone()));
                    let out = model.forward(g, a, b)?;
                    let mut terms = vec![
                        (1.0, g.dot_const(out.bcd_logits, &probes[0])?),
                        (1.0, g.dot_const(out.scd1_logits, &probes[1])?),
                        (1.0, g.dot_const(out.scd2_logits, &probes[2])?),
                    ];
                    for m in &out.stage_masks {
                        terms.push((1.0, g.mean_all(m.m_c)));
                    }
                    g.weighted_sum(&terms)
                },
                &store,
                &GradCheckOptions {
                    step: 1e-6,
                    max_coords: 6,
                    abs_floor: 1e-5,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.passes(1e-3), "{:?}: {:?}", variant, r);
        }
    }
}
