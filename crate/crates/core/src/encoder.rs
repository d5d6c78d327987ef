//! Four-stage convolutional image encoder producing features at strides 4 to 32.

use crate::config::EncoderConfig;
use crate::error::{FobaError, Result};
use crate::nn::{Conv2d, ConvSpec, Graph, GroupNorm, ParamBuilder, Real, Var};
use crate::types::{FeatureMap, FeaturePyramid, SIZE_MULTIPLE};

/// Anything that maps an image batch `[B, C, H, W]` to a four-stage pyramid.
pub trait Backbone {
    /// Channel widths of the four stages.
    fn dims(&self) -> [usize; 4];

    fn encode<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<FeaturePyramid>;
}

/// `x + conv(relu(gn(conv(x))))`
#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
}

impl ResidualUnit {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, gn_groups: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            conv1: Conv2d::new(&mut sub, "conv1", c, c, 3, ConvSpec::same(3), false)?,
            norm: GroupNorm::new(&mut sub, "norm", c, gn_groups)?,
            conv2: Conv2d::new(&mut sub, "conv2", c, c, 3, ConvSpec::same(3), true)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Strided convolution followed by group normalisation.
#[derive(Clone, Debug)]
struct Downsample {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Downsample {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, gn_groups: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            conv: Conv2d::new(&mut sub, "conv", cin, cout, k, ConvSpec::new(k, 0, 1), false)?,
            norm: GroupNorm::new(&mut sub, "norm", cout, gn_groups)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        self.norm.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    dims: [usize; 4],
    in_channels: usize,
    /// Stem (4x4 patchify) for stage 0, 2x2 stride-2 reductions afterwards.
    downs: Vec<Downsample>,
    stages: Vec<Vec<ResidualUnit>>,
}

impl Encoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig, in_channels: usize, gn_groups: usize) -> Result<Self> {
        let mut downs = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        for (i, &d) in cfg.dims.iter().enumerate() {
            let mut stage = pb.sub(&format!("stage{}", i + 1));
            downs.push(if i == 0 {
                Downsample::new(&mut stage, "stem", in_channels, d, 4, gn_groups)?
            } else {
                Downsample::new(&mut stage, "down", cfg.dims[i - 1], d, 2, gn_groups)?
            });
            let units = (0..cfg.blocks_per_stage)
                .map(|u| ResidualUnit::new(&mut stage, &format!("unit{}", u), d, gn_groups))
                .collect::<Result<Vec<_>>>()?;
            stages.push(units);
        }
        Ok(Self {
            dims: cfg.dims,
            in_channels,
            downs,
            stages,
        })
    }
}

impl Backbone for Encoder {
    fn dims(&self) -> [usize; 4] {
        self.dims
    }

    fn encode<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(FobaError::ShapeMismatch(format!(
                "encoder expects [B, {}, H, W], got {:?}",
                self.in_channels, shape
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(FobaError::ShapeMismatch(format!(
                "input {}x{} is not a positive multiple of {}",
                h, w, SIZE_MULTIPLE
            )));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(4);
        for (i, (down, units)) in self.downs.iter().zip(&self.stages).enumerate() {
            x = down.forward(g, x)?;
            for u in units {
                x = u.forward(g, x)?;
            }
            out.push(FeatureMap {
                var: x,
                scale: FeaturePyramid::SCALES[i],
            });
        }
        let stages: [FeatureMap; 4] = out.try_into().expect("four stages");
        FeaturePyramid::new(g, stages, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &EncoderConfig, zero: bool) -> (ParamStore<f32>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut store, &mut rng).zero_init(zero);
        let enc = Encoder::new(&mut pb, cfg, 3, 8).unwrap();
        (store, enc)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::from_vec(&[1, 3, h, w], (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn desk_pyramid_shapes() {
        let (store, enc) = build(&EncoderConfig::default(), false);
        let mut g = Graph::with_params(&store);
        let x = g.constant(image(64, 64, 1));
        let p = enc.encode(&mut g, x).unwrap();
        let shapes: Vec<Vec<usize>> = p.stages().iter().map(|s| g.shape(s.var).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 128, 4, 4], vec![1, 256, 2, 2]]
        );
        assert!(p.stages().iter().all(|s| g.value(s.var).all_finite()));
    }

    #[test]
    fn wide_first_stage_shape() {
        let cfg = EncoderConfig {
            dims: [128, 256, 512, 1024],
            ..EncoderConfig::default()
        };
        let (store, enc) = build(&cfg, true);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 256, 256]));
        let p = enc.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(p.stage(0).var), &[1, 128, 64, 64]);
        assert_eq!(g.shape(p.stage(3).var), &[1, 1024, 8, 8]);
    }

    #[test]
    fn zero_image_zero_init_is_finite() {
        let (store, enc) = build(&EncoderConfig::default(), true);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let p = enc.encode(&mut g, x).unwrap();
        assert!(p.stages().iter().all(|s| g.value(s.var).all_finite()));
    }

    #[test]
    fn siamese_encoding_is_bit_identical() {
        let (store, enc) = build(&EncoderConfig::default(), false);
        let img = image(32, 64, 9);
        let mut g = Graph::with_params(&store);
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let pa = enc.encode(&mut g, a).unwrap();
        let pb = enc.encode(&mut g, b).unwrap();
        for (x, y) in pa.stages().iter().zip(pb.stages()) {
            assert_eq!(g.value(x.var), g.value(y.var));
        }
    }

    #[test]
    fn rejects_sizes_off_the_grid() {
        let (store, enc) = build(&EncoderConfig::default(), false);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 60, 64]));
        assert!(matches!(enc.encode(&mut g, x), Err(FobaError::ShapeMismatch(_))));
    }
}
