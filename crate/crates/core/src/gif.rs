//! Gated interaction fusion of the two temporal feature maps of one stage.
//!
//! Each direction enhances its own features with two bottleneck blocks,
//! gates them with a bottleneck view of the other date, refines the
//! product and adds it back to the input. The two directions are
//! concatenated along channels.

use crate::error::{FobaError, Result};
use crate::nn::{Conv2d, Graph, GroupNorm, ParamBuilder, Real, Var};

/// `relu(gn(up(depthwise(down(x)))))` with a `c / r` bottleneck and no biases.
#[derive(Clone, Debug)]
pub struct GifBlock {
    pub down: Conv2d,
    pub depthwise: Conv2d,
    pub up: Conv2d,
    pub norm: GroupNorm,
    channels: usize,
}

impl GifBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, ratio: usize, gn_groups: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(FobaError::ChannelMismatch(format!(
                "bottleneck ratio {} does not divide {} channels",
                ratio, channels
            )));
        }
        let mid = channels / ratio;
        let mut sub = pb.sub(name);
        Ok(Self {
            down: Conv2d::pointwise(&mut sub, "down", channels, mid, false)?,
            depthwise: Conv2d::depthwise(&mut sub, "depthwise", mid, false)?,
            up: Conv2d::pointwise(&mut sub, "up", mid, channels, false)?,
            norm: GroupNorm::new(&mut sub, "norm", channels, gn_groups)?,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(FobaError::ChannelMismatch(format!(
                "gif block expects {} channels, got {}",
                self.channels, c
            )));
        }
        let h = self.down.forward(g, x)?;
        let h = self.depthwise.forward(g, h)?;
        let h = self.up.forward(g, h)?;
        let h = self.norm.forward(g, h)?;
        Ok(g.relu(h))
    }
}

/// One guidance direction: features of `primary` gated by `guide`.
#[derive(Clone, Debug)]
pub struct GifDirection {
    pub enhance1: GifBlock,
    pub enhance2: GifBlock,
    pub gate: GifBlock,
    pub refine: GifBlock,
}

/// Intermediate tensors of one direction.
#[derive(Clone, Copy, Debug)]
pub struct GifTrace {
    pub enhanced: Var,
    pub gate: Var,
    pub fused: Var,
    pub output: Var,
}

impl GifDirection {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, ratio: usize, gn_groups: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            enhance1: GifBlock::new(&mut sub, "enhance1", channels, ratio, gn_groups)?,
            enhance2: GifBlock::new(&mut sub, "enhance2", channels, ratio, gn_groups)?,
            gate: GifBlock::new(&mut sub, "gate", channels, ratio, gn_groups)?,
            refine: GifBlock::new(&mut sub, "refine", channels, ratio, gn_groups)?,
        })
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, primary: Var, guide: Var) -> Result<GifTrace> {
        if g.shape(primary) != g.shape(guide) {
            return Err(FobaError::ShapeMismatch(format!(
                "gif inputs {:?} and {:?}",
                g.shape(primary),
                g.shape(guide)
            )));
        }
        let e = self.enhance1.forward(g, primary)?;
        let enhanced = self.enhance2.forward(g, e)?;
        let gate = self.gate.forward(g, guide)?;
        let fused = g.mul(enhanced, gate)?;
        let refined = self.refine.forward(g, fused)?;
        let output = g.add(refined, primary)?;
        Ok(GifTrace {
            enhanced,
            gate,
            fused,
            output,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, primary: Var, guide: Var) -> Result<Var> {
        Ok(self.trace(g, primary, guide)?.output)
    }
}

/// Both directions with independent weights.
#[derive(Clone, Debug)]
pub struct GifModule {
    pub forward_dir: GifDirection,
    pub backward_dir: GifDirection,
}

impl GifModule {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, ratio: usize, gn_groups: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            forward_dir: GifDirection::new(&mut sub, "t1_to_t2", channels, ratio, gn_groups)?,
            backward_dir: GifDirection::new(&mut sub, "t2_to_t1", channels, ratio, gn_groups)?,
        })
    }

    /// `[dir1(i1, i2); dir2(i2, i1)]`, `2C` channels.
    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, i1: Var, i2: Var) -> Result<Var> {
        let a = self.forward_dir.forward(g, i1, i2)?;
        let b = self.backward_dir.forward(g, i2, i1)?;
        g.concat_channels(&[a, b])
    }
}

/// Parameter-free fusion: plain channel concatenation.
pub fn gif_bypass<T: Real>(g: &mut Graph<'_, T>, i1: Var, i2: Var) -> Result<Var> {
    if g.shape(i1) != g.shape(i2) {
        return Err(FobaError::ShapeMismatch(format!(
            "bypass inputs {:?} and {:?}",
            g.shape(i1),
            g.shape(i2)
        )));
    }
    g.concat_channels(&[i1, i2])
}
