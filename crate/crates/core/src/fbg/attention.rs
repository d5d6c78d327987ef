//! Mask-guided self-attention over the pixels of one feature map.

use crate::error::{FobaError, Result};
use crate::nn::{Conv2d, Graph, Init, LayerNorm, ParamBuilder, ParamId, Real, Var};

/// Token-major view of an attention result.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, d, L]`
    pub out: Var,
    /// Row-stochastic weights `[B, L, L]`; row `i` attends over keys.
    pub weights: Var,
}

/// `softmax((Q ⊙ m)ᵀ (K ⊙ m) / alpha) V` with channel-first tokens:
/// `q`, `k`, `v` are `[B, d, L]`, `m` is `[B, 1, L]` and `alpha` is a
/// one-element positive tensor.
pub fn masked_attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    m: Var,
    alpha: Var,
) -> Result<AttentionOutput> {
    let (b, d, l) = g.value(q).dims3();
    if g.shape(k) != [b, d, l] || g.shape(v).len() != 3 || g.shape(v)[0] != b || g.shape(v)[2] != l {
        return Err(FobaError::ShapeMismatch(format!(
            "attention q {:?} k {:?} v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    if g.shape(m) != [b, 1, l] {
        return Err(FobaError::ShapeMismatch(format!("attention mask {:?} for {} tokens", g.shape(m), l)));
    }
    let m4 = g.reshape(m, &[b, 1, l, 1])?;
    let q4 = g.reshape(q, &[b, d, l, 1])?;
    let k4 = g.reshape(k, &[b, d, l, 1])?;
    let qm = g.mul_spatial(q4, m4)?;
    let km = g.mul_spatial(k4, m4)?;
    let qm = g.reshape(qm, &[b, d, l])?;
    let km = g.reshape(km, &[b, d, l])?;
    let logits = g.bmm(qm, km, true, false)?;
    let logits = g.div_scalar(logits, alpha)?;
    if !g.value(logits).all_finite() {
        return Err(FobaError::NonFiniteAttention);
    }
    let weights = g.softmax(logits, 2)?;
    let out = g.bmm(v, weights, false, true)?;
    Ok(AttentionOutput { out, weights })
}

/// Two pointwise convolutions with a ReLU in between, widening by 2.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub expand: Conv2d,
    pub project: Conv2d,
}

impl FeedForward {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            norm: LayerNorm::new(&mut sub, "norm", c)?,
            expand: Conv2d::pointwise(&mut sub, "expand", c, 2 * c, true)?,
            project: Conv2d::pointwise(&mut sub, "project", 2 * c, c, true)?,
        })
    }

    /// `project(relu(expand(ln(y))))` without the residual.
    pub fn branch<T: Real>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        let h = self.norm.forward(g, y)?;
        let h = self.expand.forward(g, h)?;
        let h = g.relu(h);
        self.project.forward(g, h)
    }

    /// `y + branch(y)`
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        let h = self.branch(g, y)?;
        g.add(h, y)
    }
}

/// Attention block guided by a single-channel mask.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub qkv: Conv2d,
    pub qkv_depthwise: Conv2d,
    /// `alpha = exp(log_alpha)`
    pub log_alpha: ParamId,
    pub out_proj: Conv2d,
    pub ffn: FeedForward,
    channels: usize,
}

/// Tensors exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub attention: AttentionOutput,
    pub output: Var,
}

impl AttentionBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            norm: LayerNorm::new(&mut sub, "norm", c)?,
            qkv: Conv2d::pointwise(&mut sub, "qkv", c, 3 * c, true)?,
            qkv_depthwise: Conv2d::depthwise(&mut sub, "qkv_depthwise", 3 * c, false)?,
            log_alpha: sub.add("log_alpha", &[1], Init::Constant(0.5 * (c as f64).ln()))?,
            out_proj: Conv2d::pointwise(&mut sub, "out_proj", c, c, true)?,
            ffn: FeedForward::new(&mut sub, "ffn", c)?,
            channels: c,
        })
    }

    /// Layer-normalised input projected to `Q, K, V`, each `[B, d, L]`.
    pub fn qkv_project<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<(Var, Var, Var)> {
        let shape = g.shape(f).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(FobaError::ChannelMismatch(format!(
                "attention block expects {} channels, got {:?}",
                self.channels, shape
            )));
        }
        let (b, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.norm.forward(g, f)?;
        let x = self.qkv.forward(g, x)?;
        let x = self.qkv_depthwise.forward(g, x)?;
        let x = g.reshape(x, &[b, 3 * c, l])?;
        let q = g.slice_channels(x, 0, c)?;
        let k = g.slice_channels(x, c, c)?;
        let v = g.slice_channels(x, 2 * c, c)?;
        Ok((q, k, v))
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, mask: Var) -> Result<AttentionTrace> {
        let (q, k, v) = self.qkv_project(g, f)?;
        let (b, c, h, w) = g.value(f).dims4();
        let m = g.reshape(mask, &[b, 1, h * w])?;
        let la = g.param(self.log_alpha);
        let alpha = g.exp(la);
        let attention = masked_attention(g, q, k, v, m, alpha)?;
        let a = g.reshape(attention.out, &[b, c, h, w])?;
        let a = self.out_proj.forward(g, a)?;
        let y = g.add(a, f)?;
        let output = self.ffn.forward(g, y)?;
        Ok(AttentionTrace {
            q,
            k,
            v,
            attention,
            output,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, mask: Var) -> Result<Var> {
        Ok(self.trace(g, f, mask)?.output)
    }
}
