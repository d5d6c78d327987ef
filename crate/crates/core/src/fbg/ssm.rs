//! Mask-guided selective state-space block with a four-way 2-D scan.

use std::sync::Arc;

use rand::Rng;

use crate::error::{FobaError, Result};
use crate::fbg::attention::FeedForward;
use crate::nn::{Conv2d, ConvSpec, Graph, Init, LayerNorm, ParamBuilder, ParamId, Real, Var};

/// Number of scan orders.
pub const DIRECTIONS: usize = 4;

/// Pixel visiting orders of an `h x w` grid: row-major, reversed row-major,
/// column-major and reversed column-major. Entry `i` of an order is the
/// flat (row-major) index of the `i`-th visited pixel.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; DIRECTIONS] {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    let row_rev: Vec<usize> = row.iter().rev().copied().collect();
    let col_rev: Vec<usize> = col.iter().rev().copied().collect();
    [row, row_rev, col, col_rev]
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &pix) in order.iter().enumerate() {
        inv[pix] = pos;
    }
    inv
}

/// Rank of the low-rank step-size projection.
pub fn dt_rank(model_dim: usize) -> usize {
    model_dim.div_ceil(16)
}

/// Four-direction selective scan over `[B, E, H, W]` features with
/// per-direction parameters.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub channels: usize,
    pub state_dim: usize,
    pub rank: usize,
    /// Grouped (one group per direction) projections of the scanned input.
    pub x_to_dt: Conv2d,
    pub x_to_b: Conv2d,
    pub x_to_c: Conv2d,
    pub dt_proj: Conv2d,
    pub dt_bias: ParamId,
    /// `A = -exp(a_log)`, `[4, E, N]`
    pub a_log: ParamId,
    /// `[4, E]`
    pub skip: ParamId,
}

/// Scan inputs after projection, laid out for [`Graph::selective_scan`].
#[derive(Clone, Copy, Debug)]
pub struct Ss2dInputs {
    pub x: Var,
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub skip: Var,
}

impl Ss2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, state_dim: usize, rank: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        let k = DIRECTIONS;
        let grouped = ConvSpec::new(1, 0, k);
        let x_to_dt = Conv2d::new(&mut sub, "x_to_dt", k * channels, k * rank, 1, grouped, false)?;
        let x_to_b = Conv2d::new(&mut sub, "x_to_b", k * channels, k * state_dim, 1, grouped, false)?;
        let x_to_c = Conv2d::new(&mut sub, "x_to_c", k * channels, k * state_dim, 1, grouped, false)?;
        let dt_proj = Conv2d::new(&mut sub, "dt_proj", k * rank, k * channels, 1, grouped, false)?;
        // step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_bias_init: Vec<f64> = (0..k * channels)
            .map(|_| {
                let dt = sub.rng().random_range(lo..hi).exp().max(1e-4);
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_bias = sub.add("dt_bias", &[k * channels], Init::Values(dt_bias_init))?;
        let a_log_init: Vec<f64> = (0..k * channels)
            .flat_map(|_| (1..=state_dim).map(|s| (s as f64).ln()))
            .collect();
        let a_log = sub.add("a_log", &[k, channels, state_dim], Init::Values(a_log_init))?;
        let skip = sub.add("skip", &[k, channels], Init::Ones)?;
        Ok(Self {
            channels,
            state_dim,
            rank,
            x_to_dt,
            x_to_b,
            x_to_c,
            dt_proj,
            dt_bias,
            a_log,
            skip,
        })
    }

    /// Gathers the four scan sequences and projects them to the scan inputs.
    pub fn prepare<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Ss2dInputs> {
        let (b, e, h, w) = g.value(x).dims4();
        if e != self.channels {
            return Err(FobaError::ChannelMismatch(format!(
                "ss2d expects {} channels, got {}",
                self.channels, e
            )));
        }
        let (k, l, n) = (DIRECTIONS, h * w, self.state_dim);
        let mut seqs = Vec::with_capacity(k);
        for order in scan_orders(h, w) {
            seqs.push(g.gather_trailing(x, Arc::new(order))?);
        }
        let xs = g.concat_channels(&seqs)?;
        let xs4 = g.reshape(xs, &[b, k * e, l, 1])?;
        let dt = self.x_to_dt.forward(g, xs4)?;
        let dt_w = g.param(self.dt_proj.weight);
        let dt_b = g.param(self.dt_bias);
        let dt = g.conv2d(dt, dt_w, Some(dt_b), self.dt_proj.spec)?;
        let delta = g.softplus(dt);
        let bm = self.x_to_b.forward(g, xs4)?;
        let cm = self.x_to_c.forward(g, xs4)?;
        let a_log = g.param(self.a_log);
        let a = g.exp(a_log);
        let a = g.neg(a);
        Ok(Ss2dInputs {
            x: g.reshape(xs, &[b * k, e, l])?,
            delta: g.reshape(delta, &[b * k, e, l])?,
            a,
            b: g.reshape(bm, &[b * k, n, l])?,
            c: g.reshape(cm, &[b * k, n, l])?,
            skip: g.param(self.skip),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (b, e, h, w) = g.value(x).dims4();
        let inp = self.prepare(g, x)?;
        let y = g.selective_scan(inp.x, inp.delta, inp.a, inp.b, inp.c, inp.skip)?;
        let y = g.reshape(y, &[b, DIRECTIONS * e, h * w])?;
        let mut parts = Vec::with_capacity(DIRECTIONS);
        for (i, order) in scan_orders(h, w).iter().enumerate() {
            let yi = g.slice_channels(y, i * e, e)?;
            parts.push(g.gather_trailing(yi, Arc::new(inverse(order)))?);
        }
        let sum = g.add_n(&parts)?;
        g.reshape(sum, &[b, e, h, w])
    }
}

/// Mask-guided state-space block:
/// `y = f + out(ln(ss2d(dw(in(ln(f) ⊙ m)))) ⊙ gate(ln(f) ⊙ m))`, then a
/// residual feed-forward.
#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub norm: LayerNorm,
    pub in_proj: Conv2d,
    pub gate_proj: Conv2d,
    pub depthwise: Conv2d,
    pub ss2d: Ss2d,
    pub scan_norm: LayerNorm,
    pub out_proj: Conv2d,
    pub ffn: FeedForward,
    channels: usize,
}

/// Tensors exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct SsmTrace {
    pub masked: Var,
    pub scanned: Var,
    pub gate: Var,
    pub output: Var,
}

impl SsmBlock {
    /// Inner width is twice `c`.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, state_dim: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        let inner = 2 * c;
        Ok(Self {
            norm: LayerNorm::new(&mut sub, "norm", c)?,
            in_proj: Conv2d::pointwise(&mut sub, "in_proj", c, inner, true)?,
            gate_proj: Conv2d::pointwise(&mut sub, "gate_proj", c, inner, true)?,
            depthwise: Conv2d::depthwise(&mut sub, "depthwise", inner, true)?,
            ss2d: Ss2d::new(&mut sub, "ss2d", inner, state_dim, dt_rank(c))?,
            scan_norm: LayerNorm::new(&mut sub, "scan_norm", inner)?,
            out_proj: Conv2d::pointwise(&mut sub, "out_proj", inner, c, true)?,
            ffn: FeedForward::new(&mut sub, "ffn", c)?,
            channels: c,
        })
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, mask: Var) -> Result<SsmTrace> {
        let c = g.shape(f).get(1).copied().unwrap_or(0);
        if g.shape(f).len() != 4 || c != self.channels {
            return Err(FobaError::ChannelMismatch(format!(
                "ssm block expects {} channels, got {:?}",
                self.channels,
                g.shape(f)
            )));
        }
        let n = self.norm.forward(g, f)?;
        let masked = g.mul_spatial(n, mask)?;
        let x = self.in_proj.forward(g, masked)?;
        let x = self.depthwise.forward(g, x)?;
        let x = self.ss2d.forward(g, x)?;
        let scanned = self.scan_norm.forward(g, x)?;
        let gate = self.gate_proj.forward(g, masked)?;
        let fused = g.mul(scanned, gate)?;
        let y = self.out_proj.forward(g, fused)?;
        let y = g.add(y, f)?;
        let output = self.ffn.forward(g, y)?;
        Ok(SsmTrace {
            masked,
            scanned,
            gate,
            output,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, mask: Var) -> Result<Var> {
        Ok(self.trace(g, f, mask)?.output)
    }
}
