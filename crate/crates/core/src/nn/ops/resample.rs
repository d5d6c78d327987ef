use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Real, Tensor};

/// Source taps for half-pixel-centred bilinear resampling along one axis.
fn taps<T: Real>(n_in: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = factor as f64;
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::from_f64_lossy(src - i0 as f64))
        })
        .collect()
}

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    // exact on constant inputs
    a + t * (b - a)
}

impl<T: Real> Graph<'_, T> {
    /// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4();
        if factor == 0 {
            return Err(FobaError::ShapeMismatch("upsample factor 0".into()));
        }
        if factor == 1 {
            return self.reshape(x, &[b, c, h, w]);
        }
        let (ho, wo) = (h * factor, w * factor);
        let ty = taps::<T>(h, factor);
        let tx = taps::<T>(w, factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = lerp(src[y0 * w + x0], src[y0 * w + x1], lx);
                    let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], lx);
                    dst[oy * wo + ox] = lerp(top, bot, ly);
                }
            }
        }
        let v = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut d = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dp = &mut d[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let gv = gp[oy * wo + ox];
                            let gt = gv * (T::one() - ly);
                            let gb = gv * ly;
                            dp[y0 * w + x0] = dp[y0 * w + x0] + gt * (T::one() - lx);
                            dp[y0 * w + x1] = dp[y0 * w + x1] + gt * lx;
                            dp[y1 * w + x0] = dp[y1 * w + x0] + gb * (T::one() - lx);
                            dp[y1 * w + x1] = dp[y1 * w + x1] + gb * lx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], d).unwrap())]
            }),
        ))
    }

    /// Non-overlapping `factor x factor` max pooling.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(FobaError::ShapeMismatch(format!("max_pool {} on {}x{}", factor, h, w)));
        }
        let (ho, wo) = (h / factor, w / factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for p in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = p * h * w + oy * factor * w + ox * factor;
                    for ky in 0..factor {
                        for kx in 0..factor {
                            let i = p * h * w + (oy * factor + ky) * w + ox * factor + kx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = xv[best];
                    arg[o] = best;
                }
            }
        }
        let v = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |args| {
                let mut d = vec![T::zero(); b * c * h * w];
                for (o, &i) in arg.iter().enumerate() {
                    d[i] = d[i] + args.grad.data()[o];
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], d).unwrap())]
            }),
        ))
    }
}
