use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Largest divisor of `channels` that does not exceed `requested`.
pub fn effective_groups(channels: usize, requested: usize) -> usize {
    (1..=requested.min(channels).max(1))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

fn check_affine<T: Real>(g: &Graph<'_, T>, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(FobaError::ChannelMismatch(format!(
            "norm affine {:?}/{:?} for {} channels",
            g.shape(gamma),
            g.shape(beta),
            c
        )));
    }
    Ok(())
}

/// Standardised values plus the inverse standard deviation of each set.
/// A set is addressed through `idx(set, j)`, the flat index of its `j`-th element.
struct Normalized<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn normalize<T: Real>(x: &[T], sets: usize, n: usize, idx: impl Fn(usize, usize) -> usize, eps: T) -> Normalized<T> {
    let nf = T::from_usize(n).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); sets];
    for s in 0..sets {
        let mean = (0..n).map(|j| x[idx(s, j)]).sum::<T>() / nf;
        let var = (0..n)
            .map(|j| {
                let d = x[idx(s, j)] - mean;
                d * d
            })
            .sum::<T>()
            / nf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[s] = inv;
        for j in 0..n {
            let i = idx(s, j);
            xhat[i] = (x[i] - mean) * inv;
        }
    }
    Normalized { xhat, inv_std }
}

/// Gradient of the normalisation itself given `dxhat`.
fn normalize_backward<T: Real>(
    dxhat: &[T],
    norm: &Normalized<T>,
    sets: usize,
    n: usize,
    idx: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let nf = T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); dxhat.len()];
    for s in 0..sets {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..n {
            let i = idx(s, j);
            sum_d = sum_d + dxhat[i];
            sum_dx = sum_dx + dxhat[i] * norm.xhat[i];
        }
        let scale = norm.inv_std[s] / nf;
        for j in 0..n {
            let i = idx(s, j);
            dx[i] = scale * (nf * dxhat[i] - sum_d - norm.xhat[i] * sum_dx);
        }
    }
    dx
}

impl<T: Real> Graph<'_, T> {
    /// Group normalisation over `[b, c, h, w]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4();
        check_affine(self, gamma, beta, c)?;
        if groups == 0 || c % groups != 0 {
            return Err(FobaError::GroupMismatch(format!("{} groups for {} channels", groups, c)));
        }
        let hw = h * w;
        let n = c / groups * hw;
        let sets = b * groups;
        // groups are contiguous in memory
        let idx = move |s: usize, j: usize| s * n + j;
        let norm = normalize(self.value(x).data(), sets, n, idx, T::from_f64_lossy(eps));
        let out = affine(&norm.xhat, self.value(gamma).data(), self.value(beta).data(), b, c, hw);
        let v = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(
            v,
            &[x, gamma, beta],
            Box::new(move |args| {
                let (dxhat, dgamma, dbeta) = affine_backward(args.grad.data(), &norm.xhat, args.inputs[1].data(), b, c, hw);
                let dx = args.needs[0].then(|| {
                    Tensor::from_vec(&[b, c, h, w], normalize_backward(&dxhat, &norm, sets, n, idx)).unwrap()
                });
                vec![
                    dx,
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        ))
    }

    /// Layer normalisation across channels at every pixel of `[b, c, h, w]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4();
        check_affine(self, gamma, beta, c)?;
        let hw = h * w;
        let sets = b * hw;
        let idx = move |s: usize, j: usize| (s / hw * c + j) * hw + s % hw;
        let norm = normalize(self.value(x).data(), sets, c, idx, T::from_f64_lossy(eps));
        let out = affine(&norm.xhat, self.value(gamma).data(), self.value(beta).data(), b, c, hw);
        let v = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(
            v,
            &[x, gamma, beta],
            Box::new(move |args| {
                let (dxhat, dgamma, dbeta) = affine_backward(args.grad.data(), &norm.xhat, args.inputs[1].data(), b, c, hw);
                let dx = args.needs[0].then(|| {
                    Tensor::from_vec(&[b, c, h, w], normalize_backward(&dxhat, &norm, sets, c, idx)).unwrap()
                });
                vec![
                    dx,
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        ))
    }
}

fn affine<T: Real>(xhat: &[T], gamma: &[T], beta: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); xhat.len()];
    for bi in 0..b {
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            for i in o..o + hw {
                out[i] = xhat[i] * gamma[ci] + beta[ci];
            }
        }
    }
    out
}

fn affine_backward<T: Real>(dy: &[T], xhat: &[T], gamma: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dxhat = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            for i in o..o + hw {
                dxhat[i] = dy[i] * gamma[ci];
                dgamma[ci] = dgamma[ci] + dy[i] * xhat[i];
                dbeta[ci] = dbeta[ci] + dy[i];
            }
        }
    }
    (dxhat, dgamma, dbeta)
}
