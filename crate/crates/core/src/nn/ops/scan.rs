//! Fused selective state-space scan with a hand-written reverse pass.
//!
//! For every sequence `g` and channel `d` (parameter group `k = g % K`):
//!
//! ```text
//! h_t = exp(Δ_t A[k,d,:]) ⊙ h_{t-1} + Δ_t B_t x_t,     h_0 = 0
//! y_t = <C_t, h_t> + D[k,d] x_t
//! ```

use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Real, Tensor};

/// Sizes of a batched scan: `g` sequences of `d` channels and length `l`,
/// `n` states per channel, `k` parameter groups.
#[derive(Clone, Copy, Debug)]
struct ScanDims {
    g: usize,
    d: usize,
    l: usize,
    n: usize,
    k: usize,
}

struct ScanInputs<'a, T> {
    x: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    skip: &'a [T],
}

/// Returns `y` and, when `keep_states`, every hidden state laid out `[g, d, l, n]`.
fn scan_forward<T: Real>(dims: ScanDims, inp: &ScanInputs<'_, T>, keep_states: bool) -> (Vec<T>, Vec<T>) {
    let ScanDims { g, d, l, n, k } = dims;
    let mut y = vec![T::zero(); g * d * l];
    let mut states = if keep_states { vec![T::zero(); g * d * l * n] } else { Vec::new() };
    let mut h = vec![T::zero(); n];
    for gi in 0..g {
        let grp = gi % k;
        let bc_off = gi * n * l;
        for di in 0..d {
            let a_row = &inp.a[(grp * d + di) * n..(grp * d + di + 1) * n];
            let skip = inp.skip[grp * d + di];
            let seq = (gi * d + di) * l;
            h.iter_mut().for_each(|v| *v = T::zero());
            for t in 0..l {
                let dt = inp.delta[seq + t];
                let xt = inp.x[seq + t];
                let mut acc = T::zero();
                for s in 0..n {
                    let decay = (dt * a_row[s]).exp();
                    h[s] = decay * h[s] + dt * inp.b[bc_off + s * l + t] * xt;
                    acc = acc + inp.c[bc_off + s * l + t] * h[s];
                }
                y[seq + t] = acc + skip * xt;
                if keep_states {
                    let o = (seq + t) * n;
                    states[o..o + n].copy_from_slice(&h);
                }
            }
        }
    }
    (y, states)
}

struct ScanGrads<T> {
    x: Vec<T>,
    delta: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    skip: Vec<T>,
}

fn scan_backward<T: Real>(dims: ScanDims, inp: &ScanInputs<'_, T>, states: &[T], dy: &[T]) -> ScanGrads<T> {
    let ScanDims { g, d, l, n, k } = dims;
    let mut gr = ScanGrads {
        x: vec![T::zero(); g * d * l],
        delta: vec![T::zero(); g * d * l],
        a: vec![T::zero(); k * d * n],
        b: vec![T::zero(); g * n * l],
        c: vec![T::zero(); g * n * l],
        skip: vec![T::zero(); k * d],
    };
    // running dL/dh_t
    let mut gh = vec![T::zero(); n];
    for gi in 0..g {
        let grp = gi % k;
        let bc_off = gi * n * l;
        for di in 0..d {
            let ai = (grp * d + di) * n;
            let skip = inp.skip[grp * d + di];
            let seq = (gi * d + di) * l;
            gh.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..l).rev() {
                let dt = inp.delta[seq + t];
                let xt = inp.x[seq + t];
                let gyt = dy[seq + t];
                let h_t = &states[(seq + t) * n..(seq + t + 1) * n];
                let mut dx = gyt * skip;
                let mut ddt = T::zero();
                gr.skip[grp * d + di] = gr.skip[grp * d + di] + gyt * xt;
                for s in 0..n {
                    let bc = bc_off + s * l + t;
                    gr.c[bc] = gr.c[bc] + gyt * h_t[s];
                    let gs = gh[s] + gyt * inp.c[bc];
                    let a = inp.a[ai + s];
                    let decay = (dt * a).exp();
                    let h_prev = if t > 0 { states[(seq + t - 1) * n + s] } else { T::zero() };
                    // through the decay exp(Δ A)
                    let gdecay = gs * h_prev * decay;
                    ddt = ddt + gdecay * a;
                    gr.a[ai + s] = gr.a[ai + s] + gdecay * dt;
                    // through the input term Δ B x
                    let bv = inp.b[bc];
                    ddt = ddt + gs * bv * xt;
                    gr.b[bc] = gr.b[bc] + gs * dt * xt;
                    dx = dx + gs * dt * bv;
                    gh[s] = gs * decay;
                }
                gr.x[seq + t] = dx;
                gr.delta[seq + t] = ddt;
            }
        }
    }
    gr
}

fn check_dims<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    skip: &Tensor<T>,
) -> Result<ScanDims> {
    let err = || {
        FobaError::ShapeMismatch(format!(
            "selective scan: x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            x.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            skip.shape()
        ))
    };
    if x.rank() != 3 || a.rank() != 3 || b.rank() != 3 {
        return Err(err());
    }
    let (g, d, l) = x.dims3();
    let (k, ad, n) = a.dims3();
    if delta.shape() != x.shape()
        || ad != d
        || k == 0
        || g % k != 0
        || b.shape() != [g, n, l]
        || c.shape() != [g, n, l]
        || skip.shape() != [k, d]
        || l == 0
    {
        return Err(err());
    }
    Ok(ScanDims { g, d, l, n, k })
}

/// Single-sequence scan: `x`, `delta` are `[d, l]`, `a` is `[d, n]`, `b`, `c`
/// are `[n, l]` and `skip` is `[d]`. Returns `y` as `[d, l]`.
pub fn ssm_scan_1d<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let lift = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshaped(&s)
    };
    let (x3, d3, a3, b3, c3, s2) = (lift(x)?, lift(delta)?, lift(a)?, lift(b)?, lift(c)?, lift(skip)?);
    let dims = check_dims(&x3, &d3, &a3, &b3, &c3, &s2)?;
    let inp = ScanInputs {
        x: x3.data(),
        delta: d3.data(),
        a: a3.data(),
        b: b3.data(),
        c: c3.data(),
        skip: s2.data(),
    };
    let (y, _) = scan_forward(dims, &inp, false);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FobaError::NonFiniteState);
    }
    Tensor::from_vec(x.shape(), y)
}

impl<T: Real> Graph<'_, T> {
    /// Batched selective scan.
    ///
    /// `x`, `delta`: `[G, D, L]`; `a`: `[K, D, N]`; `b`, `c`: `[G, N, L]`;
    /// `skip`: `[K, D]`. Sequence `g` uses parameter group `g % K`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, skip: Var) -> Result<Var> {
        let dims = check_dims(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(skip),
        )?;
        let (y, states) = {
            let inp = ScanInputs {
                x: self.value(x).data(),
                delta: self.value(delta).data(),
                a: self.value(a).data(),
                b: self.value(b).data(),
                c: self.value(c).data(),
                skip: self.value(skip).data(),
            };
            scan_forward(dims, &inp, true)
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FobaError::NonFiniteState);
        }
        let v = Tensor::from_vec(&[dims.g, dims.d, dims.l], y)?;
        Ok(self.push(
            v,
            &[x, delta, a, b, c, skip],
            Box::new(move |args| {
                let inp = ScanInputs {
                    x: args.inputs[0].data(),
                    delta: args.inputs[1].data(),
                    a: args.inputs[2].data(),
                    b: args.inputs[3].data(),
                    c: args.inputs[4].data(),
                    skip: args.inputs[5].data(),
                };
                let gr = scan_backward(dims, &inp, &states, args.grad.data());
                let wrap = |data: Vec<T>, i: usize| {
                    args.needs[i].then(|| Tensor::from_vec(args.inputs[i].shape(), data).unwrap())
                };
                vec![
                    wrap(gr.x, 0),
                    wrap(gr.delta, 1),
                    wrap(gr.a, 2),
                    wrap(gr.b, 3),
                    wrap(gr.c, 4),
                    wrap(gr.skip, 5),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Unrolled closed form: `y_t = sum_{s<=t} <C_t, prod_{s<r<=t} exp(Δ_r A) Δ_s B_s x_s> + D x_t`.
    fn unrolled(x: &Tensor<f64>, dt: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, skip: &Tensor<f64>) -> Vec<f64> {
        let (d, l) = (x.shape()[0], x.shape()[1]);
        let n = a.shape()[1];
        let mut y = vec![0.0; d * l];
        for di in 0..d {
            for t in 0..l {
                let mut acc = skip.data()[di] * x.data()[di * l + t];
                for s in 0..=t {
                    for st in 0..n {
                        let mut decay = 0.0;
                        for r in s + 1..=t {
                            decay += dt.data()[di * l + r] * a.data()[di * n + st];
                        }
                        acc += c.data()[st * l + t]
                            * decay.exp()
                            * dt.data()[di * l + s]
                            * b.data()[st * l + s]
                            * x.data()[di * l + s];
                    }
                }
                y[di * l + t] = acc;
            }
        }
        y
    }

    #[test]
    fn matches_unrolled_recurrence() {
        for seed in 0..4 {
            let (d, l, n) = (3, 7, 4);
            let x = rand_t(&[d, l], -1.0, 1.0, seed);
            let dt = rand_t(&[d, l], 0.01, 0.5, seed + 10);
            let a = rand_t(&[d, n], -3.0, -0.1, seed + 20);
            let b = rand_t(&[n, l], -1.0, 1.0, seed + 30);
            let c = rand_t(&[n, l], -1.0, 1.0, seed + 40);
            let skip = rand_t(&[d], -1.0, 1.0, seed + 50);
            let y = ssm_scan_1d(&x, &dt, &a, &b, &c, &skip).unwrap();
            let want = unrolled(&x, &dt, &a, &b, &c, &skip);
            for (u, v) in y.data().iter().zip(&want) {
                assert!((u - v).abs() < 1e-12, "{} vs {}", u, v);
            }
        }
    }

    #[test]
    fn single_step_and_fast_decay() {
        let x = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let dt = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let a = Tensor::from_vec(&[1, 2], vec![-1.0, -2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![0.3, -0.7]).unwrap();
        let c = Tensor::from_vec(&[2, 1], vec![1.5, 0.25]).unwrap();
        let skip = Tensor::from_vec(&[1], vec![0.1]).unwrap();
        let y = ssm_scan_1d(&x, &dt, &a, &b, &c, &skip).unwrap();
        let want: f64 = 0.5 * 2.0 * (1.5 * 0.3 + 0.25 * -0.7) + 0.1 * 2.0;
        assert!((y.data()[0] - want).abs() < 1e-15);

        // with A very negative the state forgets everything but the current input
        let l = 5;
        let x = rand_t(&[1, l], -1.0, 1.0, 1);
        let dt = Tensor::full(&[1, l], 1.0);
        let a = Tensor::full(&[1, 2], -1e4);
        let b = rand_t(&[2, l], -1.0, 1.0, 2);
        let c = rand_t(&[2, l], -1.0, 1.0, 3);
        let skip = Tensor::zeros(&[1]);
        let y = ssm_scan_1d(&x, &dt, &a, &b, &c, &skip).unwrap();
        for t in 0..l {
            let local: f64 = (0..2).map(|s| c.data()[s * l + t] * b.data()[s * l + t]).sum::<f64>() * x.data()[t];
            assert!((y.data()[t] - local).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_overflow() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let bad = Tensor::<f64>::zeros(&[2, 4]);
        let a = Tensor::zeros(&[2, 1]);
        let bc = Tensor::zeros(&[1, 3]);
        let skip = Tensor::zeros(&[2]);
        assert!(matches!(ssm_scan_1d(&x, &bad, &a, &bc, &bc, &skip), Err(FobaError::ShapeMismatch(_))));
        let x = Tensor::full(&[1, 2], 1.0);
        let dt = Tensor::full(&[1, 2], 1.0);
        let a = Tensor::full(&[1, 1], 800.0);
        let bc = Tensor::full(&[1, 2], 1.0);
        let skip = Tensor::zeros(&[1]);
        assert!(matches!(ssm_scan_1d(&x, &dt, &a, &bc, &bc, &skip), Err(FobaError::NonFiniteState)));
    }

    #[test]
    fn batched_scan_gradients() {
        let (gs, d, l, n, k) = (4, 3, 6, 2, 2);
        for seed in 0..5 {
            let inputs = vec![
                rand_t(&[gs, d, l], -1.0, 1.0, seed),
                rand_t(&[gs, d, l], 0.05, 0.8, seed + 1),
                rand_t(&[k, d, n], -2.0, -0.2, seed + 2),
                rand_t(&[gs, n, l], -1.0, 1.0, seed + 3),
                rand_t(&[gs, n, l], -1.0, 1.0, seed + 4),
                rand_t(&[k, d], -1.0, 1.0, seed + 5),
            ];
            let probe = rand_t(&[gs, d, l], -1.0, 1.0, seed + 6);
            let r = grad_check(
                |g, v| {
                    let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
                    g.dot_const(y, &probe)
                },
                &inputs,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.passes(1e-6), "{:?}", r);
        }
    }

    #[test]
    fn batched_groups_match_single_sequences() {
        let (gs, d, l, n, k) = (4, 2, 5, 3, 2);
        let x = rand_t(&[gs, d, l], -1.0, 1.0, 7);
        let dt = rand_t(&[gs, d, l], 0.05, 0.8, 8);
        let a = rand_t(&[k, d, n], -2.0, -0.2, 9);
        let b = rand_t(&[gs, n, l], -1.0, 1.0, 10);
        let c = rand_t(&[gs, n, l], -1.0, 1.0, 11);
        let skip = rand_t(&[k, d], -1.0, 1.0, 12);
        let mut g = Graph::new();
        let vars: Vec<Var> = [&x, &dt, &a, &b, &c, &skip].iter().map(|t| g.constant((*t).clone())).collect();
        let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]).unwrap();
        let y = g.value(y).clone();
        for gi in 0..gs {
            let grp = gi % k;
            let part = |t: &Tensor<f64>, i: usize, shape: &[usize]| {
                let sz: usize = shape.iter().product();
                Tensor::from_vec(shape, t.data()[i * sz..(i + 1) * sz].to_vec()).unwrap()
            };
            let yi = ssm_scan_1d(
                &part(&x, gi, &[d, l]),
                &part(&dt, gi, &[d, l]),
                &part(&a, grp, &[d, n]),
                &part(&b, gi, &[n, l]),
                &part(&c, gi, &[n, l]),
                &part(&skip, grp, &[d]),
            )
            .unwrap();
            assert_eq!(&y.data()[gi * d * l..(gi + 1) * d * l], yi.data());
        }
    }
}
