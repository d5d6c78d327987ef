use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Real, Tensor};

fn same_shape<T: Real>(g: &Graph<'_, T>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(FobaError::ShapeMismatch(format!(
            "{op}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<'_, T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]),
        ))
    }

    /// Sum of several equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| FobaError::ShapeMismatch("add_n of nothing".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|args| {
                let ga = args.needs[0].then(|| args.grad.zip_map(args.inputs[1], |g, y| g * y));
                let gb = args.needs[1].then(|| args.grad.zip_map(args.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        ))
    }

    /// `x[b, c, h, w] * m[b, 0, h, w]`: a single-channel map gating every channel.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4();
        if self.shape(m) != [b, 1, h, w] {
            return Err(FobaError::ShapeMismatch(format!(
                "mul_spatial: mask {:?} for features {:?}",
                self.shape(m),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mv = self.value(m).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            let mrow = &mv[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for ((o, &xx), &mm) in out[off..off + hw].iter_mut().zip(&xv[off..off + hw]).zip(mrow) {
                    *o = xx * mm;
                }
            }
        }
        let v = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(
            v,
            &[x, m],
            Box::new(move |args| {
                let g = args.grad.data();
                let xv = args.inputs[0].data();
                let mv = args.inputs[1].data();
                let gx = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            for i in 0..hw {
                                d[off + i] = g[off + i] * mv[bi * hw + i];
                            }
                        }
                    }
                    Tensor::from_vec(&[b, c, h, w], d).unwrap()
                });
                let gm = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); b * hw];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            for i in 0..hw {
                                d[bi * hw + i] = d[bi * hw + i] + g[off + i] * xv[off + i];
                            }
                        }
                    }
                    Tensor::from_vec(&[b, 1, h, w], d).unwrap()
                });
                vec![gx, gm]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, &[x], Box::new(move |args| vec![Some(args.grad.map(|g| g * s))]))
    }

    /// `1 - x`, computed as a single rounding.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| T::one() - a);
        self.push(v, &[x], Box::new(|args| vec![Some(args.grad.map(|g| -g))]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(
            v,
            &[x],
            Box::new(|args| {
                vec![Some(args.grad.zip_map(args.inputs[0], |g, a| {
                    if a > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(
            v,
            &[x],
            Box::new(|args| vec![Some(args.grad.zip_map(args.out, |g, s| g * s * (T::one() - s)))]),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(
            v,
            &[x],
            Box::new(|args| vec![Some(args.grad.zip_map(args.inputs[0], |g, a| g * sigmoid(a)))]),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, &[x], Box::new(|args| vec![Some(args.grad.zip_map(args.out, |g, e| g * e))]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(
            v,
            &[x],
            Box::new(move |args| {
                vec![Some(args.grad.zip_map(args.inputs[0], |g, a| {
                    if a >= lo && a <= hi {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    /// `x / s` for a one-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(FobaError::ShapeMismatch(format!(
                "div_scalar: divisor has shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|a| a / sv);
        Ok(self.push(
            v,
            &[x, s],
            Box::new(|args| {
                let s = args.inputs[1].data()[0];
                let gx = args.needs[0].then(|| args.grad.map(|g| g / s));
                let gs = args.needs[1].then(|| {
                    let dot: T = args
                        .grad
                        .data()
                        .iter()
                        .zip(args.inputs[0].data())
                        .map(|(&g, &a)| g * a)
                        .sum();
                    Tensor::scalar(-dot / (s * s))
                });
                vec![gx, gs]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(
            v,
            &[x],
            Box::new(|args| {
                let g = args.grad.data()[0];
                vec![Some(Tensor::full(args.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// `Σ w_i · x_i` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let mut total = T::zero();
        let mut parents = Vec::with_capacity(terms.len());
        for &(w, x) in terms {
            if self.value(x).numel() != 1 {
                return Err(FobaError::ShapeMismatch("weighted_sum takes scalars".into()));
            }
            total = total + w * self.value(x).data()[0];
            parents.push(x);
        }
        let weights: Vec<T> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(total),
            &parents,
            Box::new(move |args| {
                let g = args.grad.data()[0];
                weights.iter().map(|&w| Some(Tensor::scalar(g * w))).collect()
            }),
        ))
    }

    /// Dot product with a constant tensor: a convenient scalar probe for gradient checks.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return Err(FobaError::ShapeMismatch(format!(
                "dot_const: {:?} vs {:?}",
                self.shape(x),
                w.shape()
            )));
        }
        let v: T = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let w = w.clone();
        Ok(self.push(
            Tensor::scalar(v),
            &[x],
            Box::new(move |args| {
                let g = args.grad.data()[0];
                vec![Some(w.map(|b| b * g))]
            }),
        ))
    }
}
