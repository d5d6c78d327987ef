use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::ops::shape::split_axis;
use crate::nn::tensor::{Real, Tensor};

/// Numerically stable softmax of a flat buffer along `axis` of `shape`.
pub fn softmax_along<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..n {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    out
}

impl<T: Real> Graph<'_, T> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(FobaError::ShapeMismatch(format!("softmax axis {} of {:?}", axis, shape)));
        }
        let out = softmax_along(self.value(x).data(), &shape, axis);
        let v = Tensor::from_vec(&shape, out)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        Ok(self.push(
            v,
            &[x],
            Box::new(move |args| {
                let y = args.out.data();
                let g = args.grad.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&shape, d).unwrap())]
            }),
        ))
    }
}
