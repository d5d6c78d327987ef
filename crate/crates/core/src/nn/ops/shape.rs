use std::sync::Arc;

use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Real, Tensor};

/// `(outer, axis, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<'_, T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |args| vec![Some(args.grad.clone().reshaped(&old).unwrap())]),
        ))
    }

    /// Concatenate along axis 1.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| FobaError::ShapeMismatch("concat of nothing".into()))?)
            .to_vec();
        if first.len() < 2 {
            return Err(FobaError::ShapeMismatch("concat needs rank >= 2".into()));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(FobaError::ShapeMismatch(format!("concat: {:?} vs {:?}", first, s)));
            }
            widths.push(s[1]);
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let v = Tensor::from_vec(&shape, out)?;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x).to_vec()).collect();
        Ok(self.push(
            v,
            xs,
            Box::new(move |args| {
                let g = args.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if args.needs[i] {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + w * inner]);
                        }
                        grads.push(Some(Tensor::from_vec(&shapes[i], d).unwrap()));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(FobaError::ShapeMismatch(format!(
                "slice {}..{} of {:?}",
                start,
                start + len,
                shape
            )));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * c + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = len;
        let v = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut d = vec![T::zero(); outer * c * inner];
                for o in 0..outer {
                    let s = (o * c + start) * inner;
                    d[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_vec(&shape, d).unwrap())]
            }),
        ))
    }

    /// Reorders the flattened trailing axes: for `x` of shape `[b, c, ...rest]`
    /// returns `[b, c, L]` with `out[.., .., i] = flat(x)[.., .., index[i]]`.
    pub fn gather_trailing(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(FobaError::ShapeMismatch("gather needs rank >= 2".into()));
        }
        let rows = shape[0] * shape[1];
        let len: usize = shape[2..].iter().product();
        if index.iter().any(|&i| i >= len) {
            return Err(FobaError::ShapeMismatch("gather index out of range".into()));
        }
        let l = index.len();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * l);
        for r in 0..rows {
            let row = &d[r * len..(r + 1) * len];
            out.extend(index.iter().map(|&i| row[i]));
        }
        let v = Tensor::from_vec(&[shape[0], shape[1], l], out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut d = vec![T::zero(); rows * len];
                for r in 0..rows {
                    for (j, &i) in index.iter().enumerate() {
                        d[r * len + i] = d[r * len + i] + g[r * l + j];
                    }
                }
                vec![Some(Tensor::from_vec(&shape, d).unwrap())]
            }),
        ))
    }
}
