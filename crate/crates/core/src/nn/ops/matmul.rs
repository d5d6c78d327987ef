use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Real, Tensor};

/// Row/column strides of a row-major `[rows, cols]` matrix, optionally transposed.
fn strides(rows: usize, cols: usize, transposed: bool) -> (usize, usize, isize, isize) {
    if transposed {
        (cols, rows, 1, cols as isize)
    } else {
        (rows, cols, cols as isize, 1)
    }
}

#[allow(clippy::too_many_arguments)]
fn batched<T: Real>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    batch: usize,
    c: &mut [T],
    beta: T,
) {
    let (m, k, rsa, csa) = strides(ar, ac, ta);
    let (_, n, rsb, csb) = strides(br, bc, tb);
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * ar * ac..(i + 1) * ar * ac],
            rsa,
            csa,
            &b[i * br * bc..(i + 1) * br * bc],
            rsb,
            csb,
            beta,
            &mut c[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
}

impl<T: Real> Graph<'_, T> {
    /// Batched matrix product of rank-3 tensors, `op(a) @ op(b)` where `op`
    /// optionally transposes the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (na, ar, ac) = self.value(a).dims3();
        let (nb, br, bc) = self.value(b).dims3();
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if na != nb || k != k2 {
            return Err(FobaError::ShapeMismatch(format!(
                "bmm: {:?}{} x {:?}{}",
                self.shape(a),
                if trans_a { "ᵀ" } else { "" },
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); na * m * n];
        batched(self.value(a).data(), (ar, ac), trans_a, self.value(b).data(), (br, bc), trans_b, na, &mut out, T::zero());
        let v = Tensor::from_vec(&[na, m, n], out)?;
        Ok(self.push(
            v,
            &[a, b],
            Box::new(move |args| {
                let g = args.grad.data();
                let av = args.inputs[0].data();
                let bv = args.inputs[1].data();
                // C = op(A) op(B); dop(A) = G op(B)ᵀ, dop(B) = op(A)ᵀ G
                let ga = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); na * ar * ac];
                    if trans_a {
                        // dA = op(B) Gᵀ, shape [k, m]
                        batched(bv, (br, bc), trans_b, g, (m, n), true, na, &mut d, T::zero());
                    } else {
                        batched(g, (m, n), false, bv, (br, bc), !trans_b, na, &mut d, T::zero());
                    }
                    Tensor::from_vec(&[na, ar, ac], d).unwrap()
                });
                let gb = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); na * br * bc];
                    if trans_b {
                        // dB = Gᵀ op(A), shape [n, k]
                        batched(g, (m, n), true, av, (ar, ac), trans_a, na, &mut d, T::zero());
                    } else {
                        batched(av, (ar, ac), !trans_a, g, (m, n), false, na, &mut d, T::zero());
                    }
                    Tensor::from_vec(&[na, br, bc], d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }
}
