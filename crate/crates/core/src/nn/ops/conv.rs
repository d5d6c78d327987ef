use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, "same" padding for odd kernels.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2, 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn is_depthwise(&self) -> bool {
        self.spec.groups == self.cin && self.cin == self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

fn geometry(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Geometry> {
    if x.len() != 4 || w.len() != 4 {
        return Err(FobaError::ShapeMismatch(format!("conv2d: input {:?}, weight {:?}", x, w)));
    }
    let (b, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if kh != kw || kh == 0 || spec.stride == 0 || spec.groups == 0 {
        return Err(FobaError::ShapeMismatch(format!("conv2d: unsupported kernel {:?} / {:?}", w, spec)));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
        return Err(FobaError::ChannelMismatch(format!(
            "conv2d: {} input / {} output channels with {} groups and weight {:?}",
            cin, cout, spec.groups, w
        )));
    }
    if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
        return Err(FobaError::ShapeMismatch(format!("conv2d: kernel {} larger than {}x{}", kh, h, wd)));
    }
    Ok(Geometry {
        b,
        cin,
        h,
        w: wd,
        cout,
        k: kh,
        ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
        wo: (wd + 2 * spec.padding - kw) / spec.stride + 1,
        spec,
    })
}

/// Unfolds one group of one image into `[cin_g * k * k, ho * wo]`.
fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    let hw_o = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw_o;
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    let hw_o = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw_o;
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let di = iy as usize * g.w + ix as usize;
                            plane[di] = plane[di] + col[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry) -> Vec<T> {
    let hw_o = g.ho * g.wo;
    let mut out = vec![T::zero(); g.b * g.cout * hw_o];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let kk = g.cin_g() * g.k * g.k;
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw_o] };
        for b in 0..g.b {
            for grp in 0..g.spec.groups {
                let xo = (b * g.cin + grp * g.cin_g()) * g.h * g.w;
                let xs = &x[xo..xo + g.cin_g() * g.h * g.w];
                let src: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, &mut col);
                    &col
                };
                let wg = &w[grp * g.cout_g() * kk..(grp + 1) * g.cout_g() * kk];
                let oo = (b * g.cout + grp * g.cout_g()) * hw_o;
                let dst = &mut out[oo..oo + g.cout_g() * hw_o];
                T::gemm(
                    g.cout_g(),
                    kk,
                    hw_o,
                    T::one(),
                    wg,
                    kk as isize,
                    1,
                    src,
                    hw_o as isize,
                    1,
                    T::zero(),
                    dst,
                    hw_o as isize,
                    1,
                );
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.b {
            for c in 0..g.cout {
                let o = (b * g.cout + c) * hw_o;
                out[o..o + hw_o].iter_mut().for_each(|v| *v = *v + bias[c]);
            }
        }
    }
    out
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    for b in 0..g.b {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let kern = &w[c * k * k..(c + 1) * k * k];
            let dst = &mut out[(b * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc = acc + kern[ky * k + kx] * plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(x: &[T], w: &[T], gout: &[T], g: &Geometry, dx: Option<&mut [T]>, dw: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    let mut dx = dx;
    for b in 0..g.b {
        for c in 0..g.cin {
            let base = (b * g.cin + c) * g.h * g.w;
            let kern = &w[c * k * k..(c + 1) * k * k];
            let go = &gout[(b * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gv = go[oy * g.wo + ox];
                    if gv == T::zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let xi = base + iy as usize * g.w + ix as usize;
                                dw[c * k * k + ky * k + kx] = dw[c * k * k + ky * k + kx] + gv * x[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] = dx[xi] + gv * kern[ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvGrads<T> {
    dx: Option<Vec<T>>,
    dw: Vec<T>,
    db: Vec<T>,
}

fn backward<T: Real>(x: &[T], w: &[T], gout: &[T], g: &Geometry, need_dx: bool) -> ConvGrads<T> {
    let hw_o = g.ho * g.wo;
    let kk = g.cin_g() * g.k * g.k;
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.b {
        for c in 0..g.cout {
            let o = (b * g.cout + c) * hw_o;
            db[c] = db[c] + gout[o..o + hw_o].iter().copied().sum();
        }
    }
    if g.is_depthwise() {
        depthwise_backward(x, w, gout, g, dx.as_deref_mut(), &mut dw);
        return ConvGrads { dx, dw, db };
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw_o] };
    let mut dcol = vec![T::zero(); if g.is_pointwise() || !need_dx { 0 } else { kk * hw_o }];
    for b in 0..g.b {
        for grp in 0..g.spec.groups {
            let xo = (b * g.cin + grp * g.cin_g()) * g.h * g.w;
            let xs = &x[xo..xo + g.cin_g() * g.h * g.w];
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            let oo = (b * g.cout + grp * g.cout_g()) * hw_o;
            let go = &gout[oo..oo + g.cout_g() * hw_o];
            let wo = grp * g.cout_g() * kk;
            // dW_g += dOut_g · colᵀ
            T::gemm(
                g.cout_g(),
                hw_o,
                kk,
                T::one(),
                go,
                hw_o as isize,
                1,
                src,
                1,
                hw_o as isize,
                T::one(),
                &mut dw[wo..wo + g.cout_g() * kk],
                kk as isize,
                1,
            );
            if let Some(dx) = dx.as_deref_mut() {
                let wg = &w[wo..wo + g.cout_g() * kk];
                if g.is_pointwise() {
                    // dX_g += W_gᵀ · dOut_g
                    T::gemm(
                        kk,
                        g.cout_g(),
                        hw_o,
                        T::one(),
                        wg,
                        1,
                        kk as isize,
                        go,
                        hw_o as isize,
                        1,
                        T::one(),
                        &mut dx[xo..xo + g.cin_g() * g.h * g.w],
                        hw_o as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        kk,
                        g.cout_g(),
                        hw_o,
                        T::one(),
                        wg,
                        1,
                        kk as isize,
                        go,
                        hw_o as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        hw_o as isize,
                        1,
                    );
                    col2im_add(&dcol, g, &mut dx[xo..xo + g.cin_g() * g.h * g.w]);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

impl<T: Real> Graph<'_, T> {
    /// 2-D cross-correlation over `[b, c, h, w]` with weight `[c_out, c_in / groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let g = geometry(self.shape(x), self.shape(weight), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.cout] {
                return Err(FobaError::ChannelMismatch(format!(
                    "conv2d bias {:?} for {} output channels",
                    self.shape(b),
                    g.cout
                )));
            }
        }
        let out = forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &g,
        );
        let v = Tensor::from_vec(&[g.b, g.cout, g.ho, g.wo], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let xshape = [g.b, g.cin, g.h, g.w];
        Ok(self.push(
            v,
            &parents,
            Box::new(move |args| {
                let grads = backward(args.inputs[0].data(), args.inputs[1].data(), args.grad.data(), &g, args.needs[0]);
                let mut res = vec![
                    grads.dx.map(|d| Tensor::from_vec(&xshape, d).unwrap()),
                    Some(Tensor::from_vec(args.inputs[1].shape(), grads.dw).unwrap()),
                ];
                if args.inputs.len() == 3 {
                    res.push(Some(Tensor::from_vec(&[g.cout], grads.db).unwrap()));
                }
                res
            }),
        ))
    }
}
