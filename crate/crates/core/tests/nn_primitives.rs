use std::sync::Arc;

use foba::nn::{grad_check, ConvSpec, GradCheckOptions, Graph, Tensor, Var};
use foba::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct sliding-window cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let (b, cin, h, wd) = x.dims4();
    let (cout, cin_g, k, _) = w.dims4();
    let cout_g = cout / spec.groups;
    let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            let grp = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky) as i64 - spec.padding as i64;
                                let ix = (ox * spec.stride + kx) as i64 - spec.padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += w.data()[((o * cin_g + ci) * k + ky) * k + kx]
                                    * x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, cout, ho, wo], out).unwrap()
}

fn conv_value(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec).unwrap();
    g.value(y).clone()
}

const CONV_CASES: &[(usize, usize, usize, usize, usize, usize, usize)] = &[
    // (cin, cout, k, stride, padding, groups, size)
    (3, 5, 3, 1, 1, 1, 6),
    (4, 6, 3, 2, 1, 2, 7),
    (3, 4, 4, 4, 0, 1, 8),
    (4, 8, 2, 2, 0, 1, 6),
    (6, 6, 3, 1, 1, 6, 5),
    (8, 4, 1, 1, 0, 4, 4),
    (5, 7, 1, 1, 0, 1, 4),
];

#[test]
fn pointwise_identity_kernel_is_identity() {
    let x = rand_tensor(&[2, 3, 4, 4], 1);
    let mut w = vec![0.0; 9];
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let w = Tensor::from_vec(&[3, 3, 1, 1], w).unwrap();
    let y = conv_value(&x, &w, Some(&Tensor::zeros(&[3])), ConvSpec::new(1, 0, 1));
    assert_eq!(y, x);
}

#[test]
fn depthwise_ones_on_constant_gives_nine_c_inside() {
    let x = Tensor::full(&[1, 4, 6, 6], 0.7);
    let w = Tensor::ones(&[4, 1, 3, 3]);
    let y = conv_value(&x, &w, None, ConvSpec::new(1, 1, 4));
    for c in 0..4 {
        for yy in 1..5 {
            for xx in 1..5 {
                let v = y.data()[(c * 6 + yy) * 6 + xx];
                assert!((v - 0.7 * 9.0).abs() < 1e-12, "{v}");
            }
        }
    }
}

#[test]
fn conv_matches_naive_sliding_window() {
    for (i, &(cin, cout, k, s, p, groups, size)) in CONV_CASES.iter().enumerate() {
        let spec = ConvSpec::new(s, p, groups);
        let x = rand_tensor(&[2, cin, size, size], 10 + i as u64);
        let w = rand_tensor(&[cout, cin / groups, k, k], 20 + i as u64);
        let b = rand_tensor(&[cout], 30 + i as u64);
        let fast = conv_value(&x, &w, Some(&b), spec);
        let slow = naive_conv(&x, &w, Some(&b), spec);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12, "case {i}: {}", fast.max_abs_diff(&slow));
    }
}

#[test]
fn conv_output_size_formula() {
    let x = rand_tensor(&[1, 2, 9, 7], 3);
    let w = rand_tensor(&[3, 2, 3, 3], 4);
    let y = conv_value(&x, &w, None, ConvSpec::new(2, 1, 1));
    assert_eq!(y.shape(), &[1, 3, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, None, ConvSpec::same(3)),
        Err(foba::FobaError::ChannelMismatch(_))
    ));
}

#[test]
fn conv_is_linear_in_input() {
    let spec = ConvSpec::new(1, 1, 1);
    let w = rand_tensor(&[4, 3, 3, 3], 7);
    for seed in 0..5 {
        let x = rand_tensor(&[1, 3, 5, 5], 100 + seed);
        let y = rand_tensor(&[1, 3, 5, 5], 200 + seed);
        let (a, b) = (1.7, -0.3);
        let comb = x.zip_map(&y, |p, q| a * p + b * q);
        let lhs = conv_value(&comb, &w, None, spec);
        let cx = conv_value(&x, &w, None, spec);
        let cy = conv_value(&y, &w, None, spec);
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}

fn gn_value(x: &Tensor<f64>, groups: usize, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gm = g.constant(Tensor::full(&[c], gamma));
    let bt = g.constant(Tensor::full(&[c], beta));
    let y = g.group_norm(xv, gm, bt, groups, 1e-5).unwrap();
    g.value(y).clone()
}

#[test]
fn group_norm_fixed_points() {
    let zero = Tensor::zeros(&[1, 4, 3, 3]);
    assert_eq!(gn_value(&zero, 2, 1.0, 0.0), zero);
    let constant = Tensor::full(&[2, 4, 3, 3], 3.25);
    let y = gn_value(&constant, 2, 1.5, -0.4);
    assert!(y.data().iter().all(|&v| v == -0.4));
}

#[test]
fn group_norm_standardises_each_group() {
    let x = rand_tensor(&[2, 8, 5, 5], 11).map(|v| 3.0 * v + 1.0);
    let y = gn_value(&x, 2, 1.0, 0.0);
    for b in 0..2 {
        for grp in 0..2 {
            let n = 4 * 25;
            let off = (b * 8 + grp * 4) * 25;
            let vals = &y.data()[off..off + n];
            let mean: f64 = vals.iter().sum::<f64>() / n as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-6, "{mean}");
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }
}

#[test]
fn group_norm_rejects_bad_group_count() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
    let gm = g.constant(Tensor::ones(&[6]));
    let bt = g.constant(Tensor::zeros(&[6]));
    assert!(matches!(
        g.group_norm(x, gm, bt, 4, 1e-5),
        Err(foba::FobaError::GroupMismatch(_))
    ));
}

#[test]
fn softmax_rows_sum_to_one_and_sigmoid_is_open() {
    let x = rand_tensor(&[3, 5, 4], 9).map(|v| 20.0 * v);
    let mut g = Graph::new();
    let xv = g.constant(x);
    for axis in 0..3 {
        let s = g.softmax(xv, axis).unwrap();
        let shape = g.shape(s).to_vec();
        let d = g.value(s).data();
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..stride {
                let sum: f64 = (0..shape[axis]).map(|k| d[(o * shape[axis] + k) * stride + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
    let sg = g.sigmoid(xv);
    assert!(g.value(sg).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn upsample_then_pool_keeps_constants() {
    for factor in [2, 4] {
        let x = Tensor::full(&[1, 2, 3, 3], 0.123_456_789);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let up = g.upsample_bilinear(xv, factor).unwrap();
        assert!(g.value(up).data().iter().all(|&v| v == 0.123_456_789));
        let down = g.max_pool(up, factor).unwrap();
        assert_eq!(g.value(down), &x);
    }
}

#[test]
fn upsample_stays_within_input_range() {
    let x = rand_tensor(&[1, 1, 4, 4], 5).map(|v| 0.5 + 0.49 * v);
    let (lo, hi) = x.data().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    let mut g = Graph::new();
    let xv = g.constant(x);
    let up = g.upsample_bilinear(xv, 2).unwrap();
    assert!(g.value(up).data().iter().all(|&v| v >= lo && v <= hi));
}

fn check(name: &str, shapes: &[Vec<usize>], tol: f64, f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>) {
    for seed in 0..5u64 {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand_tensor(s, 1000 * seed + i as u64))
            .collect();
        let probe_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars).unwrap();
            g.shape(out).to_vec()
        };
        let probe = rand_tensor(&probe_shape, 77 + seed);
        let report = grad_check(
            |g, v| {
                let out = f(g, v)?;
                g.dot_const(out, &probe)
            },
            &inputs,
            &GradCheckOptions {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passes(tol), "{name} seed {seed}: {:?}", report);
    }
}

#[test]
fn gradients_of_convolutions() {
    for &(cin, cout, k, s, p, groups, size) in CONV_CASES {
        check(
            &format!("conv {cin}->{cout} k{k} s{s} g{groups}"),
            &[vec![2, cin, size, size], vec![cout, cin / groups, k, k], vec![cout]],
            1e-4,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(s, p, groups)),
        );
    }
}

#[test]
fn gradient_of_sum_of_conv_matches_tightly() {
    let x = rand_tensor(&[1, 3, 6, 6], 1);
    let w = rand_tensor(&[4, 3, 3, 3], 2);
    let report = grad_check(
        |g, v| {
            let xc = g.constant(x.clone());
            let y = g.conv2d(xc, v[0], None, ConvSpec::same(3))?;
            Ok(g.sum_all(y))
        },
        &[w],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{:?}", report);
}

#[test]
fn gradient_of_constant_function_is_zero() {
    let report = grad_check(
        |g, _v| Ok(g.constant(Tensor::scalar(2.5))),
        &[rand_tensor(&[3, 3], 1)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.max_rel_err, 0.0);
}

#[test]
fn gradients_of_normalisations() {
    check("group_norm", &[vec![2, 8, 4, 4], vec![8], vec![8]], 1e-4, |g, v| {
        g.group_norm(v[0], v[1], v[2], 2, 1e-5)
    });
    check("layer_norm", &[vec![2, 6, 3, 3], vec![6], vec![6]], 1e-4, |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    // sum(group_norm(x * w)) against the scale parameter
    check("group_norm_of_scaled", &[vec![1, 4, 3, 3], vec![1, 4, 3, 3]], 1e-4, |g, v| {
        let xw = g.mul(v[0], v[1])?;
        let gm = g.constant(Tensor::ones(&[4]));
        let bt = g.constant(Tensor::zeros(&[4]));
        g.group_norm(xw, gm, bt, 2, 1e-5)
    });
}

#[test]
fn gradients_of_pointwise_nonlinearities() {
    check("relu", &[vec![2, 3, 4, 4]], 1e-4, |g, v| Ok(g.relu(v[0])));
    check("sigmoid", &[vec![2, 3, 4, 4]], 1e-4, |g, v| Ok(g.sigmoid(v[0])));
    check("softplus", &[vec![2, 3, 4]], 1e-4, |g, v| Ok(g.softplus(v[0])));
    check("exp", &[vec![2, 3, 4]], 1e-4, |g, v| Ok(g.exp(v[0])));
    check("clamp", &[vec![2, 3, 4]], 1e-4, |g, v| Ok(g.clamp(v[0], -0.5, 0.5)));
    check("one_minus", &[vec![4, 4]], 1e-4, |g, v| Ok(g.one_minus(v[0])));
    for axis in 0..3 {
        check("softmax", &[vec![3, 4, 5]], 1e-4, |g, v| g.softmax(v[0], axis));
    }
}

#[test]
fn gradients_of_resampling_and_layout() {
    check("upsample x2", &[vec![1, 2, 3, 4]], 1e-4, |g, v| g.upsample_bilinear(v[0], 2));
    check("upsample x4", &[vec![2, 1, 2, 2]], 1e-4, |g, v| g.upsample_bilinear(v[0], 4));
    check("max_pool", &[vec![2, 2, 4, 4]], 1e-4, |g, v| g.max_pool(v[0], 2));
    check("concat", &[vec![2, 2, 3, 3], vec![2, 3, 3, 3]], 1e-4, |g, v| g.concat_channels(&[v[0], v[1]]));
    check("slice", &[vec![2, 5, 3, 3]], 1e-4, |g, v| g.slice_channels(v[0], 1, 3));
    check("reshape", &[vec![2, 4, 3]], 1e-4, |g, v| g.reshape(v[0], &[2, 12]));
    let perm = Arc::new(vec![5, 3, 1, 0, 2, 4]);
    check("gather", &[vec![2, 3, 2, 3]], 1e-4, move |g, v| g.gather_trailing(v[0], perm.clone()));
}

#[test]
fn gradients_of_products() {
    check("mul", &[vec![2, 3, 4], vec![2, 3, 4]], 1e-4, |g, v| g.mul(v[0], v[1]));
    check("mul_spatial", &[vec![2, 3, 4, 4], vec![2, 1, 4, 4]], 1e-4, |g, v| g.mul_spatial(v[0], v[1]));
    check("div_scalar", &[vec![3, 4], vec![1]], 1e-4, |g, v| {
        let s = g.exp(v[1]);
        g.div_scalar(v[0], s)
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { vec![2, 4, 3] } else { vec![2, 3, 4] };
        let b = if tb { vec![2, 5, 4] } else { vec![2, 4, 5] };
        check("bmm", &[a, b], 1e-4, move |g, v| g.bmm(v[0], v[1], ta, tb));
    }
}
