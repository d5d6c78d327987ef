use foba::metrics::{accumulate, f_scd, miou, oa, p_scd, r_scd, sek, MetricReport};
use foba::{ConfusionMatrix, LabelMap};
use proptest::prelude::*;

const SAMPLE: [[f64; 3]; 3] = [[50.0, 2.0, 3.0], [1.0, 20.0, 4.0], [2.0, 5.0, 13.0]];

/// Direct transcription of the score definitions over a dense array.
struct Oracle {
    iou_nc: f64,
    iou_c: f64,
    miou: f64,
    oa: f64,
    sek: f64,
    p: f64,
    r: f64,
    f: f64,
}

fn oracle(q: &[Vec<f64>]) -> Oracle {
    let n = q.len();
    let total: f64 = q.iter().flatten().sum();
    let row = |i: usize| q[i].iter().sum::<f64>();
    let col = |j: usize| q.iter().map(|r| r[j]).sum::<f64>();
    let iou_nc = q[0][0] / (row(0) + col(0) - q[0][0]);
    let mut changed = 0.0;
    for i in 1..n {
        for j in 1..n {
            changed += q[i][j];
        }
    }
    let iou_c = changed / (total - q[0][0]);
    let trace: f64 = (0..n).map(|i| q[i][i]).sum();
    let mut hat = q.to_vec();
    hat[0][0] = 0.0;
    let hat_total: f64 = hat.iter().flatten().sum();
    let rho = (1..n).map(|i| hat[i][i]).sum::<f64>() / hat_total;
    let mut eta = 0.0;
    for i in 1..n {
        let r: f64 = hat[i].iter().sum();
        let c: f64 = hat.iter().map(|row| row[i]).sum();
        eta += r * c;
    }
    eta /= hat_total * hat_total;
    let hits: f64 = (1..n).map(|i| q[i][i]).sum();
    let p = hits / (1..n).map(row).sum::<f64>();
    let r = hits / (1..n).map(col).sum::<f64>();
    Oracle {
        iou_nc,
        iou_c,
        miou: (iou_nc + iou_c) / 2.0,
        oa: trace / total,
        sek: (iou_c - 1.0).exp() * (rho - eta) / (1.0 - eta),
        p,
        r,
        f: 2.0 * p * r / (p + r),
    }
}

fn to_cm(q: &[Vec<f64>]) -> ConfusionMatrix {
    ConfusionMatrix::from_rows(&q.iter().map(|r| r.iter().map(|&v| v as u64).collect()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn sample_matrix_matches_formula_transcription() {
    let q: Vec<Vec<f64>> = SAMPLE.iter().map(|r| r.to_vec()).collect();
    let want = oracle(&q);
    let cm = to_cm(&q);
    let (nc, c, m) = miou(&cm).unwrap();
    let (p, r, f) = (p_scd(&cm).unwrap(), r_scd(&cm).unwrap(), f_scd(&cm).unwrap());
    for (got, exp) in [
        (nc, want.iou_nc),
        (c, want.iou_c),
        (m, want.miou),
        (oa(&cm).unwrap(), want.oa),
        (sek(&cm).unwrap(), want.sek),
        (p, want.p),
        (r, want.r),
        (f, want.f),
    ] {
        assert!((got - exp).abs() < 1e-12, "{} vs {}", got, exp);
    }
    // spot values worked by hand
    assert!((want.oa - 0.83).abs() < 1e-15);
    assert!((want.iou_nc - 50.0 / 58.0).abs() < 1e-15);
    assert!((want.iou_c - 42.0 / 50.0).abs() < 1e-15);
}

fn matrix(n: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..40, n), n)
}

fn all_scores(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    MetricReport::from_confusion(cm).entries().iter().map(|(_, v)| *v).collect()
}

fn close(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-12,
        (None, None) => true,
        _ => false,
    })
}

proptest! {
    #[test]
    fn random_matrices_match_oracle(rows in matrix(4)) {
        let q: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64 + 1.0).collect()).collect();
        let cm = to_cm(&q);
        let want = oracle(&q);
        prop_assert!((sek(&cm).unwrap() - want.sek).abs() < 1e-12);
        prop_assert!((miou(&cm).unwrap().2 - want.miou).abs() < 1e-12);
        prop_assert!((f_scd(&cm).unwrap() - want.f).abs() < 1e-12);
    }

    #[test]
    fn relabelling_change_classes_is_invariant(rows in matrix(4), perm in Just(vec![1usize, 2, 3]).prop_shuffle()) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let map = |i: usize| if i == 0 { 0 } else { perm[i - 1] };
        let mut permuted = ConfusionMatrix::new(4);
        for i in 0..4 {
            for j in 0..4 {
                permuted.add_count(map(i), map(j), cm.get(i, j));
            }
        }
        prop_assert!(close(&all_scores(&cm), &all_scores(&permuted)));
    }

    #[test]
    fn scaling_counts_is_invariant(rows in matrix(3), s in 2u64..50) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let scaled = ConfusionMatrix::from_rows(&rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect::<Vec<_>>()).unwrap();
        prop_assert!(close(&all_scores(&cm), &all_scores(&scaled)));
    }

    #[test]
    fn defined_scores_are_bounded(rows in matrix(4)) {
        let r = MetricReport::from_confusion(&ConfusionMatrix::from_rows(&rows).unwrap());
        for (name, v) in r.entries() {
            if let Some(v) = v {
                if name == "sek" {
                    prop_assert!(v <= 1.0 + 1e-12);
                } else {
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{} = {}", name, v);
                }
            }
        }
    }

    #[test]
    fn accumulation_counts_pixels_and_is_additive(
        pred in prop::collection::vec(0u8..4, 64),
        gt in prop::collection::vec(0u8..4, 64),
        cut in 1usize..7,
    ) {
        let mut whole = ConfusionMatrix::new(4);
        accumulate(&mut whole, &LabelMap::new(8, 8, pred.clone()).unwrap(), &LabelMap::new(8, 8, gt.clone()).unwrap()).unwrap();
        let mut counts = [[0u64; 4]; 4];
        for (&p, &g) in pred.iter().zip(&gt) {
            counts[p as usize][g as usize] += 1;
        }
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(whole.get(i, j), counts[i][j]);
            }
        }
        let split = cut * 8;
        let mut parts = ConfusionMatrix::new(4);
        accumulate(&mut parts, &LabelMap::new(cut, 8, pred[..split].to_vec()).unwrap(), &LabelMap::new(cut, 8, gt[..split].to_vec()).unwrap()).unwrap();
        let mut rest = ConfusionMatrix::new(4);
        accumulate(&mut rest, &LabelMap::new(8 - cut, 8, pred[split..].to_vec()).unwrap(), &LabelMap::new(8 - cut, 8, gt[split..].to_vec()).unwrap()).unwrap();
        parts.merge(&rest).unwrap();
        prop_assert_eq!(parts, whole);
    }
}
