//! Procedural bi-temporal scenes: coloured polygons and ellipses on a
//! land-cover background, each shape persisting, appearing, disappearing or
//! changing class between the two dates.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SynthConfig;
use crate::error::Result;
use crate::nn::Tensor;
use crate::types::{BiTemporalSample, LabelMap};

#[derive(Clone, Debug)]
enum Geometry {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    /// Vertices `(y, x)` in angular order around the centre.
    Polygon(Vec<(f64, f64)>),
}

impl Geometry {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Geometry::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Geometry::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (yi, xi) = pts[i];
                    let (yj, xj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Shape {
    geometry: Geometry,
    /// Class at each date, `None` when the shape is absent.
    class_t1: Option<u8>,
    class_t2: Option<u8>,
}

fn random_geometry(rng: &mut ChaCha8Rng, size: f64) -> Geometry {
    let cy = rng.random_range(0.0..size);
    let cx = rng.random_range(0.0..size);
    let r_lo = size / 10.0;
    let r_hi = size / 4.0;
    if rng.random_bool(0.5) {
        Geometry::Ellipse {
            cy,
            cx,
            ry: rng.random_range(r_lo..r_hi),
            rx: rng.random_range(r_lo..r_hi),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    } else {
        let n = rng.random_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let pts = angles
            .iter()
            .map(|a| {
                let r = rng.random_range(r_lo..r_hi);
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        Geometry::Polygon(pts)
    }
}

fn random_class(rng: &mut ChaCha8Rng, n_classes: usize) -> u8 {
    rng.random_range(1..=n_classes) as u8
}

/// Mean rendering colour of land-cover class `k` in `1..=n_classes`:
/// evenly spaced hues at moderate saturation.
pub fn render_color(k: u8, n_classes: usize) -> [f64; 3] {
    let h = (k as f64 - 1.0) / n_classes as f64 * 6.0;
    let (s, v) = (0.65, 0.8);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn render(
    classes: &[u8],
    size: usize,
    n_classes: usize,
    noise: &Normal<f64>,
    offset: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let hw = size * size;
    let mut data = vec![0.0f32; 3 * hw];
    for (p, &k) in classes.iter().enumerate() {
        let base = render_color(k, n_classes);
        for ch in 0..3 {
            let v = base[ch] + offset[ch] + noise.sample(rng);
            // quantised to 8 bits so the lossless raster round trip is exact
            data[ch * hw + p] = (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("image shape")
}

fn generate_one(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> BiTemporalSample {
    let size = cfg.image_size;
    let n = cfg.n_classes;
    let background = random_class(rng, n);
    let n_shapes = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let geometry = random_geometry(rng, size as f64);
            let class = random_class(rng, n);
            let (class_t1, class_t2) = if rng.random_bool(cfg.change_density) {
                match rng.random_range(0..3) {
                    0 => (None, Some(class)),
                    1 => (Some(class), None),
                    _ => {
                        // a different class at t2
                        let shift = rng.random_range(1..n) as u8;
                        (Some(class), Some((class - 1 + shift) % n as u8 + 1))
                    }
                }
            } else {
                (Some(class), Some(class))
            };
            Shape {
                geometry,
                class_t1,
                class_t2,
            }
        })
        .collect();
    let mut cover_t1 = vec![background; size * size];
    let mut cover_t2 = vec![background; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for s in &shapes {
                if s.geometry.contains(py, px) {
                    if let Some(k) = s.class_t1 {
                        cover_t1[y * size + x] = k;
                    }
                    if let Some(k) = s.class_t2 {
                        cover_t2[y * size + x] = k;
                    }
                }
            }
        }
    }
    let mut sem_t1 = LabelMap::zeros(size, size);
    let mut sem_t2 = LabelMap::zeros(size, size);
    let mut change = LabelMap::zeros(size, size);
    for p in 0..size * size {
        if cover_t1[p] != cover_t2[p] {
            sem_t1.data_mut()[p] = cover_t1[p];
            sem_t2.data_mut()[p] = cover_t2[p];
            change.data_mut()[p] = 1;
        }
    }
    let noise = Normal::new(0.0, cfg.noise).expect("noise is validated nonnegative");
    let mut offset = || std::array::from_fn(|_| rng.random_range(-cfg.illumination..=cfg.illumination));
    let (off1, off2) = (offset(), offset());
    let image_t1 = render(&cover_t1, size, n, &noise, off1, rng);
    let image_t2 = render(&cover_t2, size, n, &noise, off2, rng);
    BiTemporalSample {
        id: format!("synth_{:04}", index),
        image_t1,
        image_t2,
        sem_t1,
        sem_t2,
        change_mask: change,
    }
}

/// Deterministic corpus of `cfg.n_samples` scenes from a single RNG stream.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<BiTemporalSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.n_samples).map(|i| generate_one(cfg, i, &mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_sample;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_samples: 6,
            image_size: 32,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(synth_generate(&small(7)).unwrap(), synth_generate(&small(7)).unwrap());
        assert_ne!(synth_generate(&small(7)).unwrap(), synth_generate(&small(8)).unwrap());
    }

    #[test]
    fn no_change_without_density() {
        let cfg = SynthConfig {
            change_density: 0.0,
            ..small(1)
        };
        for s in synth_generate(&cfg).unwrap() {
            assert!(s.change_mask.data().iter().all(|&v| v == 0));
            assert!(s.sem_t1.data().iter().chain(s.sem_t2.data()).all(|&v| v == 0));
        }
    }

    #[test]
    fn mask_is_recomputable_from_labels() {
        for s in synth_generate(&small(2)).unwrap() {
            validate_sample(&s, 4).unwrap();
            for p in 0..32 * 32 {
                let changed = s.sem_t1.data()[p] != 0 || s.sem_t2.data()[p] != 0;
                assert_eq!(changed as u8, s.change_mask.data()[p]);
                if changed {
                    assert_ne!(s.sem_t1.data()[p], s.sem_t2.data()[p]);
                }
            }
        }
    }

    #[test]
    fn corpus_contains_changes_and_several_classes() {
        let corpus = synth_generate(&SynthConfig {
            n_samples: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let changed: usize = corpus.iter().map(|s| s.change_mask.data().iter().filter(|&&v| v == 1).count()).sum();
        assert!(changed > 0);
        let mut seen = [false; 5];
        for s in &corpus {
            for &v in s.sem_t1.data().iter().chain(s.sem_t2.data()) {
                seen[v as usize] = true;
            }
        }
        assert!(seen[1..].iter().filter(|&&b| b).count() >= 2);
    }

    #[test]
    fn render_colors_are_distinct() {
        for n in 2..8 {
            for a in 1..=n as u8 {
                for b in 1..a {
                    let (ca, cb) = (render_color(a, n), render_color(b, n));
                    let d: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum();
                    assert!(d.sqrt() > 0.1, "{} {} {}", n, a, b);
                }
            }
        }
    }
}
