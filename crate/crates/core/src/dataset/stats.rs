//! Per-class occurrence statistics of a corpus.

use std::fmt::Write;

use crate::types::{BiTemporalSample, LabelMap};

/// Counts per class index `0..=n_classes`, both dates pooled unless noted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels per class at t1 and at t2.
    pub pixels_t1: Vec<u64>,
    pub pixels_t2: Vec<u64>,
    /// Samples in which the class occurs at either date.
    pub samples_with_class: Vec<usize>,
    /// 4-connected regions per class over both dates.
    pub objects: Vec<usize>,
    pub changed_pixels: u64,
}

fn count_regions(map: &LabelMap, objects: &mut [usize]) {
    let (h, w) = (map.height(), map.width());
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let class = map.data()[start];
        objects[class as usize] += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && map.data()[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
}

impl CorpusStats {
    pub fn compute(samples: &[BiTemporalSample], n_classes: usize) -> Self {
        let k = n_classes + 1;
        let mut s = CorpusStats {
            n_samples: samples.len(),
            height: samples.first().map_or(0, |x| x.height()),
            width: samples.first().map_or(0, |x| x.width()),
            pixels_t1: vec![0; k],
            pixels_t2: vec![0; k],
            samples_with_class: vec![0; k],
            objects: vec![0; k],
            changed_pixels: 0,
        };
        for sample in samples {
            let mut present = vec![false; k];
            for (map, counts) in [(&sample.sem_t1, &mut s.pixels_t1), (&sample.sem_t2, &mut s.pixels_t2)] {
                for &v in map.data() {
                    counts[v as usize] += 1;
                    present[v as usize] = true;
                }
                count_regions(map, &mut s.objects);
            }
            for (c, p) in present.iter().enumerate() {
                s.samples_with_class[c] += *p as usize;
            }
            s.changed_pixels += sample.change_mask.data().iter().filter(|&&v| v != 0).count() as u64;
        }
        s
    }

    /// Plain-text table, one row per class.
    pub fn to_text(&self, names: &[String]) -> String {
        let total = (self.n_samples * self.height * self.width) as f64;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} samples of {}x{}, {} changed pixels ({:.2}%)",
            self.n_samples,
            self.height,
            self.width,
            self.changed_pixels,
            100.0 * self.changed_pixels as f64 / total.max(1.0)
        );
        let _ = writeln!(
            out,
            "{:<4} {:<16} {:>8} {:>8} {:>10} {:>10} {:>8} {:>8}",
            "id", "class", "samples", "freq%", "pixels_t1", "pixels_t2", "pix%", "objects"
        );
        for c in 0..self.pixels_t1.len() {
            let pix = self.pixels_t1[c] + self.pixels_t2[c];
            let _ = writeln!(
                out,
                "{:<4} {:<16} {:>8} {:>8.2} {:>10} {:>10} {:>8.2} {:>8}",
                c,
                names.get(c).map_or("?", |s| s.as_str()),
                self.samples_with_class[c],
                100.0 * self.samples_with_class[c] as f64 / (self.n_samples.max(1)) as f64,
                self.pixels_t1[c],
                self.pixels_t2[c],
                100.0 * pix as f64 / (2.0 * total).max(1.0),
                self.objects[c]
            );
        }
        out
    }
}
