//! Corpus I/O and splitting.
//!
//! On disk a corpus is a directory with five raster folders sharing sample
//! ids, a colour palette and an optional split listing:
//!
//! ```text
//! root/im1/<id>.png      RGB image at t1
//! root/im2/<id>.png      RGB image at t2
//! root/label1/<id>.png   palette-coloured labels at t1
//! root/label2/<id>.png   palette-coloured labels at t2
//! root/change/<id>.png   grayscale, 0 unchanged / 255 changed
//! root/palette.txt       "id r g b name" per line
//! root/splits.txt        "<split> <id>" per line
//! ```

mod stats;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FobaError, Result};
use crate::nn::Tensor;
use crate::types::{validate_sample, BiTemporalSample, LabelMap};

pub use stats::CorpusStats;
pub use synth::{render_color, synth_generate};

pub const IMAGE_T1_DIR: &str = "im1";
pub const IMAGE_T2_DIR: &str = "im2";
pub const LABEL_T1_DIR: &str = "label1";
pub const LABEL_T2_DIR: &str = "label2";
pub const CHANGE_DIR: &str = "change";
pub const PALETTE_FILE: &str = "palette.txt";
pub const SPLITS_FILE: &str = "splits.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteEntry {
    pub id: u8,
    pub color: [u8; 3],
    pub name: String,
}

/// Class id to label colour. Class 0 ("unchanged") is conventionally white.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[..i] {
                if a.id == b.id || a.color == b.color {
                    return Err(FobaError::config(
                        "palette",
                        format!("entries {} and {} collide", a.id, b.id),
                    ));
                }
            }
        }
        Ok(Self { entries })
    }

    /// White for class 0, then well-separated colours for `1..=n_classes`.
    pub fn default_for(n_classes: usize) -> Self {
        const BASE: [[u8; 3]; 6] = [
            [0, 128, 0],
            [128, 128, 128],
            [0, 0, 255],
            [128, 0, 0],
            [0, 255, 0],
            [255, 0, 0],
        ];
        let mut entries = vec![PaletteEntry {
            id: 0,
            color: [255, 255, 255],
            name: "unchanged".into(),
        }];
        for k in 1..=n_classes {
            let color = match BASE.get(k - 1) {
                Some(&c) => c,
                // beyond the fixed table: distinct colours from the id bits
                None => [(k * 37 % 251) as u8, (k / 251 * 89 + 3) as u8, (k * 11 % 199) as u8],
            };
            entries.push(PaletteEntry {
                id: k as u8,
                color,
                name: format!("class{}", k),
            });
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    /// Largest class id.
    pub fn n_classes(&self) -> usize {
        self.entries.iter().map(|e| e.id as usize).max().unwrap_or(0)
    }

    pub fn color(&self, id: u8) -> Option<[u8; 3]> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.color)
    }

    pub fn class_of(&self, color: [u8; 3]) -> Option<u8> {
        self.entries.iter().find(|e| e.color == color).map(|e| e.id)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || FobaError::config("palette", format!("line {}: expected `id r g b name`", n + 1));
            let mut it = line.split_whitespace();
            let mut num = || -> Result<u8> { it.next().ok_or_else(bad)?.parse().map_err(|_| bad()) };
            let id = num()?;
            let color = [num()?, num()?, num()?];
            let name = it.collect::<Vec<_>>().join(" ");
            entries.push(PaletteEntry { id, color, name });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {} {} {}\n", e.id, e.color[0], e.color[1], e.color[2], e.name))
            .collect()
    }
}

fn raster_path(root: &Path, dir: &str, id: &str) -> PathBuf {
    root.join(dir).join(format!("{}.png", id))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(FobaError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| FobaError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> FobaError + '_ {
    move |e| FobaError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FobaError::io(path, e))
}

/// `[3, H, W]` in `[0, 1]` to an 8-bit RGB raster (values are rounded).
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = t.dims3();
    if c != 3 {
        return Err(FobaError::ShapeMismatch(format!("expected 3 channels, got {}", c)));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|ch| (t.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("rgb shape")
}

pub fn labels_to_rgb(map: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    let mut img = RgbImage::new(map.width() as u32, map.height() as u32);
    for y in 0..map.height() {
        for x in 0..map.width() {
            let id = map.get(y, x);
            let color = palette.color(id).ok_or(FobaError::LabelOutOfRange {
                label: id as usize,
                max: palette.n_classes(),
                context: "palette".into(),
            })?;
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
    Ok(img)
}

fn rgb_to_labels(img: &RgbImage, palette: &Palette, path: &Path) -> Result<LabelMap> {
    let mut map = LabelMap::zeros(img.height() as usize, img.width() as usize);
    for (x, y, px) in img.enumerate_pixels() {
        let id = palette.class_of(px.0).ok_or_else(|| FobaError::UnknownColor {
            color: px.0,
            y: y as usize,
            x: x as usize,
            file: path.to_path_buf(),
        })?;
        map.set(y as usize, x as usize, id);
    }
    Ok(map)
}

pub fn mask_to_gray(mask: &LabelMap) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) != 0 { 255 } else { 0 }])
    })
}

fn gray_to_mask(img: &GrayImage, path: &Path) -> Result<LabelMap> {
    let mut map = LabelMap::zeros(img.height() as usize, img.width() as usize);
    for (x, y, px) in img.enumerate_pixels() {
        let v = match px.0[0] {
            0 => 0,
            255 => 1,
            other => {
                return Err(FobaError::UnknownColor {
                    color: [other; 3],
                    y: y as usize,
                    x: x as usize,
                    file: path.to_path_buf(),
                })
            }
        };
        map.set(y as usize, x as usize, v);
    }
    Ok(map)
}

/// Reads a palette-coded label raster.
pub fn read_label_raster(path: &Path, palette: &Palette) -> Result<LabelMap> {
    rgb_to_labels(&open_image(path)?.to_rgb8(), palette, path)
}

/// Reads a 0/255 change raster.
pub fn read_mask_raster(path: &Path) -> Result<LabelMap> {
    gray_to_mask(&open_image(path)?.to_luma8(), path)
}

pub fn write_label_raster(path: &Path, map: &LabelMap, palette: &Palette) -> Result<()> {
    labels_to_rgb(map, palette)?.save(path).map_err(save_err(path))
}

pub fn write_mask_raster(path: &Path, mask: &LabelMap) -> Result<()> {
    mask_to_gray(mask).save(path).map_err(save_err(path))
}

pub fn read_palette(root: &Path) -> Result<Palette> {
    let path = root.join(PALETTE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FobaError::MissingFile(path.clone()),
        _ => FobaError::io(&path, e),
    })?;
    Palette::parse(&text)
}

/// Sample ids found in the t1 image folder, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(IMAGE_T1_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| FobaError::io(&dir, e))? {
        let path = entry.map_err(|e| FobaError::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads one sample by id.
pub fn load_sample(root: &Path, id: &str, palette: &Palette) -> Result<BiTemporalSample> {
    let rgb = |dir: &str| -> Result<(PathBuf, RgbImage)> {
        let p = raster_path(root, dir, id);
        let img = open_image(&p)?.to_rgb8();
        Ok((p, img))
    };
    let (_, im1) = rgb(IMAGE_T1_DIR)?;
    let (_, im2) = rgb(IMAGE_T2_DIR)?;
    let (p1, l1) = rgb(LABEL_T1_DIR)?;
    let (p2, l2) = rgb(LABEL_T2_DIR)?;
    let pc = raster_path(root, CHANGE_DIR, id);
    let change = open_image(&pc)?.to_luma8();
    let sample = BiTemporalSample {
        id: id.to_string(),
        image_t1: rgb_to_tensor(&im1),
        image_t2: rgb_to_tensor(&im2),
        sem_t1: rgb_to_labels(&l1, palette, &p1)?,
        sem_t2: rgb_to_labels(&l2, palette, &p2)?,
        change_mask: gray_to_mask(&change, &pc)?,
    };
    validate_sample(&sample, palette.n_classes())?;
    Ok(sample)
}

/// Loads every sample under `root`. A directory without images is an empty corpus.
pub fn load_corpus(root: &Path) -> Result<Vec<BiTemporalSample>> {
    let ids = list_ids(root)?;
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let palette = read_palette(root)?;
    ids.iter().map(|id| load_sample(root, id, &palette)).collect()
}

/// Writes samples and the palette in the on-disk layout.
pub fn export_corpus(root: &Path, samples: &[BiTemporalSample], palette: &Palette) -> Result<()> {
    for dir in [IMAGE_T1_DIR, IMAGE_T2_DIR, LABEL_T1_DIR, LABEL_T2_DIR, CHANGE_DIR] {
        create_dir(&root.join(dir))?;
    }
    let palette_path = root.join(PALETTE_FILE);
    fs::write(&palette_path, palette.to_text()).map_err(|e| FobaError::io(&palette_path, e))?;
    for s in samples {
        validate_sample(s, palette.n_classes())?;
        let save_rgb = |dir: &str, img: RgbImage| -> Result<()> {
            let p = raster_path(root, dir, &s.id);
            img.save(&p).map_err(save_err(&p))
        };
        save_rgb(IMAGE_T1_DIR, tensor_to_rgb(&s.image_t1)?)?;
        save_rgb(IMAGE_T2_DIR, tensor_to_rgb(&s.image_t2)?)?;
        save_rgb(LABEL_T1_DIR, labels_to_rgb(&s.sem_t1, palette)?)?;
        save_rgb(LABEL_T2_DIR, labels_to_rgb(&s.sem_t2, palette)?)?;
        let p = raster_path(root, CHANGE_DIR, &s.id);
        mask_to_gray(&s.change_mask).save(&p).map_err(save_err(&p))?;
    }
    Ok(())
}

/// Split name to sample ids.
pub type SplitTable = BTreeMap<String, Vec<String>>;

pub fn write_splits(root: &Path, splits: &SplitTable) -> Result<()> {
    let text: String = splits
        .iter()
        .flat_map(|(name, ids)| ids.iter().map(move |id| format!("{} {}\n", name, id)))
        .collect();
    let path = root.join(SPLITS_FILE);
    fs::write(&path, text).map_err(|e| FobaError::io(&path, e))
}

pub fn read_splits(root: &Path) -> Result<SplitTable> {
    let path = root.join(SPLITS_FILE);
    if !path.exists() {
        return Err(FobaError::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| FobaError::io(&path, e))?;
    let mut table = SplitTable::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_whitespace().collect::<Vec<_>>()[..] {
            [name, id] => table.entry(name.to_string()).or_default().push(id.to_string()),
            _ => {
                return Err(FobaError::config(
                    "splits",
                    format!("line {}: expected `<split> <id>`", n + 1),
                ))
            }
        }
    }
    Ok(table)
}

/// Deterministic shuffle-and-cut into `(first, second)` with `fractions[0]`
/// of the items (rounded) in the first part.
pub fn split<T>(items: Vec<T>, fractions: [f64; 2], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions[0] + fractions[1] - 1.0).abs() > 1e-9 {
        return Err(FobaError::config("split", "fractions must be in [0, 1] and sum to 1"));
    }
    let n = items.len();
    let cut = (n as f64 * fractions[0]).round() as usize;
    if cut == 0 || cut == n {
        return Err(FobaError::EmptySplit(format!(
            "{} items with fractions {:?} leave a side empty",
            n, fractions
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().expect("index used once")).collect() };
    let first = take(&order[..cut]);
    let second = take(&order[cut..]);
    Ok((first, second))
}
