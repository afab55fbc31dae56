//! Datasets: MVTec-style folder loading and a synthetic texture generator.
//!
//! Layout, per category:
//!
//! ```text
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::ImageTensor;
use crate::error::{CopsError, Result};
use crate::tensor::Tensor;

/// Mask pixels at or above this 8-bit value count as anomalous.
pub const MASK_THRESHOLD: u8 = 128;
pub const GOOD_DIR: &str = "good";
pub const SYNTH_DEFECT: &str = "foreign";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: Option<PathBuf>,
    pub image: ImageTensor,
    /// Binary `h × w` mask; all zeros for normal images, `None` when unknown.
    pub mask: Option<Tensor>,
    pub label: u8,
    pub category: String,
}

impl Sample {
    pub fn image_resized(&self, h: usize, w: usize) -> Result<ImageTensor> {
        if self.image.height() == h && self.image.width() == w {
            return Ok(self.image.clone());
        }
        let rgb = to_rgb8(&self.image);
        let out = image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
        Ok(from_rgb8(&out))
    }

    pub fn mask_resized(&self, h: usize, w: usize) -> Result<Option<Tensor>> {
        let Some(m) = &self.mask else { return Ok(None) };
        if m.shape() == (h, w) {
            return Ok(Some(m.clone()));
        }
        let (mh, mw) = m.shape();
        Ok(Some(Tensor::from_fn(h, w, |i, j| m.get(i * mh / h, j * mw / w))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn new(samples: Vec<Sample>, split: Split) -> Self {
        Self { samples, split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn categories(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.category.clone()).collect()
    }

    /// Whether every sample of each category carries a mask.
    pub fn has_masks(&self) -> BTreeMap<String, bool> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            let e = out.entry(s.category.clone()).or_insert(true);
            *e &= s.mask.is_some();
        }
        out
    }

    pub fn by_category(&self) -> BTreeMap<String, Vec<&Sample>> {
        let mut out: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.category.clone()).or_default().push(s);
        }
        out
    }
}

/// Zero-shot protocol check: no category may appear on both sides.
pub fn check_disjoint(train: &DatasetManifest, test: &DatasetManifest) -> Result<()> {
    let shared: Vec<String> = train.categories().intersection(&test.categories()).cloned().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(CopsError::InvalidArgument(format!("categories used for both training and testing: {}", shared.join(", "))))
    }
}

fn to_rgb8(img: &ImageTensor) -> RgbImage {
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let px = |c| (img.pixel(y as usize, x as usize, c) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn from_rgb8(img: &RgbImage) -> ImageTensor {
    ImageTensor::from_fn(img.height() as usize, img.width() as usize, |y, x, c| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| CopsError::Image { path: path.to_path_buf(), source })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| CopsError::Image { path: path.to_path_buf(), source })?;
    let g = img.to_luma8();
    Ok(Tensor::from_fn(g.height() as usize, g.width() as usize, |y, x| {
        if g.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    to_rgb8(img).save(path).map_err(|source| CopsError::Image { path: path.to_path_buf(), source })
}

pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let g = GrayImage::from_fn(mask.cols() as u32, mask.rows() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) >= 0.5 { 255 } else { 0 }])
    });
    g.save(path).map_err(|source| CopsError::Image { path: path.to_path_buf(), source })
}

/// 8-bit grayscale PNG of a map, values clamped to `[0, 1]`.
pub fn heatmap_png(map: &Tensor) -> Result<Vec<u8>> {
    let g = GrayImage::from_fn(map.cols() as u32, map.rows() as u32, |x, y| {
        Luma([(map.get(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    g.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| CopsError::Image { path: PathBuf::from("<heatmap>"), source })?;
    Ok(buf.into_inner())
}

/// Sorted `.png` files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_png(p)).collect())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Load every category under `root`. Samples are ordered by category, then
/// defect directory, then file name.
pub fn load_mvtec_layout(root: &Path) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for cat_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let category = cat_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let test_dir = cat_dir.join("test");
        let has_truth = cat_dir.join("ground_truth").is_dir();
        if !has_truth {
            log::warn!("{}: no ground_truth directory, pixel labels unavailable", cat_dir.display());
        }
        if !test_dir.is_dir() {
            log::warn!("{}: no test directory, category skipped", cat_dir.display());
            continue;
        }
        for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
            let defect = defect_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for path in sorted_entries(&defect_dir)?.into_iter().filter(|p| is_png(p)) {
                let image = match read_image(&path) {
                    Ok(i) => i,
                    Err(e) => {
                        log::warn!("skipping unreadable image: {e}");
                        continue;
                    }
                };
                let (h, w) = (image.height(), image.width());
                let (mask, label) = if defect == GOOD_DIR {
                    (has_truth.then(|| Tensor::zeros(h, w)), 0)
                } else if !has_truth {
                    (None, 1)
                } else {
                    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                    let mpath = cat_dir.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"));
                    let mask = if mpath.is_file() {
                        match read_mask(&mpath) {
                            Ok(m) if m.shape() == (h, w) => Some(m),
                            Ok(m) => {
                                log::warn!(
                                    "{}: mask is {}x{} but the image is {h}x{w}; loaded without mask",
                                    mpath.display(),
                                    m.rows(),
                                    m.cols()
                                );
                                None
                            }
                            Err(e) => {
                                log::warn!("unreadable mask, loaded without mask: {e}");
                                None
                            }
                        }
                    } else {
                        log::warn!("{}: no mask found, loaded without mask", path.display());
                        None
                    };
                    (mask, 1)
                };
                samples.push(Sample { path: Some(path), image, mask, label, category: category.clone() });
            }
        }
    }
    if samples.is_empty() {
        log::warn!("{}: no samples found", root.display());
    }
    Ok(DatasetManifest::new(samples, Split::Test))
}

/// Write `manifest` in the folder layout; file names are zero-padded indices
/// within each category and defect.
pub fn write_mvtec_layout(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut counters: BTreeMap<(String, String), usize> = BTreeMap::new();
    for s in &manifest.samples {
        let defect = if s.label == 0 { GOOD_DIR } else { SYNTH_DEFECT };
        let n = counters.entry((s.category.clone(), defect.to_string())).or_insert(0);
        let stem = format!("{n:03}");
        *n += 1;
        let dir = root.join(&s.category).join("test").join(defect);
        fs::create_dir_all(&dir)?;
        write_image(&dir.join(format!("{stem}.png")), &s.image)?;
        if s.label == 1 {
            if let Some(m) = &s.mask {
                let mdir = root.join(&s.category).join("ground_truth").join(defect);
                fs::create_dir_all(&mdir)?;
                write_mask(&mdir.join(format!("{stem}_mask.png")), m)?;
            }
        }
    }
    Ok(())
}

/// Procedural texture of one category: two colors blended by an oriented
/// sinusoid plus pixel noise.
#[derive(Clone, Debug)]
struct Texture {
    colors: [[f64; 3]; 2],
    freq: f64,
    angle: f64,
    noise: f64,
}

impl Texture {
    fn category<R: Rng>(rng: &mut R) -> Self {
        let mut color = || [0.0; 3].map(|_: f64| rng.random_range(0.25..0.75));
        let colors = [color(), color()];
        Self { colors, freq: rng.random_range(1.0..3.0), angle: rng.random_range(0.0..PI), noise: 0.03 }
    }

    fn value<R: Rng>(&self, y: usize, x: usize, size: (usize, usize), phase: f64, rng: &mut R, c: usize) -> f64 {
        let (u, v) = (x as f64 / size.1 as f64, y as f64 / size.0 as f64);
        let t = 0.5 + 0.5 * (2.0 * PI * self.freq * (u * self.angle.cos() + v * self.angle.sin()) + phase).sin();
        let n: f64 = Normal::new(0.0, self.noise).expect("noise std is valid").sample(rng);
        self.colors[0][c] * (1.0 - t) + self.colors[1][c] * t + n
    }
}

/// Foreign texture blended into an anomaly: fine high-contrast stripes.
fn foreign_value(y: usize, x: usize, period: usize, tint: &[f64; 3], c: usize) -> f64 {
    let on = ((x + y) / period) % 2 == 0;
    if on {
        tint[c]
    } else {
        1.0 - tint[c]
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Ellipse covering `area` (fraction of the image) at a random position.
fn random_ellipse<R: Rng>(size: (usize, usize), rng: &mut R) -> Tensor {
    let (h, w) = size;
    let area = rng.random_range(0.05..0.25) * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.5..2.0);
    let ry = (area / PI * aspect).sqrt().min(h as f64 / 2.0);
    let rx = (area / (PI * ry)).min(w as f64 / 2.0);
    let cy = rng.random_range(ry.min(h as f64 / 2.0)..=(h as f64 - ry).max(h as f64 / 2.0));
    let cx = rng.random_range(rx.min(w as f64 / 2.0)..=(w as f64 - rx).max(w as f64 / 2.0));
    let mut m = Tensor::from_fn(h, w, |i, j| {
        let dy = (i as f64 + 0.5 - cy) / ry;
        let dx = (j as f64 + 0.5 - cx) / rx;
        if dy * dy + dx * dx <= 1.0 {
            1.0
        } else {
            0.0
        }
    });
    if m.sum() == 0.0 {
        m.set((cy as usize).min(h - 1), (cx as usize).min(w - 1), 1.0);
    }
    m
}

/// One synthetic category: `count` images, the second half anomalous.
fn synth_category(name: &str, count: usize, size: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let tex = Texture::category(rng);
    let (h, w) = size;
    (0..count)
        .map(|k| {
            let anomalous = k >= count / 2;
            let phase = rng.random_range(0.0..2.0 * PI);
            let mask = if anomalous { random_ellipse(size, rng) } else { Tensor::zeros(h, w) };
            let period = rng.random_range(1..=2usize);
            let tint = [0.0; 3].map(|_: f64| rng.random_range(0.0..0.2));
            let opacity = rng.random_range(0.35..0.65);
            let mut data = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let base = tex.value(y, x, size, phase, rng, c);
                        let v = if mask.get(y, x) == 1.0 {
                            (1.0 - opacity) * base + opacity * foreign_value(y, x, period, &tint, c)
                        } else {
                            base
                        };
                        data.push(quantize(v));
                    }
                }
            }
            let image = ImageTensor::new(h, w, data).expect("quantized pixels lie in [0, 1]");
            Sample { path: None, image, mask: Some(mask), label: anomalous as u8, category: name.to_string() }
        })
        .collect()
}

/// `n_categories` textures, the first half for training and the rest for testing.
pub fn synth_dataset(
    n_categories: usize,
    per_category: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if n_categories < 2 {
        return Err(CopsError::InvalidArgument(format!(
            "need at least 2 categories for a disjoint split, got {n_categories}"
        )));
    }
    if per_category < 2 || size.0 == 0 || size.1 == 0 {
        return Err(CopsError::InvalidArgument("need at least 2 images per category and a non-empty size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = n_categories / 2;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..n_categories {
        let name = format!("texture_{i:02}");
        let samples = synth_category(&name, per_category, size, &mut rng);
        if i < n_train {
            train.extend(samples);
        } else {
            test.extend(samples);
        }
    }
    Ok((DatasetManifest::new(train, Split::Train), DatasetManifest::new(test, Split::Test)))
}
