//! Ranking metrics and per-category evaluation reports.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PixelPooling;
use crate::data::{DatasetManifest, Sample};
use crate::error::Result;
use crate::inference::{draw_noise, predict_features};
use crate::model::CopsModel;
use crate::tensor::Tensor;

fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve via midrank Mann–Whitney; `None` unless both classes occur.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let order = sorted_order(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block shares its average rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Step-wise average precision over distinct thresholds; `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut order = sorted_order(scores);
    order.reverse();
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub images: usize,
    pub pixels: usize,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub categories: Vec<CategoryMetrics>,
    /// Unweighted means over the categories where each metric is defined.
    pub mean: CategoryMetrics,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn from_categories(categories: Vec<CategoryMetrics>) -> Self {
        let c = &categories;
        let mean = CategoryMetrics {
            category: "mean".into(),
            images: c.iter().map(|m| m.images).sum(),
            pixels: c.iter().map(|m| m.pixels).sum(),
            image_auroc: mean_of(c.iter().map(|m| m.image_auroc)),
            image_ap: mean_of(c.iter().map(|m| m.image_ap)),
            pixel_auroc: mean_of(c.iter().map(|m| m.pixel_auroc)),
            pixel_ap: mean_of(c.iter().map(|m| m.pixel_ap)),
        };
        Self { categories, mean }
    }

    /// Human-readable table, metrics in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let width = self.categories.iter().map(|c| c.category.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>6}", "category", "I-AUROC", "I-AP", "P-AUROC", "P-AP", "images");
        for c in self.categories.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>6}",
                c.category,
                pct(c.image_auroc),
                pct(c.image_ap),
                pct(c.pixel_auroc),
                pct(c.pixel_ap),
                c.images
            );
        }
        out
    }

    /// One `category.metric = value` line per entry.
    pub fn to_key_values(&self) -> String {
        let val = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.9}"));
        let mut out = String::new();
        for c in self.categories.iter().chain(std::iter::once(&self.mean)) {
            for (key, v) in [("i_auroc", c.image_auroc), ("i_ap", c.image_ap), ("p_auroc", c.pixel_auroc), ("p_ap", c.pixel_ap)] {
                let _ = writeln!(out, "{}.{key} = {}", c.category, val(v));
            }
        }
        out
    }
}

/// Scores and maps for one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub map: Tensor,
    pub mask: Option<Tensor>,
    pub label: bool,
}

/// Image and pixel metrics for one category.
pub fn category_metrics(category: &str, scored: &[ScoredSample], pooling: PixelPooling) -> CategoryMetrics {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    let masked: Vec<&ScoredSample> = scored.iter().filter(|s| s.mask.is_some()).collect();
    let pixels = masked.iter().map(|s| s.map.len()).sum();
    let (pixel_auroc, pixel_ap) = if masked.is_empty() {
        (None, None)
    } else {
        match pooling {
            PixelPooling::Pooled => {
                let ps: Vec<f64> = masked.iter().flat_map(|s| s.map.data().iter().copied()).collect();
                let pl: Vec<bool> = masked.iter().flat_map(|s| s.mask.as_ref().unwrap().data().iter().map(|&v| v > 0.5)).collect();
                (auroc(&ps, &pl), average_precision(&ps, &pl))
            }
            PixelPooling::PerImage => {
                let per = |f: fn(&[f64], &[bool]) -> Option<f64>| {
                    mean_of(masked.iter().map(|s| {
                        let l: Vec<bool> = s.mask.as_ref().unwrap().data().iter().map(|&v| v > 0.5).collect();
                        f(s.map.data(), &l)
                    }))
                };
                (per(auroc), per(average_precision))
            }
        }
    };
    CategoryMetrics {
        category: category.to_string(),
        images: scored.len(),
        pixels,
        image_auroc: auroc(&scores, &labels),
        image_ap: average_precision(&scores, &labels),
        pixel_auroc,
        pixel_ap,
    }
}

const EVAL_CHUNK: usize = 8;

/// Score every sample in manifest order at the model's input resolution.
pub fn score_samples(model: &CopsModel, samples: &[&Sample], seed: u64) -> Result<Vec<ScoredSample>> {
    let (h, w) = (model.config.model.image_height, model.config.model.image_width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = model.config.inference.shared_samples.then(|| draw_noise(model, &mut rng));
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut feats = Vec::with_capacity(chunk.len());
        let mut noise = Vec::with_capacity(chunk.len());
        for s in chunk {
            feats.push(model.encode_image(&s.image_resized(h, w)?)?);
            noise.push(shared.clone().unwrap_or_else(|| draw_noise(model, &mut rng)));
        }
        let refs: Vec<_> = feats.iter().map(|(g, f)| (g, f)).collect();
        let results = predict_features(model, &refs, &noise, false)?;
        for (s, r) in chunk.iter().zip(results) {
            out.push(ScoredSample { score: r.score, map: r.map, mask: s.mask_resized(h, w)?, label: s.label == 1 });
        }
    }
    Ok(out)
}

/// Evaluate a model on every category of a manifest.
pub fn evaluate(model: &CopsModel, manifest: &DatasetManifest, seed: u64) -> Result<MetricReport> {
    if manifest.is_empty() {
        log::warn!("evaluation manifest is empty");
    }
    let order: Vec<&Sample> = manifest.samples.iter().collect();
    let scored = score_samples(model, &order, seed)?;
    let mut per_cat = Vec::new();
    for category in manifest.categories() {
        let group: Vec<ScoredSample> =
            order.iter().zip(&scored).filter(|(s, _)| s.category == category).map(|(_, r)| r.clone()).collect();
        if group.is_empty() {
            log::warn!("category {category} has no samples, skipped");
            continue;
        }
        per_cat.push(category_metrics(&category, &group, model.config.inference.pixel_pooling));
    }
    Ok(MetricReport::from_categories(per_cat))
}
