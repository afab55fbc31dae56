//! Image score and pixel anomaly map for unseen images.

use rand::Rng;

use crate::autodiff::Tape;
use crate::backbone::{GlobalFeature, ImageTensor, LocalFeatureMap};
use crate::config::SamplingMode;
use crate::error::{CopsError, Result};
use crate::ests::PrototypeSet;
use crate::icts::standard_normal;
use crate::model::{CopsModel, GroupMask, ImageInput};
use crate::saga::{RefinedScores, SimilarityBundle, SpatialMask, TextEmbeddingPair};
use crate::tensor::Tensor;

/// Intermediate values of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub global: GlobalFeature,
    pub local: LocalFeatureMap,
    pub prototypes: Option<PrototypeSet>,
    pub class_tokens: Option<Tensor>,
    pub embeddings: TextEmbeddingPair,
    pub mask: SpatialMask,
    pub bundle: SimilarityBundle,
    pub refined: RefinedScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    /// Image-level anomaly score.
    pub score: f64,
    /// Smoothed full-resolution anomaly map.
    pub map: Tensor,
    pub diagnostics: Option<Box<Diagnostics>>,
}

/// Class-token noise for one image (`R × C`, possibly zero rows).
pub fn draw_noise<R: Rng + ?Sized>(model: &CopsModel, rng: &mut R) -> Tensor {
    standard_normal(model.samples_per_image(), model.config.model.embed_dim, rng)
}

/// Predict from cached features, one noise matrix per image.
pub fn predict_features(
    model: &CopsModel,
    features: &[(&GlobalFeature, &LocalFeatureMap)],
    noise: &[Tensor],
    keep_diagnostics: bool,
) -> Result<Vec<AnomalyResult>> {
    if features.len() != noise.len() {
        return Err(CopsError::InvalidArgument(format!("{} images but {} noise draws", features.len(), noise.len())));
    }
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &model.config;
    let r = model.samples_per_image();
    for (n, (g, f)) in noise.iter().zip(features) {
        if n.shape() != (r, cfg.model.embed_dim) {
            return Err(CopsError::shape("predict", format!("noise is {}x{}, expected {r}x{}", n.rows(), n.cols(), cfg.model.embed_dim)));
        }
        if f.grid != (cfg.model.image_height / cfg.model.patch_size, cfg.model.image_width / cfg.model.patch_size) || g.dim() != cfg.model.embed_dim {
            return Err(CopsError::shape("predict", "features do not match the model configuration".into()));
        }
    }
    let inputs: Vec<ImageInput<'_>> = features
        .iter()
        .zip(noise)
        .map(|((g, f), n)| ImageInput { global: g, local: f, class_noise: n.clone(), elbo_noise: None })
        .collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, GroupMask::default());
    let outputs = model.forward(&mut tape, &bound, &inputs, SamplingMode::Prior);
    outputs
        .into_iter()
        .zip(features)
        .map(|(out, (g, f))| {
            let up = tape.value(out.map_anomaly);
            let map = gaussian_filter(up, cfg.inference.gaussian_sigma)?;
            let score = tape.value(out.score_anomaly).item();
            let diagnostics = keep_diagnostics.then(|| {
                let v = |x| tape.value(x).data().to_vec();
                let e = tape.value(out.embeddings);
                Box::new(Diagnostics {
                    global: (*g).clone(),
                    local: (*f).clone(),
                    prototypes: out.prototypes.map(|(a, b)| PrototypeSet {
                        normal: tape.value(a).clone(),
                        anomaly: tape.value(b).clone(),
                    }),
                    class_tokens: out.class_tokens.map(|s| tape.value(s).clone()),
                    embeddings: TextEmbeddingPair { normal: e.slice_rows(0, 1), anomaly: e.slice_rows(1, 1) },
                    mask: SpatialMask { values: out.mask.clone(), alpha: cfg.saga.alpha },
                    bundle: SimilarityBundle {
                        local_normal: v(out.local_normal),
                        local_anomaly: v(out.local_anomaly),
                        global_normal: tape.value(out.global_normal).item(),
                        global_anomaly: tape.value(out.global_anomaly).item(),
                        tau: cfg.saga.tau,
                    },
                    refined: RefinedScores {
                        local_normal: v(out.refined_normal),
                        local_anomaly: v(out.refined_anomaly),
                        global_normal: tape.value(out.score_normal).item(),
                        global_anomaly: score,
                        beta: if cfg.train.enable_saga { cfg.saga.beta } else { 1.0 },
                    },
                })
            });
            Ok(AnomalyResult { score, map, diagnostics })
        })
        .collect()
}

/// Full pipeline for one image with class tokens drawn from the prior.
pub fn predict<R: Rng + ?Sized>(image: &ImageTensor, model: &CopsModel, rng: &mut R) -> Result<AnomalyResult> {
    let (g, f) = model.encode_image(image)?;
    let noise = draw_noise(model, rng);
    let mut out = predict_features(model, &[(&g, &f)], &[noise], true)?;
    Ok(out.remove(0))
}

/// Raw map bytes: `u32` height, `u32` width, then `f32` values, all little-endian.
pub fn encode_raw_map(map: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * map.len());
    out.extend_from_slice(&(map.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(map.cols() as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw_map(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(CopsError::InvalidArgument("raw map shorter than its header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if Some(body.len()) != h.checked_mul(w).and_then(|n| n.checked_mul(4)) {
        return Err(CopsError::InvalidArgument(format!("raw map header says {h}x{w} but carries {} bytes", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::from_vec(h, w, data)
}

/// Mirror an out-of-range index back into `0..n` (edge sample repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing with kernel radius `ceil(3σ)` and reflected borders.
pub fn gaussian_filter(map: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(CopsError::InvalidArgument(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    if sigma == 0.0 || map.is_empty() {
        return Ok(map.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.shape();
    let mut tmp = Tensor::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * map.get(i, reflect(j as isize + t as isize - r, w));
            }
            tmp.set(i, j, acc);
        }
    }
    let mut out = Tensor::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp.get(reflect(i as isize + t as isize - r, h), j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}
