//! Spatially-aware glocal alignment.
//!
//! Text embeddings are averaged over the sampled prompt pairs and compared by
//! cosine similarity with the global feature and every patch feature. A
//! spatial mask built from prototype distances reweights the local maps, the
//! global score is blended with the strongest local response, and the whole
//! chain is trained with Dice, focal and binary cross-entropy terms.

use crate::autodiff::{Tape, Var};
use crate::backbone::{GlobalFeature, LocalFeatureMap, TextBackbone};
use crate::config::{MaskNorm, SagaConfig};
use crate::ests::{check_binary, record_clamped_norms, NORM_EPS};
use crate::error::{CopsError, Result};
use crate::prompts::PromptPair;
use crate::tensor::Tensor;

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Norms below this make the corresponding mask term vanish.
pub const MASK_NORM_EPS: f64 = 1e-8;
const PAIR_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingPair {
    pub normal: Tensor,
    pub anomaly: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBundle {
    pub local_normal: Vec<f64>,
    pub local_anomaly: Vec<f64>,
    pub global_normal: f64,
    pub global_anomaly: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    pub values: Vec<f64>,
    pub alpha: f64,
}

impl SpatialMask {
    /// Neutral mask, used when prototypes are unavailable or refinement is off.
    pub fn ones(n: usize) -> Self {
        Self { values: vec![1.0; n], alpha: f64::NAN }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedScores {
    pub local_normal: Vec<f64>,
    pub local_anomaly: Vec<f64>,
    pub global_normal: f64,
    pub global_anomaly: f64,
    pub beta: f64,
}

/// Row 0: mean of the first `r` embeddings (normal); row 1: mean of the next `r`.
pub fn mean_embeddings_var(tape: &mut Tape, encoded: Var, r: usize) -> Var {
    let w = 1.0 / r as f64;
    let avg = Tensor::from_fn(2, 2 * r, |i, j| if j / r == i { w } else { 0.0 });
    let avg = tape.constant(avg);
    tape.matmul(avg, encoded)
}

pub fn compute_text_embeddings(pairs: &[PromptPair], tb: &TextBackbone) -> Result<TextEmbeddingPair> {
    if pairs.is_empty() {
        return Err(CopsError::InvalidArgument("no prompt pairs to embed".into()));
    }
    let (l, c) = (tb.cfg.prompt_len, tb.cfg.embed_dim);
    for p in pairs {
        for t in [&p.normal, &p.anomaly] {
            if t.shape() != (l, c) {
                return Err(CopsError::shape(
                    "compute_text_embeddings",
                    format!("prompt is {}x{}, expected {l}x{c}", t.rows(), t.cols()),
                ));
            }
        }
    }
    let r = pairs.len();
    let parts: Vec<&Tensor> = pairs.iter().map(|p| &p.normal).chain(pairs.iter().map(|p| &p.anomaly)).collect();
    let mut tape = Tape::new();
    let vars = tb.bind(&mut tape, false);
    let stacked = tape.constant(Tensor::concat_rows(&parts)?);
    let enc = tb.encode_var(&mut tape, &vars, stacked, 2 * r);
    let e = mean_embeddings_var(&mut tape, enc, r);
    let e = tape.value(e);
    Ok(TextEmbeddingPair { normal: e.slice_rows(0, 1), anomaly: e.slice_rows(1, 1) })
}

/// Two-way softmax of cosine similarities for each row of `x` against the
/// normal (row 0) and anomaly (row 1) embeddings of `e`. Returns the normal
/// and anomaly probability columns.
pub fn similarity_var(tape: &mut Tape, e: Var, x: Var, tau: f64) -> (Var, Var) {
    record_clamped_norms(tape.value(e));
    record_clamped_norms(tape.value(x));
    let en = tape.normalize_rows(e, NORM_EPS);
    let xn = tape.normalize_rows(x, NORM_EPS);
    let cos = tape.matmul_t(xn, en);
    let contrast = tape.constant(Tensor::column(&[-1.0 / tau, 1.0 / tau]));
    let logit = tape.matmul(cos, contrast);
    let sa = tape.sigmoid(logit);
    let neg = tape.scale(logit, -1.0);
    let sn = tape.sigmoid(neg);
    (sn, sa)
}

pub fn initial_similarities(
    e: &TextEmbeddingPair,
    f: &LocalFeatureMap,
    g: &GlobalFeature,
    tau: f64,
) -> Result<SimilarityBundle> {
    if !(tau > 0.0) {
        return Err(CopsError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let c = f.dim();
    if g.dim() != c || e.normal.shape() != (1, c) || e.anomaly.shape() != (1, c) {
        return Err(CopsError::shape("initial_similarities", "embedding and feature widths differ".into()));
    }
    let mut tape = Tape::new();
    let ev = tape.constant(Tensor::concat_rows(&[&e.normal, &e.anomaly])?);
    let xv = tape.constant(Tensor::concat_rows(&[g.as_tensor(), &f.features])?);
    let (sn, sa) = similarity_var(&mut tape, ev, xv, tau);
    let (sn, sa) = (tape.value(sn).data(), tape.value(sa).data());
    Ok(SimilarityBundle {
        local_normal: sn[1..].to_vec(),
        local_anomaly: sa[1..].to_vec(),
        global_normal: sn[0],
        global_anomaly: sa[0],
        tau,
    })
}

fn mask_norm(d: &[f64], norm: MaskNorm) -> f64 {
    match norm {
        MaskNorm::L2 => d.iter().map(|x| x * x).sum::<f64>().sqrt(),
        MaskNorm::Max => d.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
    }
}

pub fn spatial_mask(dn: &[f64], da: &[f64], alpha: f64, norm: MaskNorm) -> Result<SpatialMask> {
    if dn.len() != da.len() {
        return Err(CopsError::shape("spatial_mask", format!("{} vs {} distances", dn.len(), da.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CopsError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if let Some(v) = dn.iter().chain(da).find(|v| !(**v >= 0.0)) {
        return Err(CopsError::InvalidArgument(format!("distances must be non-negative, found {v}")));
    }
    let (nn, na) = (mask_norm(dn, norm), mask_norm(da, norm));
    let values = dn
        .iter()
        .zip(da)
        .map(|(n, a)| {
            let tn = if nn < MASK_NORM_EPS { 0.0 } else { n / nn };
            let ta = if na < MASK_NORM_EPS { 0.0 } else { a / na };
            alpha * tn + (1.0 - alpha) * (1.0 - ta)
        })
        .collect();
    Ok(SpatialMask { values, alpha })
}

/// Masked local map and blended global score, on the tape.
pub fn refine_var(tape: &mut Tape, local: Var, global: Var, mask: &[f64], beta: f64) -> (Var, Var) {
    let m = tape.constant(Tensor::column(mask));
    let refined = tape.mul(local, m);
    let peak = tape.max_all(refined);
    let a = tape.scale(global, beta);
    let b = tape.scale(peak, 1.0 - beta);
    let g = tape.add(a, b);
    (refined, g)
}

pub fn refine(bundle: &SimilarityBundle, mask: &SpatialMask, beta: f64) -> Result<RefinedScores> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(CopsError::InvalidArgument(format!("beta {beta} outside [0, 1]")));
    }
    let n = bundle.local_anomaly.len();
    if mask.values.len() != n || bundle.local_normal.len() != n || n == 0 {
        return Err(CopsError::shape("refine", format!("mask has {} entries for {n} patches", mask.values.len())));
    }
    let mut tape = Tape::new();
    let mut one = |local: &[f64], global: f64| {
        let l = tape.constant(Tensor::column(local));
        let g = tape.constant(Tensor::scalar(global));
        let (l, g) = refine_var(&mut tape, l, g, &mask.values, beta);
        (tape.value(l).data().to_vec(), tape.value(g).item())
    };
    let (local_normal, global_normal) = one(&bundle.local_normal, bundle.global_normal);
    let (local_anomaly, global_anomaly) = one(&bundle.local_anomaly, bundle.global_anomaly);
    Ok(RefinedScores { local_normal, local_anomaly, global_normal, global_anomaly, beta })
}

/// Bilinear interpolation weights `out × input` with half-pixel centers and
/// edge clamping.
pub fn bilinear_matrix(out: usize, input: usize) -> Tensor {
    let mut u = Tensor::zeros(out, input);
    let ratio = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        let row = u.row_slice_mut(i);
        row[i0] += 1.0 - frac;
        row[i1] += frac;
    }
    u
}

/// Upsample an `HW × 1` column laid out row-major on `grid` to `target`.
pub fn upsample_var(tape: &mut Tape, column: Var, grid: (usize, usize), target: (usize, usize)) -> Var {
    let m = tape.reshape(column, grid.0, grid.1);
    let uh = tape.constant(bilinear_matrix(target.0, grid.0));
    let uw = tape.constant(bilinear_matrix(target.1, grid.1));
    let a = tape.matmul(uh, m);
    tape.matmul_t(a, uw)
}

pub fn upsample_map(map: &[f64], grid: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
    if map.len() != grid.0 * grid.1 || map.is_empty() {
        return Err(CopsError::shape("upsample_map", format!("{} values for grid {grid:?}", map.len())));
    }
    if target.0 < grid.0 || target.1 < grid.1 {
        return Err(CopsError::InvalidArgument(format!("target {target:?} smaller than grid {grid:?}")));
    }
    let mut tape = Tape::new();
    let col = tape.constant(Tensor::column(map));
    let up = upsample_var(&mut tape, col, grid, target);
    Ok(tape.value(up).clone())
}

fn dice_var(tape: &mut Tape, p: Var, target: &Tensor, eps: f64) -> Var {
    let t = tape.constant(target.clone());
    let pq = tape.mul(p, t);
    let inter = tape.sum(pq);
    let sp = tape.sum(p);
    let num = tape.affine(inter, 2.0, eps);
    let den = tape.affine(sp, 1.0, target.sum() + eps);
    let ratio = tape.div(num, den);
    tape.affine(ratio, -1.0, 1.0)
}

/// Per-term values of the glocal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlocalTerms {
    pub dice_anomaly: f64,
    pub dice_normal: f64,
    pub focal: f64,
    pub bce: f64,
}

impl GlocalTerms {
    pub fn total(&self) -> f64 {
        self.dice_anomaly + self.dice_normal + self.focal + self.bce
    }
}

/// `(dice_anomaly, dice_normal, focal, bce)` on the tape.
pub fn glocal_terms_var(
    tape: &mut Tape,
    sn: Var,
    sa: Var,
    sg_a: Var,
    y: &Tensor,
    cfg: &SagaConfig,
) -> [Var; 4] {
    let inv = y.map(|v| 1.0 - v);
    let dice_a = dice_var(tape, sa, y, cfg.dice_eps);
    let dice_n = dice_var(tape, sn, &inv, cfg.dice_eps);

    let total = tape.add(sa, sn);
    let num = tape.affine(sa, 1.0, PAIR_EPS);
    let den = tape.affine(total, 1.0, 2.0 * PAIR_EPS);
    let q = tape.div(num, den);
    let q = tape.clamp(q, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let sign = tape.constant(y.map(|v| 2.0 * v - 1.0));
    let offset = tape.constant(inv.clone());
    let qs = tape.mul(q, sign);
    let pt = tape.add(qs, offset);
    let miss = tape.affine(pt, -1.0, 1.0);
    let focus = tape.powf(miss, cfg.focal_gamma);
    let logp = tape.ln(pt);
    let weight = tape.constant(y.map(|v| if v == 1.0 { cfg.focal_alpha } else { 1.0 - cfg.focal_alpha }));
    let wf = tape.mul(weight, focus);
    let fl = tape.mul(wf, logp);
    let fl = tape.mean(fl);
    let focal = tape.scale(fl, -1.0);

    let target = y.data().iter().fold(0.0, |m: f64, v| m.max(*v));
    let p = tape.clamp(sg_a, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let bce = if target == 1.0 {
        let l = tape.ln(p);
        tape.scale(l, -1.0)
    } else {
        let c = tape.affine(p, -1.0, 1.0);
        let l = tape.ln(c);
        tape.scale(l, -1.0)
    };
    [dice_a, dice_n, focal, bce]
}

pub fn glocal_loss_var(tape: &mut Tape, sn: Var, sa: Var, sg_a: Var, y: &Tensor, cfg: &SagaConfig) -> Var {
    let [a, b, c, d] = glocal_terms_var(tape, sn, sa, sg_a, y, cfg);
    let ab = tape.add(a, b);
    let cd = tape.add(c, d);
    tape.add(ab, cd)
}

/// Binary cross-entropy of the global anomaly score alone (mask-free samples).
pub fn global_bce_var(tape: &mut Tape, sg_a: Var, label: f64) -> Var {
    let p = tape.clamp(sg_a, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let p = if label == 1.0 { p } else { tape.affine(p, -1.0, 1.0) };
    let l = tape.ln(p);
    tape.scale(l, -1.0)
}

fn check_glocal_inputs(sn: &Tensor, sa: &Tensor, y: &Tensor) -> Result<()> {
    if sn.shape() != y.shape() || sa.shape() != y.shape() {
        return Err(CopsError::shape("glocal_loss", "maps and mask must share a shape".into()));
    }
    check_binary(y.data(), "ground-truth mask")
}

pub fn glocal_terms(sn: &Tensor, sa: &Tensor, sg_a: f64, y: &Tensor, cfg: &SagaConfig) -> Result<GlocalTerms> {
    check_glocal_inputs(sn, sa, y)?;
    let mut tape = Tape::new();
    let a = tape.constant(sn.clone());
    let b = tape.constant(sa.clone());
    let g = tape.constant(Tensor::scalar(sg_a));
    let t = glocal_terms_var(&mut tape, a, b, g, y, cfg).map(|v| tape.value(v).item());
    Ok(GlocalTerms { dice_anomaly: t[0], dice_normal: t[1], focal: t[2], bce: t[3] })
}

pub fn glocal_loss(sn: &Tensor, sa: &Tensor, sg_a: f64, y: &Tensor, cfg: &SagaConfig) -> Result<f64> {
    Ok(glocal_terms(sn, sa, sg_a, y, cfg)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle_of(ln: Vec<f64>, la: Vec<f64>, gn: f64, ga: f64) -> SimilarityBundle {
        SimilarityBundle { local_normal: ln, local_anomaly: la, global_normal: gn, global_anomaly: ga, tau: 0.07 }
    }

    #[test]
    fn equal_cosines_split_evenly() {
        let e = TextEmbeddingPair { normal: Tensor::row(&[1.0, 0.0]), anomaly: Tensor::row(&[0.0, 1.0]) };
        let f = LocalFeatureMap::new((1, 1), Tensor::row(&[1.0, 1.0])).unwrap();
        let b = initial_similarities(&e, &f, &GlobalFeature::new(&[2.0, 0.0]), 0.07).unwrap();
        assert!((b.local_normal[0] - 0.5).abs() < 1e-15);
        assert!((b.local_anomaly[0] - 0.5).abs() < 1e-15);
        let expected = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
        assert!((b.global_normal - expected).abs() < 1e-15);
        assert!((b.global_normal - 0.99999938).abs() < 1e-8);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let e = TextEmbeddingPair { normal: Tensor::row(&[1.0]), anomaly: Tensor::row(&[1.0]) };
        let f = LocalFeatureMap::new((1, 1), Tensor::row(&[1.0])).unwrap();
        assert!(initial_similarities(&e, &f, &GlobalFeature::new(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn mask_hand_example() {
        let m = spatial_mask(&[3.0, 4.0], &[4.0, 3.0], 0.3, MaskNorm::L2).unwrap();
        assert!((m.values[0] - 0.32).abs() < 1e-12);
        assert!((m.values[1] - 0.52).abs() < 1e-12);
    }

    #[test]
    fn mask_limits_and_errors() {
        let dn = [1.0, 2.0, 2.0];
        let da = [0.0, 3.0, 4.0];
        let m = spatial_mask(&dn, &da, 1.0, MaskNorm::L2).unwrap();
        assert_eq!(m.values, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        let m = spatial_mask(&dn, &da, 0.0, MaskNorm::L2).unwrap();
        assert_eq!(m.values, vec![1.0, 1.0 - 3.0 / 5.0, 1.0 - 4.0 / 5.0]);
        let m = spatial_mask(&[0.0, 0.0], &[0.0, 0.0], 0.5, MaskNorm::L2).unwrap();
        assert_eq!(m.values, vec![0.5, 0.5]);
        assert!(spatial_mask(&[-1.0], &[1.0], 0.5, MaskNorm::L2).is_err());
        let m = spatial_mask(&[1.0, 2.0], &[2.0, 4.0], 0.5, MaskNorm::Max).unwrap();
        assert_eq!(m.values, vec![0.5 * 0.5 + 0.5 * 0.5, 0.5]);
    }

    #[test]
    fn refine_limits() {
        let b = bundle_of(vec![0.7, 0.4], vec![0.3, 0.6], 0.8, 0.2);
        let r = refine(&b, &SpatialMask::ones(2), 1.0).unwrap();
        assert_eq!(r.local_anomaly, b.local_anomaly);
        assert_eq!(r.global_anomaly, 0.2);
        let mask = SpatialMask { values: vec![0.5, 2.0], alpha: 0.3 };
        let r = refine(&b, &mask, 0.0).unwrap();
        assert_eq!(r.global_anomaly, 1.2);
        assert_eq!(r.local_normal, vec![0.35, 0.8]);
    }

    #[test]
    fn upsampling_preserves_constants_and_range() {
        let up = upsample_map(&[0.25; 6], (2, 3), (8, 12)).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let up = upsample_map(&[0.9], (1, 1), (5, 4)).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.9).abs() < 1e-15));
        let up = upsample_map(&[0.0, 1.0, 1.0, 0.0], (2, 2), (4, 4)).unwrap();
        assert!(up.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(up.get(0, 0), 0.0);
        assert!((up.get(1, 1) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let y = Tensor::from_fn(4, 4, |i, j| if i < 2 && j < 3 { 1.0 } else { 0.0 });
        let sa = y.clone();
        let sn = y.map(|v| 1.0 - v);
        let l = glocal_loss(&sn, &sa, 1.0, &y, &SagaConfig::default()).unwrap();
        assert!((0.0..=1e-5).contains(&l), "{l}");
        let zero = Tensor::zeros(4, 4);
        let l = glocal_loss(&Tensor::ones(4, 4), &zero, 0.0, &zero, &SagaConfig::default()).unwrap();
        assert!((0.0..=1e-5).contains(&l), "{l}");
    }

    #[test]
    fn non_binary_mask_rejected() {
        let y = Tensor::filled(2, 2, 0.5);
        assert!(glocal_loss(&y, &y, 0.5, &y, &SagaConfig::default()).is_err());
    }
}
