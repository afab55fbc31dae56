//! Explicit state-token synthesis: prototypes by cross-attention from
//! learnable queries to patch features, and the center loss tying patches to
//! their nearest prototype of the matching state.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::autodiff::{AttentionSpec, Tape, Var};
use crate::backbone::LocalFeatureMap;
use crate::error::{CopsError, Result};
use crate::params::{param_struct, Bind, Mlp};
use crate::tensor::Tensor;

/// Floor applied to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

static CLAMPED_NORMS: AtomicUsize = AtomicUsize::new(0);

/// Number of rows whose norm was raised to [`NORM_EPS`] so far in this process.
pub fn clamped_norm_count() -> usize {
    CLAMPED_NORMS.load(Ordering::Relaxed)
}

pub(crate) fn record_clamped_norms(t: &Tensor) {
    let n = (0..t.rows()).filter(|&r| t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt() < NORM_EPS).count();
    if n > 0 {
        CLAMPED_NORMS.fetch_add(n, Ordering::Relaxed);
        log::debug!("{n} near-zero rows clamped to norm {NORM_EPS}");
    }
}

param_struct! {
    pub struct PrototypeExtractorParams => PrototypeExtractorVars {
        pub normal_queries: Tensor,
        pub anomaly_queries: Tensor,
        pub wq: Tensor,
        pub wk: Tensor,
        pub wv: Tensor,
        pub ffn: Mlp,
    }
}

impl PrototypeExtractorParams {
    /// Queries are drawn with `query_std`, projections and feed-forward with `weight_std`.
    pub fn new<R: rand::Rng + ?Sized>(m: usize, c: usize, query_std: f64, weight_std: f64, rng: &mut R) -> Self {
        Self {
            normal_queries: Tensor::randn(m, c, query_std, rng),
            anomaly_queries: Tensor::randn(m, c, query_std, rng),
            wq: Tensor::randn(c, c, weight_std, rng),
            wk: Tensor::randn(c, c, weight_std, rng),
            wv: Tensor::randn(c, c, weight_std, rng),
            ffn: Mlp::new(c, c, weight_std, rng),
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.normal_queries.rows()
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub normal: Tensor,
    pub anomaly: Tensor,
}

impl PrototypeExtractorVars {
    fn one_state(&self, tape: &mut Tape, queries: Var, k: Var, v: Var, heads: usize) -> Var {
        let (m, c) = tape.value(queries).shape();
        let hw = tape.value(k).rows();
        let q = tape.matmul(queries, self.wq);
        let spec = AttentionSpec { heads, scale: 1.0 / (c as f64).sqrt(), causal: false, q_block: m, k_block: hw };
        let a = tape.attention(q, k, v, spec);
        let t = tape.add(a, queries);
        let f = self.ffn.apply(tape, t);
        tape.add(f, t)
    }

    /// `(P_n, P_a)` for the features `f` (`HW × C`).
    pub fn extract(&self, tape: &mut Tape, f: Var, heads: usize) -> (Var, Var) {
        let k = tape.matmul(f, self.wk);
        let v = tape.matmul(f, self.wv);
        let pn = self.one_state(tape, self.normal_queries, k, v, heads);
        let pa = self.one_state(tape, self.anomaly_queries, k, v, heads);
        (pn, pa)
    }
}

pub fn extract_prototypes(f: &LocalFeatureMap, params: &PrototypeExtractorParams, heads: usize) -> Result<PrototypeSet> {
    let c = params.dim();
    if f.num_patches() == 0 {
        return Err(CopsError::InvalidArgument("no patch features".into()));
    }
    if f.dim() != c {
        return Err(CopsError::shape("extract_prototypes", format!("features have width {}, expected {c}", f.dim())));
    }
    if heads == 0 || c % heads != 0 {
        return Err(CopsError::InvalidArgument(format!("{heads} heads do not divide width {c}")));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let fv = tape.constant(f.features.clone());
    let (pn, pa) = vars.extract(&mut tape, fv, heads);
    Ok(PrototypeSet { normal: tape.value(pn).clone(), anomaly: tape.value(pa).clone() })
}

/// Nearest-prototype cosine distance per patch, `HW × 1`.
pub fn nn_distances_var(tape: &mut Tape, f: Var, p: Var) -> Var {
    record_clamped_norms(tape.value(f));
    record_clamped_norms(tape.value(p));
    let fnorm = tape.normalize_rows(f, NORM_EPS);
    let pnorm = tape.normalize_rows(p, NORM_EPS);
    let cos = tape.matmul_t(fnorm, pnorm);
    let d = tape.affine(cos, -1.0, 1.0);
    tape.row_min(d)
}

pub fn nn_distances(f: &LocalFeatureMap, p: &Tensor) -> Result<Vec<f64>> {
    if p.rows() == 0 {
        return Err(CopsError::InvalidArgument("no prototypes".into()));
    }
    if p.cols() != f.dim() {
        return Err(CopsError::shape("nn_distances", format!("prototypes have width {}, features {}", p.cols(), f.dim())));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.features.clone());
    let pv = tape.constant(p.clone());
    let d = nn_distances_var(&mut tape, fv, pv);
    Ok(tape.value(d).data().to_vec())
}

/// Mean over patches of the normal distance on normal patches and the
/// anomaly distance on anomalous patches.
pub fn center_loss_var(tape: &mut Tape, f: Var, pn: Var, pa: Var, y: &[f64]) -> Var {
    let dn = nn_distances_var(tape, f, pn);
    let da = nn_distances_var(tape, f, pa);
    let wy = tape.constant(Tensor::column(y));
    let wn = tape.constant(Tensor::column(&y.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));
    let a = tape.mul(dn, wn);
    let b = tape.mul(da, wy);
    let s = tape.add(a, b);
    tape.mean(s)
}

pub(crate) fn check_binary(y: &[f64], what: &str) -> Result<()> {
    match y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        Some(v) => Err(CopsError::InvalidArgument(format!("{what} must be binary, found {v}"))),
        None => Ok(()),
    }
}

pub fn center_loss(f: &LocalFeatureMap, pn: &Tensor, pa: &Tensor, y: &[f64]) -> Result<f64> {
    if y.len() != f.num_patches() {
        return Err(CopsError::shape(
            "center_loss",
            format!("{} labels for {} patches", y.len(), f.num_patches()),
        ));
    }
    check_binary(y, "patch labels")?;
    for p in [pn, pa] {
        if p.cols() != f.dim() || p.rows() == 0 {
            return Err(CopsError::shape("center_loss", "prototype shape does not match features".into()));
        }
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.features.clone());
    let a = tape.constant(pn.clone());
    let b = tape.constant(pa.clone());
    let l = center_loss_var(&mut tape, fv, a, b, y);
    Ok(tape.value(l).item())
}
