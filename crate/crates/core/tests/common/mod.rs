#![allow(dead_code)]

pub mod oracle;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cops_core::autodiff::Tape;
use cops_core::backbone::{GlobalFeature, LocalFeatureMap};
use cops_core::config::{MaskNorm, ModelConfig, Reduction, RunConfig, SagaConfig, Variant};
use cops_core::data::{synth_dataset, Sample};
use cops_core::ests::{center_loss, extract_prototypes, nn_distances, PrototypeExtractorParams};
use cops_core::icts::{reparameterize, vae_decode, vae_encode, vae_loss, VaeParams};
use cops_core::metrics::{auroc, average_precision, evaluate, MetricReport};
use cops_core::model::{CopsModel, Group, GroupMask};
use cops_core::params::VarList;
use cops_core::saga::{glocal_loss, initial_similarities, refine, spatial_mask, SimilarityBundle, SpatialMask, TextEmbeddingPair};
use cops_core::training::{loss_terms, train_items, ActiveTerms, TrainItem, Trainer};
use cops_core::Tensor;

use oracle::Mat;

pub type Outcome = std::result::Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: usize, c: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(r, c, std, rng)
}

pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Smallest toy model: `C = 8`, a 2×2 patch grid, two prototypes and two samples.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        embed_dim: 8,
        patch_size: 4,
        image_height: 8,
        image_width: 8,
        vision_layers: 1,
        vision_heads: 2,
        text_layers: 9,
        text_heads: 2,
        context_len: 2,
        state_len: 2,
        class_len: 2,
        samples: 2,
        ests_heads: 2,
        init_std: 0.2,
        backbone_seed: 0,
    };
    cfg.train.batch_size = 2;
    cfg.train.epochs = 2;
    cfg.inference.gaussian_sigma = 1.0;
    cfg
}

/// Train and test samples at the toy size; the train split holds normal and anomalous images.
pub fn toy_data(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let (train, test) = synth_dataset(2, 4, (8, 8), seed).unwrap();
    (train.samples, test.samples)
}

fn track(max_err: &mut f64, a: f64, b: f64) {
    let e = (a - b).abs();
    *max_err = if e.is_nan() { f64::INFINITY } else { max_err.max(e) };
}

fn track_all(max_err: &mut f64, a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        track(max_err, *x, *y);
    }
}

fn track_mat(max_err: &mut f64, a: &Tensor, b: &Mat) {
    track_all(max_err, a.data(), &b.concat());
}

pub const ORACLE_INSTANCES: usize = 25;
pub const ORACLE_TOL: f64 = 1e-9;

/// Maximum absolute error of every operation against its loop oracle.
pub fn oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut errs = Vec::new();
    let dims = [(4usize, 1usize), (4, 2), (8, 2), (8, 4), (6, 3)];

    let mut e = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let (c, heads) = dims[i % dims.len()];
        let m = r.random_range(1..=4);
        let hw = r.random_range(1..=9);
        let params = PrototypeExtractorParams::new(m, c, 0.7, 0.5, &mut r);
        let f = LocalFeatureMap::new((1, hw), randn(hw, c, 1.0, &mut r)).unwrap();
        let got = extract_prototypes(&f, &params, heads).unwrap();
        let (pn, pa) = oracle::extract(&oracle::mat(&f.features), &params, heads);
        track_mat(&mut e, &got.normal, &pn);
        track_mat(&mut e, &got.anomaly, &pa);
    }
    errs.push(("extract_prototypes", e));

    let mut e = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let c = dims[i % dims.len()].0;
        let hw = r.random_range(1..=9);
        let m = r.random_range(1..=5);
        let f = LocalFeatureMap::new((hw, 1), randn(hw, c, 1.0, &mut r)).unwrap();
        let p = randn(m, c, 1.0, &mut r);
        let got = nn_distances(&f, &p).unwrap();
        track_all(&mut e, &got, &oracle::nn_distances(&oracle::mat(&f.features), &oracle::mat(&p)));
    }
    errs.push(("nn_distances", e));

    let mut e = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let c = dims[i % dims.len()].0;
        let hw = r.random_range(1..=9);
        let f = LocalFeatureMap::new((hw, 1), randn(hw, c, 1.0, &mut r)).unwrap();
        let pn = randn(r.random_range(1..=4), c, 1.0, &mut r);
        let pa = randn(r.random_range(1..=4), c, 1.0, &mut r);
        let y: Vec<f64> = (0..hw).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let got = center_loss(&f, &pn, &pa, &y).unwrap();
        let want = oracle::center_loss(&oracle::mat(&f.features), &oracle::mat(&pn), &oracle::mat(&pa), &y);
        track(&mut e, got, want);
    }
    errs.push(("center_loss", e));

    let (mut e_enc, mut e_dec, mut e_rep, mut e_loss) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..ORACLE_INSTANCES {
        let c = dims[i % dims.len()].0;
        let params = VaeParams::new(c, 0.5, &mut r);
        let g = randn(1, c, 1.0, &mut r);
        let (mu, lv) = vae_encode(&GlobalFeature(g.clone()), &params).unwrap();
        let (omu, olv) = oracle::vae_encode(g.data(), &params);
        track_all(&mut e_enc, mu.data(), &omu);
        track_all(&mut e_enc, lv.data(), &olv);

        let rows = r.random_range(1..=4);
        let z = randn(rows, c, 1.0, &mut r);
        track_mat(&mut e_dec, &vae_decode(&z, &params).unwrap(), &oracle::vae_decode(&oracle::mat(&z), &params));

        let mu = randn(rows, c, 1.0, &mut r);
        let lv = randn(rows, c, 1.5, &mut r);
        let eps = randn(rows, c, 1.0, &mut r);
        let got = reparameterize(&mu, &lv, &eps).unwrap();
        let want = oracle::reparameterize(&oracle::mat(&mu), &oracle::mat(&lv), &oracle::mat(&eps));
        track_mat(&mut e_rep, &got, &want);

        let s = randn(1, c, 1.0, &mut r);
        let (mu, lv) = (randn(1, c, 0.8, &mut r), randn(1, c, 0.8, &mut r));
        for red in [Reduction::Sum, Reduction::Mean] {
            let got = vae_loss(&g, &s, &mu, &lv, red).unwrap();
            let want = oracle::vae_loss(g.data(), s.data(), mu.data(), lv.data(), red == Reduction::Mean);
            track(&mut e_loss, got, want);
        }
    }
    errs.push(("vae_encode", e_enc));
    errs.push(("vae_decode", e_dec));
    errs.push(("reparameterize", e_rep));
    errs.push(("vae_loss", e_loss));

    let mut e = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let c = dims[i % dims.len()].0;
        let hw = r.random_range(1..=9);
        let tau = [0.07, 0.5, 1.0][i % 3];
        let pair = TextEmbeddingPair { normal: randn(1, c, 1.0, &mut r), anomaly: randn(1, c, 1.0, &mut r) };
        let f = LocalFeatureMap::new((hw, 1), randn(hw, c, 1.0, &mut r)).unwrap();
        let g = GlobalFeature(randn(1, c, 1.0, &mut r));
        let b = initial_similarities(&pair, &f, &g, tau).unwrap();
        let mut x = vec![g.0.data().to_vec()];
        x.extend(oracle::mat(&f.features));
        let (sn, sa) = oracle::similarities(pair.normal.data(), pair.anomaly.data(), &x, tau);
        track(&mut e, b.global_normal, sn[0]);
        track(&mut e, b.global_anomaly, sa[0]);
        track_all(&mut e, &b.local_normal, &sn[1..]);
        track_all(&mut e, &b.local_anomaly, &sa[1..]);
    }
    errs.push(("initial_similarities", e));

    let mut e = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let n = r.random_range(1..=12);
        let dn: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        let da: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        let alpha = if i < 3 { i as f64 / 2.0 } else { r.random_range(0.0..=1.0) };
        let got = spatial_mask(&dn, &da, alpha, MaskNorm::L2).unwrap();
        track_all(&mut e, &got.values, &oracle::spatial_mask(&dn, &da, alpha));
    }
    errs.push(("spatial_mask", e));

    let mut e = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let n = r.random_range(1..=12);
        let mut v = |n| (0..n).map(|_| r.random_range(0.0..1.0)).collect::<Vec<f64>>();
        let bundle = SimilarityBundle {
            local_normal: v(n),
            local_anomaly: v(n),
            global_normal: v(1)[0],
            global_anomaly: v(1)[0],
            tau: 0.07,
        };
        let mask = SpatialMask { values: v(n), alpha: 0.3 };
        let beta = if i < 2 { i as f64 } else { r.random_range(0.0..=1.0) };
        let got = refine(&bundle, &mask, beta).unwrap();
        let (ln, gn) = oracle::refine(&bundle.local_normal, bundle.global_normal, &mask.values, beta);
        let (la, ga) = oracle::refine(&bundle.local_anomaly, bundle.global_anomaly, &mask.values, beta);
        track_all(&mut e, &got.local_normal, &ln);
        track_all(&mut e, &got.local_anomaly, &la);
        track(&mut e, got.global_normal, gn);
        track(&mut e, got.global_anomaly, ga);
    }
    errs.push(("refine", e));

    let mut e = 0.0;
    let cfg = SagaConfig::default();
    for i in 0..ORACLE_INSTANCES {
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let sa = Tensor::from_fn(h, w, |_, _| r.random_range(0.001..0.999));
        let sn = if i % 2 == 0 { sa.map(|v| 1.0 - v) } else { Tensor::from_fn(h, w, |_, _| r.random_range(0.001..0.999)) };
        let y = Tensor::from_fn(h, w, |_, _| if r.random_bool(0.3) { 1.0 } else { 0.0 });
        let sg = r.random_range(0.01..0.99);
        let got = glocal_loss(&sn, &sa, sg, &y, &cfg).unwrap();
        let want = oracle::glocal_loss(&oracle::mat(&sn), &oracle::mat(&sa), sg, &oracle::mat(&y), &cfg);
        track(&mut e, got, want);
    }
    errs.push(("glocal_loss", e));
    errs
}

pub fn check_equation_oracles() -> Outcome {
    let start = Instant::now();
    let errs = oracle_errors(11);
    let elapsed = start.elapsed();
    let worst = errs.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let detail = format!("{} ops x {ORACLE_INSTANCES} instances, worst {} = {:.2e}, {:.2}s", errs.len(), worst.0, worst.1, elapsed.as_secs_f64());
    let bad: Vec<String> = errs.iter().filter(|(_, e)| !(*e <= ORACLE_TOL)).map(|(n, e)| format!("{n}: {e:.3e}")).collect();
    if !bad.is_empty() {
        return Err(format!("{detail}; over tolerance: {}", bad.join(", ")));
    }
    if elapsed > Duration::from_secs(30) {
        return Err(format!("{detail}; too slow"));
    }
    Ok(detail)
}

/// One gradient comparison: parameter tensor, analytic and numeric entries.
pub struct GradCase {
    pub term: &'static str,
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCase {
    /// Norm-relative error; gradients that vanish on both sides compare absolutely.
    pub fn rel_error(&self) -> f64 {
        let diff = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < 1e-8 {
            diff
        } else {
            diff / scale
        }
    }
}

const FD_STEP: f64 = 1e-6;
const ENTRIES_PER_TENSOR: usize = 4;

fn term_value(model: &CopsModel, items: &[&TrainItem], noise: &[(Tensor, Option<Tensor>)], term: usize) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, GroupMask::default());
    let all = ActiveTerms { ests: true, icts: true, saga: true };
    let v = loss_terms(model, &mut tape, &bound, items, noise, all)[term].expect("term present");
    tape.value(v).item()
}

/// Smallest gap between the best and runner-up candidate of every min/max in the forward pass.
pub fn kink_margin(model: &CopsModel, items: &[&TrainItem], noise: &[(Tensor, Option<Tensor>)]) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, GroupMask::default());
    let inputs: Vec<_> = items
        .iter()
        .zip(noise)
        .map(|(it, (c, e))| cops_core::model::ImageInput { global: &it.global, local: &it.local, class_noise: c.clone(), elbo_noise: e.clone() })
        .collect();
    let outs = model.forward(&mut tape, &bound, &inputs, model.config.icts.train_sampling);
    let mut margin = f64::INFINITY;
    let gap = |mut v: Vec<f64>, descending: bool| {
        v.sort_by(|a, b| if descending { b.total_cmp(a) } else { a.total_cmp(b) });
        if v.len() < 2 {
            f64::INFINITY
        } else {
            (v[1] - v[0]).abs()
        }
    };
    for o in &outs {
        let f = oracle::mat(tape.value(o.local));
        if let Some((pn, pa)) = o.prototypes {
            for p in [pn, pa] {
                let p = oracle::mat(tape.value(p));
                for row in &f {
                    let d: Vec<f64> = p.iter().map(|q| 1.0 - oracle::cosine(row, q)).collect();
                    margin = margin.min(gap(d, false));
                }
            }
        }
        for m in [o.refined_normal, o.refined_anomaly] {
            margin = margin.min(gap(tape.value(m).data().to_vec(), true));
        }
    }
    margin
}

/// Analytic vs central-difference gradients of each loss term on its own groups.
pub fn gradient_cases(seed: u64) -> (Vec<GradCase>, f64) {
    let mut cfg = toy_config();
    cfg.train.seed = seed;
    let mut model = CopsModel::new(cfg).unwrap();
    let (train, _) = toy_data(seed);
    let normal = train.iter().find(|s| s.label == 0).unwrap();
    let anomalous = train.iter().find(|s| s.label == 1).unwrap();
    let items: Vec<TrainItem> = [normal, anomalous].iter().map(|s| TrainItem::from_sample(&model, s).unwrap()).collect();
    let refs: Vec<&TrainItem> = items.iter().collect();
    let mut r = rng(seed ^ 0xfd);
    let c = model.config.model.embed_dim;
    let rr = model.samples_per_image();
    let noise: Vec<(Tensor, Option<Tensor>)> =
        (0..refs.len()).map(|_| (randn(rr, c, 1.0, &mut r), Some(randn(1, c, 1.0, &mut r)))).collect();
    let margin = kink_margin(&model, &refs, &noise);

    let plan: [(&'static str, usize, &[Group]); 3] = [
        ("ests", 0, &[Group::Theta]),
        ("icts", 1, &[Group::Psi]),
        ("saga", 2, &[Group::Psi, Group::Omega, Group::Phi]),
    ];
    let mut cases = Vec::new();
    for (term, idx, groups) in plan {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, GroupMask::all());
        let all = ActiveTerms { ests: true, icts: true, saga: true };
        let root = loss_terms(&model, &mut tape, &bound, &refs, &noise, all)[idx].unwrap();
        let grads = tape.backward(root);
        for &group in groups {
            let vars = match group {
                Group::Theta => bound.ests.vars(),
                Group::Psi => bound.vae.vars(),
                Group::Omega => bound.text.deep.vars(),
                Group::Phi => bound.prompts.vars(),
            };
            let analytic: Vec<(String, Tensor)> = model
                .group_params(group)
                .into_iter()
                .zip(&vars)
                .map(|((n, p), v)| (n, grads.get_or_zeros(*v, p)))
                .collect();
            for (k, (name, g)) in analytic.into_iter().enumerate() {
                let len = g.len();
                let picks: Vec<usize> = (0..ENTRIES_PER_TENSOR.min(len)).map(|_| r.random_range(0..len)).collect();
                let mut num = Vec::new();
                for &j in &picks {
                    let orig = model.group_params(group)[k].1.data()[j];
                    model.group_params_mut(group)[k].1.data_mut()[j] = orig + FD_STEP;
                    let up = term_value(&model, &refs, &noise, idx);
                    model.group_params_mut(group)[k].1.data_mut()[j] = orig - FD_STEP;
                    let down = term_value(&model, &refs, &noise, idx);
                    model.group_params_mut(group)[k].1.data_mut()[j] = orig;
                    num.push((up - down) / (2.0 * FD_STEP));
                }
                cases.push(GradCase { term, name, analytic: picks.iter().map(|&j| g.data()[j]).collect(), numeric: num });
            }
        }
    }
    (cases, margin)
}

pub const GRAD_TOL: f64 = 1e-4;

pub fn check_gradients() -> Outcome {
    let start = Instant::now();
    let (cases, margin) = gradient_cases(0);
    if !(margin > 1e-4) {
        return Err(format!("evaluation point too close to a min/max tie (gap {margin:.2e})"));
    }
    let worst = cases.iter().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error())).unwrap();
    let detail = format!(
        "{} tensors checked, worst {} {} rel err {:.2e}, tie gap {:.2e}, {:.1}s",
        cases.len(),
        worst.term,
        worst.name,
        worst.rel_error(),
        margin,
        start.elapsed().as_secs_f64()
    );
    let nonzero = cases.iter().filter(|c| c.analytic.iter().any(|v| v.abs() > 1e-8)).count();
    if worst.rel_error() >= GRAD_TOL {
        return Err(detail);
    }
    if nonzero * 2 < cases.len() {
        return Err(format!("{detail}; most gradients vanish ({nonzero} nonzero)"));
    }
    if start.elapsed() > Duration::from_secs(120) {
        return Err(format!("{detail}; too slow"));
    }
    Ok(detail)
}

pub fn check_limits() -> Outcome {
    let mut r = rng(3);
    let mut failures = Vec::new();
    let mut worst_sum: f64 = 0.0;
    for _ in 0..50 {
        let c = 8;
        let hw = r.random_range(1..=16);
        let pair = TextEmbeddingPair { normal: randn(1, c, 1.0, &mut r), anomaly: randn(1, c, 1.0, &mut r) };
        let f = LocalFeatureMap::new((hw, 1), randn(hw, c, 1.0, &mut r)).unwrap();
        let g = GlobalFeature(randn(1, c, 1.0, &mut r));
        let b = initial_similarities(&pair, &f, &g, 0.07).unwrap();
        for (n, a) in b.local_normal.iter().zip(&b.local_anomaly) {
            worst_sum = worst_sum.max((n + a - 1.0).abs());
        }
        let mask = SpatialMask { values: (0..hw).map(|_| r.random_range(0.0..1.0)).collect(), alpha: 0.3 };
        let refined = refine(&b, &mask, 1.0).unwrap();
        if refined.global_anomaly != b.global_anomaly || refined.global_normal != b.global_normal {
            failures.push("beta = 1 changed the global score".to_string());
        }

        let dn: Vec<f64> = (0..hw).map(|_| r.random_range(0.0..2.0)).collect();
        let da: Vec<f64> = (0..hw).map(|_| r.random_range(0.0..2.0)).collect();
        let l2 = |d: &[f64]| d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let one = spatial_mask(&dn, &da, 1.0, MaskNorm::L2).unwrap();
        let zero = spatial_mask(&dn, &da, 0.0, MaskNorm::L2).unwrap();
        for i in 0..hw {
            if one.values[i] != dn[i] / l2(&dn) || zero.values[i] != 1.0 - da[i] / l2(&da) {
                failures.push(format!("alpha limit broken at patch {i}"));
            }
        }
        let k = r.random_range(0.01..100.0);
        let scaled = spatial_mask(&dn.iter().map(|v| v * k).collect::<Vec<_>>(), &da.iter().map(|v| v * k).collect::<Vec<_>>(), 0.3, MaskNorm::L2).unwrap();
        let base = spatial_mask(&dn, &da, 0.3, MaskNorm::L2).unwrap();
        if base.values.iter().zip(&scaled.values).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures.push(format!("mask changed under scaling by {k}"));
        }

        let mu = randn(1, c, 1.0, &mut r);
        let lv = randn(1, c, 1.0, &mut r);
        let s = randn(1, c, 1.0, &mut r);
        let kl = vae_loss(&s, &s, &mu, &lv, Reduction::Sum).unwrap();
        if !(kl >= 0.0) {
            failures.push(format!("negative divergence {kl}"));
        }
    }
    let z = Tensor::zeros(1, 8);
    let at_prior = vae_loss(&z, &z, &z, &z, Reduction::Sum).unwrap();
    if at_prior != 0.0 {
        failures.push(format!("divergence at the prior is {at_prior}"));
    }
    if worst_sum > 1e-6 {
        failures.push(format!("similarities sum off by {worst_sum:.2e}"));
    }
    let detail = format!("50 random cases, max |S_n + S_a - 1| = {worst_sum:.1e}, KL at prior = {at_prior}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        failures.dedup();
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn snapshot(model: &CopsModel) -> Vec<(String, Tensor)> {
    model.all_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap()
}

/// Names of the groups whose tensors changed after one step with only `term` active.
pub fn isolation_step(term: &str) -> (Vec<String>, Vec<String>) {
    let mut cfg = toy_config();
    cfg.train.learning_rate = 0.01;
    cfg.train.loss_ests = term == "ests";
    cfg.train.loss_icts = term == "icts";
    cfg.train.loss_saga = term == "saga";
    let model = CopsModel::new(cfg).unwrap();
    let (train, _) = toy_data(0);
    let items: Vec<TrainItem> = train.iter().map(|s| TrainItem::from_sample(&model, s).unwrap()).collect();
    let refs: Vec<&TrainItem> = items.iter().collect();
    let before = snapshot(&model);
    let mut trainer = Trainer::new(model);
    trainer.train_step(&refs).unwrap();
    let after = snapshot(&trainer.model);
    let mut changed: Vec<String> = Vec::new();
    let mut unchanged: Vec<String> = Vec::new();
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        let g = group_of(name).to_string();
        if bits_equal(a, b) {
            if !unchanged.contains(&g) {
                unchanged.push(g);
            }
        } else if !changed.contains(&g) {
            changed.push(g);
        }
    }
    (changed, unchanged)
}

pub fn check_isolation() -> Outcome {
    let expected: [(&str, &[&str]); 3] = [("ests", &["theta"]), ("icts", &["psi"]), ("saga", &["psi", "omega", "phi"])];
    let mut notes = Vec::new();
    for (term, groups) in expected {
        let (mut changed, _) = isolation_step(term);
        changed.sort();
        let mut want: Vec<String> = groups.iter().map(|s| s.to_string()).collect();
        want.sort();
        if changed != want {
            return Err(format!("{term} alone changed {changed:?}, expected exactly {want:?}"));
        }
        notes.push(format!("{term}->{}", want.join("+")));
    }
    let cfg = toy_config();
    let (train, _) = toy_data(0);
    let (trained, _) = cops_core::training::train(&cfg, &train).unwrap();
    let fresh = CopsModel::new(cfg).unwrap();
    let frozen_same = trained.frozen_params().iter().zip(fresh.frozen_params()).all(|((_, a), (_, b))| bits_equal(a, b));
    if !frozen_same {
        return Err("frozen backbone changed during training".into());
    }
    notes.push(format!("backbone identical after {} epochs", trained.config.train.epochs));
    Ok(notes.join(", "))
}

/// Pairwise AUROC with ties counted half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Literal threshold sweep: every distinct score, descending.
pub fn ap_sweep(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / pos as f64;
        ap += (recall - prev) * tp / predicted.len() as f64;
        prev = recall;
    }
    Some(ap)
}

pub fn random_ranking(n: usize, r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let levels = if r.random_bool(0.5) { 5 } else { 1_000_000 };
    let scores = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    let labels = (0..n).map(|_| r.random_bool(0.4)).collect();
    (scores, labels)
}

pub fn check_metric_oracles() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for n in 1..=200 {
        for _ in 0..2 {
            let (s, l) = random_ranking(n, &mut r);
            for (got, want) in [(auroc(&s, &l), auroc_pairs(&s, &l)), (average_precision(&s, &l), ap_sweep(&s, &l))] {
                match (got, want) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    _ => return Err(format!("definedness differs at n = {n}")),
                }
            }
        }
    }
    let sep = auroc(&[0.1, 0.2, 0.3, 0.9], &[false, false, true, true]);
    let sep_ap = average_precision(&[0.1, 0.2, 0.3, 0.9], &[false, false, true, true]);
    let ties = auroc(&[0.4; 10], &[true, false, true, false, false, true, false, false, false, true]);
    if worst > 1e-9 || sep != Some(1.0) || sep_ap != Some(1.0) || ties != Some(0.5) {
        return Err(format!("worst oracle gap {worst:.2e}, separated {sep:?}/{sep_ap:?}, all ties {ties:?}"));
    }
    Ok(format!("400 cases n = 1..200, worst gap {worst:.1e}, separated 1.0, all ties 0.5"))
}

/// Seed-controlled synthetic protocol: 4 textures split 2/2, training, evaluation on the unseen pair.
pub struct SyntheticRun {
    pub report: MetricReport,
    pub elapsed: Duration,
}

pub const SYNTH_PER_CATEGORY: usize = 32;

pub fn synthetic_run(seed: u64, variant: Variant) -> SyntheticRun {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.train.apply_variant(variant);
    let (train, test) = synth_dataset(4, SYNTH_PER_CATEGORY, (32, 32), seed).unwrap();
    cops_core::data::check_disjoint(&train, &test).unwrap();
    let model = CopsModel::new(cfg).unwrap();
    let items: Vec<TrainItem> = train.samples.iter().map(|s| TrainItem::from_sample(&model, s).unwrap()).collect();
    let mut trainer = Trainer::new(model);
    train_items(&mut trainer, &items, |_| {}).unwrap();
    let report = evaluate(&trainer.model, &test, trainer.model.config.inference.seed).unwrap();
    SyntheticRun { report, elapsed: start.elapsed() }
}

pub fn check_synthetic(run: &SyntheticRun) -> Outcome {
    let m = &run.report.mean;
    let (i, p) = (m.image_auroc.unwrap_or(f64::NAN), m.pixel_auroc.unwrap_or(f64::NAN));
    let detail = format!("I-AUROC {:.3}, P-AUROC {:.3}, {:.0}s", i, p, run.elapsed.as_secs_f64());
    if i >= 0.85 && p >= 0.80 && run.elapsed <= Duration::from_secs(600) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn check_ablation(full: &[f64], baseline: &[f64]) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!("full {:.4} ({}) vs baseline {:.4} ({})", mean(full), fmt(full), mean(baseline), fmt(baseline));
    if mean(full) >= mean(baseline) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Loss log and both report renderings of a short toy run.
pub fn toy_artifacts(seed: u64) -> (String, String, String) {
    let mut cfg = toy_config();
    cfg.train.seed = seed;
    let (train, test) = toy_data(seed);
    let (model, summaries) = cops_core::training::train(&cfg, &train).unwrap();
    let manifest = cops_core::data::DatasetManifest::new(test, cops_core::data::Split::Test);
    let report = evaluate(&model, &manifest, 0).unwrap();
    (cops_core::training::loss_log(&summaries), report.to_table(), report.to_key_values())
}

pub fn check_determinism_and_persistence() -> Outcome {
    if toy_artifacts(0) != toy_artifacts(0) {
        return Err("repeated toy run produced different logs or reports".into());
    }
    let cfg = toy_config();
    let (train, test) = toy_data(1);
    let (model, _) = cops_core::training::train(&cfg, &train).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    cops_core::checkpoint::save_checkpoint(&path, &model).map_err(|e| e.to_string())?;
    let loaded = cops_core::checkpoint::load_checkpoint(&path).map_err(|e| e.to_string())?;
    for (i, s) in test.iter().enumerate() {
        let a = cops_core::inference::predict(&s.image, &model, &mut rng(i as u64)).unwrap();
        let b = cops_core::inference::predict(&s.image, &loaded, &mut rng(i as u64)).unwrap();
        if a.score.to_bits() != b.score.to_bits() || !bits_equal(&a.map, &b.map) {
            return Err(format!("prediction {i} differs after checkpoint round trip"));
        }
        let bytes = cops_core::inference::encode_raw_map(&a.map);
        let decoded = cops_core::inference::decode_raw_map(&bytes).unwrap();
        if cops_core::inference::encode_raw_map(&decoded) != bytes || !bits_equal(&decoded, &a.map.map(|v| v as f32 as f64)) {
            return Err(format!("raw map {i} does not round-trip"));
        }
    }
    Ok(format!("toy logs and reports byte-identical, {} predictions bit-identical after reload, raw maps exact", test.len()))
}

pub fn check_defaults() -> Outcome {
    let c = RunConfig::default();
    let got = (
        c.model.context_len,
        c.model.state_len,
        c.model.class_len,
        c.model.samples,
        c.saga.alpha,
        c.saga.beta,
        c.saga.tau,
        c.train.learning_rate,
        c.train.batch_size,
        c.train.epochs,
        c.inference.gaussian_sigma,
        c.train.seed,
    );
    let want = (6, 6, 2, 10, 0.3, 0.9, 0.07, 0.001, 8, 10, 4.0, 0);
    if got == want && c.inference.seed == 0 {
        Ok("K=6 M=6 N=2 R=10 alpha=0.3 beta=0.9 tau=0.07 lr=0.001 batch=8 epochs=10 sigma=4 seed=0".into())
    } else {
        Err(format!("defaults {got:?}"))
    }
}
