//! Joint optimization of the three loss terms.
//!
//! The prototype center loss trains `theta`, the ELBO trains `psi`, and the
//! glocal alignment loss trains `psi`, `omega` and `phi`. The groups are
//! disjoint and the prototypes enter the prompts detached, so one backward
//! pass over the summed loss gives every group exactly the gradient of its
//! own terms; only the groups owned by an active term are stepped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{GlobalFeature, ImageTensor, LocalFeatureMap};
use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{CopsError, Result};
use crate::ests::center_loss_var;
use crate::icts::{standard_normal, vae_loss_var};
use crate::model::{BoundModel, CopsModel, Group, GroupMask, ImageInput};
use crate::params::VarList;
use crate::saga::{global_bce_var, glocal_loss_var};
use crate::tensor::Tensor;

/// Patch labels by max-pooling an `h × w` binary mask over `p × p` patches,
/// row-major patch order.
pub fn downsample_mask(y: &Tensor, p: usize) -> Result<Vec<f64>> {
    let (h, w) = y.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(CopsError::InvalidArgument(format!("mask {h}x{w} is not divisible into {p}x{p} patches")));
    }
    crate::ests::check_binary(y.data(), "ground-truth mask")?;
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; gh * gw];
    for i in 0..h {
        for j in 0..w {
            if y.get(i, j) == 1.0 {
                out[(i / p) * gw + j / p] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Adam with per-tensor moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, AdamSlot>,
}

#[derive(Clone, Debug, PartialEq)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, state: BTreeMap::new() }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        let t = &cfg.train;
        Self::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps)
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        let n = param.len();
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
        slot.t += 1;
        let c1 = 1.0 - self.beta1.powi(slot.t);
        let c2 = 1.0 - self.beta2.powi(slot.t);
        for (k, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            slot.m[k] = self.beta1 * slot.m[k] + (1.0 - self.beta1) * g;
            slot.v[k] = self.beta2 * slot.v[k] + (1.0 - self.beta2) * g * g;
            let mhat = slot.m[k] / c1;
            let vhat = slot.v[k] / c2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One training image with its frozen features.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub global: GlobalFeature,
    pub local: LocalFeatureMap,
    pub mask: Option<Tensor>,
    pub patch_labels: Option<Vec<f64>>,
    pub label: f64,
}

impl TrainItem {
    pub fn new(model: &CopsModel, image: &ImageTensor, mask: Option<Tensor>, label: f64) -> Result<Self> {
        let (global, local) = model.encode_image(image)?;
        let patch_labels = match &mask {
            Some(m) => {
                if m.shape() != (image.height(), image.width()) {
                    return Err(CopsError::shape("train item", "mask and image sizes differ".into()));
                }
                Some(downsample_mask(m, model.config.model.patch_size)?)
            }
            None => None,
        };
        Ok(Self { global, local, mask, patch_labels, label })
    }

    pub fn from_sample(model: &CopsModel, sample: &Sample) -> Result<Self> {
        let m = &model.config.model;
        let image = sample.image_resized(m.image_height, m.image_width)?;
        let mask = sample.mask_resized(m.image_height, m.image_width)?;
        Self::new(model, &image, mask, sample.label as f64)
    }
}

/// Batch-averaged loss terms; `None` when a term did not contribute.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub ests: Option<f64>,
    pub icts: Option<f64>,
    pub saga: Option<f64>,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        [self.ests, self.icts, self.saga].iter().flatten().sum()
    }
}

/// Which loss terms run, from module and loss switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub ests: bool,
    pub icts: bool,
    pub saga: bool,
}

impl ActiveTerms {
    pub fn from_config(model: &CopsModel) -> Self {
        let t = &model.config.train;
        Self {
            ests: t.enable_ests && t.loss_ests,
            icts: t.enable_icts && t.loss_icts && model.samples_per_image() > 0,
            saga: t.loss_saga,
        }
    }

    /// Groups owned by the active terms.
    pub fn groups(&self, model: &CopsModel) -> GroupMask {
        let mut m = GroupMask::default();
        if self.ests {
            m.insert(Group::Theta);
        }
        if self.icts {
            m.insert(Group::Psi);
        }
        if self.saga {
            if model.samples_per_image() > 0 {
                m.insert(Group::Psi);
            }
            m.insert(Group::Omega);
            m.insert(Group::Phi);
        }
        m
    }
}

/// Per-item `(class noise, ELBO noise)` drawn in batch order.
pub fn draw_batch_noise<R: Rng + ?Sized>(model: &CopsModel, terms: ActiveTerms, n: usize, rng: &mut R) -> Vec<(Tensor, Option<Tensor>)> {
    let r = model.samples_per_image();
    let c = model.config.model.embed_dim;
    (0..n)
        .map(|_| {
            let class_noise = standard_normal(r, c, rng);
            let elbo_noise = terms.icts.then(|| standard_normal(1, c, rng));
            (class_noise, elbo_noise)
        })
        .collect()
}

/// Batch-averaged `[ests, icts, saga]` loss nodes; `None` for terms that do not contribute.
pub fn loss_terms(
    model: &CopsModel,
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &[&TrainItem],
    noise: &[(Tensor, Option<Tensor>)],
    terms: ActiveTerms,
) -> [Option<Var>; 3] {
    let inputs: Vec<ImageInput<'_>> = batch
        .iter()
        .zip(noise)
        .map(|(item, (cn, en))| ImageInput { global: &item.global, local: &item.local, class_noise: cn.clone(), elbo_noise: en.clone() })
        .collect();
    let outputs = model.forward(tape, bound, &inputs, model.config.icts.train_sampling);

    let mut ests_terms = Vec::new();
    let mut icts_terms = Vec::new();
    let mut saga_terms = Vec::new();
    for (item, out) in batch.iter().zip(&outputs) {
        if terms.ests {
            if let (Some((pn, pa)), Some(y)) = (out.prototypes, &item.patch_labels) {
                ests_terms.push(center_loss_var(tape, out.local, pn, pa, y));
            }
        }
        if terms.icts {
            if let Some((mu, lv, s)) = out.elbo {
                icts_terms.push(vae_loss_var(tape, out.global, s, mu, lv, model.config.icts.recon_reduction));
            }
        }
        if terms.saga {
            let l = match &item.mask {
                Some(y) => glocal_loss_var(tape, out.map_normal, out.map_anomaly, out.score_anomaly, y, &model.config.saga),
                None => global_bce_var(tape, out.score_anomaly, item.label),
            };
            saga_terms.push(l);
        }
    }
    let mut average = |parts: &[Var]| -> Option<Var> {
        if parts.is_empty() {
            return None;
        }
        let s = tape.concat(parts);
        Some(tape.mean(s))
    };
    [average(&ests_terms), average(&icts_terms), average(&saga_terms)]
}

pub struct Trainer {
    pub model: CopsModel,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: CopsModel) -> Self {
        let optimizer = Adam::from_config(&model.config);
        let rng = ChaCha8Rng::seed_from_u64(model.config.train.seed.wrapping_add(0x5eed));
        Self { model, optimizer, rng }
    }

    /// One optimizer step on `batch`. A non-finite loss aborts the step and
    /// leaves parameters and optimizer state untouched.
    pub fn train_step(&mut self, batch: &[&TrainItem]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(CopsError::EmptyDataset("empty batch".into()));
        }
        let model = &self.model;
        let terms = ActiveTerms::from_config(model);
        let groups = terms.groups(model);
        let noise = draw_batch_noise(model, terms, batch.len(), &mut self.rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, groups);
        let [le, li, ls] = loss_terms(model, &mut tape, &bound, batch, &noise, terms);
        let value = |v: Option<Var>| v.map(|v| tape.value(v).item());
        let record = LossRecord { ests: value(le), icts: value(li), saga: value(ls) };
        for (name, v) in [("ests", record.ests), ("icts", record.icts), ("saga", record.saga)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    log::warn!("{name} loss is {v}; step skipped");
                    return Err(CopsError::NonFiniteLoss(format!("{name} = {v}")));
                }
            }
        }
        let parts: Vec<Var> = [le, li, ls].into_iter().flatten().collect();
        if parts.is_empty() {
            return Ok(record);
        }
        let joined = tape.concat(&parts);
        let root = tape.sum(joined);
        let grads = tape.backward(root);

        let bound_vars = [
            (Group::Theta, bound.ests.vars()),
            (Group::Psi, bound.vae.vars()),
            (Group::Omega, bound.text.deep.vars()),
            (Group::Phi, bound.prompts.vars()),
        ];
        for (group, vars) in bound_vars {
            if !groups.contains(group) {
                continue;
            }
            let params = self.model.group_params_mut(group);
            debug_assert_eq!(params.len(), vars.len());
            for ((name, p), v) in params.into_iter().zip(vars) {
                let g = grads.get_or_zeros(v, p);
                self.optimizer.step(&name, p, &g);
            }
        }
        Ok(record)
    }
}

/// Per-epoch mean of the step records.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub losses: LossRecord,
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl EpochSummary {
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{:>5} {:>6} {:>12} {:>12} {:>12}",
            self.epoch,
            self.steps,
            fmt_loss(l.ests),
            fmt_loss(l.icts),
            fmt_loss(l.saga)
        )
    }
}

pub fn loss_log(summaries: &[EpochSummary]) -> String {
    let mut s = format!("{:>5} {:>6} {:>12} {:>12} {:>12}\n", "epoch", "steps", "ests", "icts", "saga");
    for e in summaries {
        let _ = writeln!(s, "{}", e.log_line());
    }
    s
}

fn mean_of(vals: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = vals.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Train on `items` for the configured epochs.
pub fn train_items(trainer: &mut Trainer, items: &[TrainItem], mut on_epoch: impl FnMut(&EpochSummary)) -> Result<Vec<EpochSummary>> {
    if items.is_empty() {
        return Err(CopsError::EmptyDataset("no training samples".into()));
    }
    let cfg = trainer.model.config.train.clone();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summaries = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut records = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            match trainer.train_step(&batch) {
                Ok(r) => records.push(r),
                Err(CopsError::NonFiniteLoss(msg)) => log::warn!("epoch {epoch}: skipped step ({msg})"),
                Err(e) => return Err(e),
            }
        }
        let losses = LossRecord {
            ests: mean_of(&records.iter().map(|r| r.ests).collect::<Vec<_>>()),
            icts: mean_of(&records.iter().map(|r| r.icts).collect::<Vec<_>>()),
            saga: mean_of(&records.iter().map(|r| r.saga).collect::<Vec<_>>()),
        };
        let summary = EpochSummary { epoch, steps: records.len(), losses };
        log::info!("{}", summary.log_line());
        on_epoch(&summary);
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Build a model from `cfg`, cache frozen features of `samples` and train.
pub fn train(cfg: &RunConfig, samples: &[Sample]) -> Result<(CopsModel, Vec<EpochSummary>)> {
    if samples.is_empty() {
        return Err(CopsError::EmptyDataset("no training samples".into()));
    }
    let model = CopsModel::new(cfg.clone())?;
    let items = samples.iter().map(|s| TrainItem::from_sample(&model, s)).collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(model);
    let summaries = train_items(&mut trainer, &items, |_| {})?;
    Ok((trainer.model, summaries))
}
