//! Implicit class-token sampling with a small VAE over the global feature.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::backbone::GlobalFeature;
use crate::config::{Reduction, SamplingMode};
use crate::error::{CopsError, Result};
use crate::params::{param_struct, Bind, Linear, Mlp};
use crate::tensor::Tensor;

/// Log-variance is clamped to `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 10.0;

param_struct! {
    pub struct VaeParams => VaeVars {
        pub encoder: Mlp,
        pub mu: Linear,
        pub logvar: Linear,
        pub decoder: Mlp,
    }
}

impl VaeParams {
    pub fn new<R: Rng + ?Sized>(c: usize, std: f64, rng: &mut R) -> Self {
        Self {
            encoder: Mlp::new(c, c, std, rng),
            mu: Linear::new(c, c, std, rng),
            logvar: Linear::new(c, c, std, rng),
            decoder: Mlp::new(c, c, std, rng),
        }
    }

    pub fn zeros(c: usize) -> Self {
        let z = || Mlp { fc1: Linear::zeros(c, c), fc2: Linear::zeros(c, c) };
        Self { encoder: z(), mu: Linear::zeros(c, c), logvar: Linear::zeros(c, c), decoder: z() }
    }

    pub fn dim(&self) -> usize {
        self.mu.w.rows()
    }
}

/// One reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub z: Tensor,
    pub eps: Tensor,
}

/// Standard-normal matrix drawn row by row from `rng`.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

impl VaeVars {
    /// `(μ, log σ²)` for each row of `g`.
    pub fn encode(&self, tape: &mut Tape, g: Var) -> (Var, Var) {
        let h = self.encoder.apply(tape, g);
        let mu = self.mu.apply(tape, h);
        let lv = self.logvar.apply(tape, h);
        let lv = tape.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT);
        (mu, lv)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Var {
        self.decoder.apply(tape, z)
    }

    /// Decoded posterior samples, one per row of `eps`, all from the single
    /// encoding `(μ, log σ²)` (`1 × C` each).
    pub fn sample_posterior(&self, tape: &mut Tape, mu: Var, log_var: Var, eps: &Tensor) -> Var {
        let r = eps.rows();
        let mu = tape.gather_rows(mu, vec![0; r]);
        let lv = tape.gather_rows(log_var, vec![0; r]);
        let z = reparameterize_var(tape, mu, lv, eps);
        self.decode(tape, z)
    }
}

pub fn reparameterize_var(tape: &mut Tape, mu: Var, log_var: Var, eps: &Tensor) -> Var {
    let half = tape.scale(log_var, 0.5);
    let sigma = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sigma, e);
    tape.add(mu, noise)
}

/// Reconstruction plus KL divergence to the standard normal prior.
pub fn vae_loss_var(tape: &mut Tape, g: Var, s: Var, mu: Var, log_var: Var, reduction: Reduction) -> Var {
    let diff = tape.sub(s, g);
    let sq = tape.mul(diff, diff);
    let recon = match reduction {
        Reduction::Sum => tape.sum(sq),
        Reduction::Mean => tape.mean(sq),
    };
    let mu2 = tape.mul(mu, mu);
    let var = tape.exp(log_var);
    let a = tape.add(mu2, var);
    let b = tape.sub(a, log_var);
    let kl = tape.sum(b);
    let n = tape.value(mu).len() as f64;
    let kl = tape.affine(kl, 0.5, -0.5 * n);
    tape.add(recon, kl)
}

fn check_dim(t: &Tensor, c: usize, what: &'static str) -> Result<()> {
    if t.shape() != (1, c) {
        return Err(CopsError::shape(what, format!("expected a 1x{c} vector, got {}x{}", t.rows(), t.cols())));
    }
    if !t.is_finite() {
        return Err(CopsError::InvalidArgument(format!("{what}: non-finite input")));
    }
    Ok(())
}

pub fn vae_encode(g: &GlobalFeature, params: &VaeParams) -> Result<(Tensor, Tensor)> {
    check_dim(g.as_tensor(), params.dim(), "vae_encode")?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let gv = tape.constant(g.as_tensor().clone());
    let (mu, lv) = vars.encode(&mut tape, gv);
    Ok((tape.value(mu).clone(), tape.value(lv).clone()))
}

pub fn reparameterize(mu: &Tensor, log_var: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != log_var.shape() || mu.shape() != eps.shape() {
        return Err(CopsError::shape("reparameterize", "mu, log_var and eps must share a shape".into()));
    }
    Ok(Tensor::from_fn(mu.rows(), mu.cols(), |i, j| {
        mu.get(i, j) + (0.5 * log_var.get(i, j)).exp() * eps.get(i, j)
    }))
}

pub fn vae_decode(z: &Tensor, params: &VaeParams) -> Result<Tensor> {
    if z.cols() != params.dim() {
        return Err(CopsError::shape("vae_decode", format!("latent width {} vs {}", z.cols(), params.dim())));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let s = vars.decode(&mut tape, zv);
    Ok(tape.value(s).clone())
}

/// Encode, reparameterize with `eps` and decode.
pub fn posterior_sample(g: &GlobalFeature, params: &VaeParams, eps: &Tensor) -> Result<LatentSample> {
    let (mu, log_var) = vae_encode(g, params)?;
    let z = reparameterize(&mu, &log_var, eps)?;
    Ok(LatentSample { mu, log_var, z, eps: eps.clone() })
}

/// `R × C` class tokens. Posterior mode encodes `g` and reparameterizes with
/// fresh noise per row; prior mode decodes standard-normal latents.
pub fn sample_class_tokens<R: Rng + ?Sized>(
    params: &VaeParams,
    r: usize,
    mode: SamplingMode,
    g: Option<&GlobalFeature>,
    rng: &mut R,
) -> Result<Tensor> {
    if mode == SamplingMode::Posterior && g.is_none() {
        return Err(CopsError::InvalidArgument("posterior sampling needs a global feature".into()));
    }
    let eps = standard_normal(r, params.dim(), rng);
    class_tokens_from_noise(params, mode, g, &eps)
}

/// [`sample_class_tokens`] with the standard-normal draws supplied, one row per sample.
pub fn class_tokens_from_noise(
    params: &VaeParams,
    mode: SamplingMode,
    g: Option<&GlobalFeature>,
    eps: &Tensor,
) -> Result<Tensor> {
    let (r, c) = eps.shape();
    if c != params.dim() {
        return Err(CopsError::shape("class tokens", format!("noise width {c} vs {}", params.dim())));
    }
    if r == 0 {
        return Ok(Tensor::zeros(0, c));
    }
    let z = match mode {
        SamplingMode::Prior => eps.clone(),
        SamplingMode::Posterior => {
            let g = g.ok_or_else(|| CopsError::InvalidArgument("posterior sampling needs a global feature".into()))?;
            let (mu, lv) = vae_encode(g, params)?;
            Tensor::from_fn(r, c, |i, j| mu.get(0, j) + (0.5 * lv.get(0, j)).exp() * eps.get(i, j))
        }
    };
    vae_decode(&z, params)
}

pub fn vae_loss(g: &Tensor, s: &Tensor, mu: &Tensor, log_var: &Tensor, reduction: Reduction) -> Result<f64> {
    if g.shape() != s.shape() || mu.shape() != log_var.shape() {
        return Err(CopsError::shape("vae_loss", "g/s or mu/log_var shapes differ".into()));
    }
    let mut tape = Tape::new();
    let [gv, sv, mv, lv] = [g, s, mu, log_var].map(|t| tape.constant(t.clone()));
    let l = vae_loss_var(&mut tape, gv, sv, mv, lv, reduction);
    Ok(tape.value(l).item())
}
