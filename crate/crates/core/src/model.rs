//! The assembled model and its batched forward graph.
//!
//! Parameters fall into four trainable groups plus the frozen backbone:
//! `theta` (prototype extractor), `psi` (class-token VAE), `omega` (text
//! deep prompts) and `phi` (prompt banks). One forward graph serves both
//! training and inference; every prompt of every image in a batch goes
//! through the text encoder in a single stacked pass.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{EncoderConfig, GlobalFeature, LocalFeatureMap, TextBackbone, TextConfig, TextVars, VisionEncoder};
use crate::config::{ModelConfig, RunConfig, SamplingMode};
use crate::error::Result;
use crate::ests::{nn_distances_var, PrototypeExtractorParams, PrototypeExtractorVars};
use crate::icts::{reparameterize_var, VaeParams, VaeVars};
use crate::params::{Bind, Params};
use crate::prompts::{init_dual_prompts, DualPromptParams, DualPromptVars};
use crate::saga::{mean_embeddings_var, refine_var, similarity_var, spatial_mask, upsample_var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Theta,
    Psi,
    Omega,
    Phi,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Theta, Group::Psi, Group::Omega, Group::Phi];

    pub fn name(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Psi => "psi",
            Group::Omega => "omega",
            Group::Phi => "phi",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which groups are bound as trainable leaves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupMask {
    pub theta: bool,
    pub psi: bool,
    pub omega: bool,
    pub phi: bool,
}

impl GroupMask {
    pub fn all() -> Self {
        Self { theta: true, psi: true, omega: true, phi: true }
    }

    pub fn contains(&self, g: Group) -> bool {
        match g {
            Group::Theta => self.theta,
            Group::Psi => self.psi,
            Group::Omega => self.omega,
            Group::Phi => self.phi,
        }
    }

    pub fn insert(&mut self, g: Group) {
        match g {
            Group::Theta => self.theta = true,
            Group::Psi => self.psi = true,
            Group::Omega => self.omega = true,
            Group::Phi => self.phi = true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopsModel {
    pub config: RunConfig,
    pub vision: VisionEncoder,
    pub text: TextBackbone,
    pub prompts: DualPromptParams,
    pub ests: PrototypeExtractorParams,
    pub vae: VaeParams,
}

pub fn encoder_config(m: &ModelConfig) -> EncoderConfig {
    EncoderConfig {
        embed_dim: m.embed_dim,
        patch_size: m.patch_size,
        image_height: m.image_height,
        image_width: m.image_width,
        num_layers: m.vision_layers,
        num_heads: m.vision_heads,
        seed: m.backbone_seed,
        init_std: m.init_std,
    }
}

pub fn text_config(m: &ModelConfig) -> TextConfig {
    TextConfig {
        embed_dim: m.embed_dim,
        num_layers: m.text_layers,
        num_heads: m.text_heads,
        prompt_len: m.prompt_len(),
        seed: m.backbone_seed,
        init_std: m.init_std,
    }
}

/// Everything the graph needs about one image.
#[derive(Clone, Debug)]
pub struct ImageInput<'a> {
    pub global: &'a GlobalFeature,
    pub local: &'a LocalFeatureMap,
    /// Standard-normal noise for the class-token samples (`R × C`).
    pub class_noise: Tensor,
    /// Extra noise for the single-sample ELBO estimate (`1 × C`), training only.
    pub elbo_noise: Option<Tensor>,
}

/// Graph handles for one image.
#[derive(Clone, Debug)]
pub struct ImageOutput {
    pub global: Var,
    pub local: Var,
    pub prototypes: Option<(Var, Var)>,
    /// `(μ, log σ², decoded posterior sample)` when the ELBO is requested.
    pub elbo: Option<(Var, Var, Var)>,
    pub class_tokens: Option<Var>,
    pub embeddings: Var,
    pub global_normal: Var,
    pub global_anomaly: Var,
    pub local_normal: Var,
    pub local_anomaly: Var,
    pub mask: Vec<f64>,
    pub refined_normal: Var,
    pub refined_anomaly: Var,
    pub score_normal: Var,
    pub score_anomaly: Var,
    pub map_normal: Var,
    pub map_anomaly: Var,
}

pub struct BoundModel {
    pub prompts: DualPromptVars,
    pub ests: PrototypeExtractorVars,
    pub vae: VaeVars,
    pub text: TextVars,
}

impl CopsModel {
    /// Frozen backbone from `model.backbone_seed`, trainable groups from `train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let vision = VisionEncoder::new(encoder_config(m))?;
        let mut text = TextBackbone::new(text_config(m))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let c = m.embed_dim;
        for d in &mut text.deep_prompts {
            *d = Tensor::randn(d.rows(), c, m.init_std, &mut rng);
        }
        let prompt_seed = rand::Rng::random::<u64>(&mut rng);
        let prompts = init_dual_prompts(m.context_len, m.state_len, m.class_len, c, prompt_seed)?;
        let ests = PrototypeExtractorParams::new(m.state_len, c, m.init_std, m.init_std, &mut rng);
        let vae = VaeParams::new(c, m.init_std, &mut rng);
        Ok(Self { config, vision, text, prompts, ests, vae })
    }

    /// Class-token samples per image; zero when sampling is disabled.
    pub fn samples_per_image(&self) -> usize {
        if self.config.train.enable_icts {
            self.config.model.samples
        } else {
            0
        }
    }

    pub fn group_params(&self, g: Group) -> Vec<(String, &Tensor)> {
        match g {
            Group::Theta => self.ests.named("theta"),
            Group::Psi => self.vae.named("psi"),
            Group::Omega => self.text.deep_prompts.named("omega"),
            Group::Phi => self.prompts.named("phi"),
        }
    }

    pub fn group_params_mut(&mut self, g: Group) -> Vec<(String, &mut Tensor)> {
        match g {
            Group::Theta => self.ests.named_mut("theta"),
            Group::Psi => self.vae.named_mut("psi"),
            Group::Omega => self.text.deep_prompts.named_mut("omega"),
            Group::Phi => self.prompts.named_mut("phi"),
        }
    }

    pub fn frozen_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.vision.weights.named("vision");
        out.extend(self.text.frozen.named("text"));
        out
    }

    pub fn frozen_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.vision.weights.named_mut("vision");
        out.extend(self.text.frozen.named_mut("text"));
        out
    }

    /// Every tensor of the model, trainable groups first.
    pub fn all_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = Group::ALL.iter().flat_map(|g| self.group_params(*g)).collect();
        out.extend(self.frozen_params());
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let Self { vision, text, prompts, ests, vae, .. } = self;
        let mut out = ests.named_mut("theta");
        out.extend(vae.named_mut("psi"));
        out.extend(text.deep_prompts.named_mut("omega"));
        out.extend(prompts.named_mut("phi"));
        out.extend(vision.weights.named_mut("vision"));
        out.extend(text.frozen.named_mut("text"));
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: GroupMask) -> BoundModel {
        BoundModel {
            prompts: self.prompts.bind(tape, trainable.phi),
            ests: self.ests.bind(tape, trainable.theta),
            vae: self.vae.bind(tape, trainable.psi),
            text: self.text.bind(tape, trainable.omega),
        }
    }

    pub fn encode_image(&self, image: &crate::backbone::ImageTensor) -> Result<(GlobalFeature, LocalFeatureMap)> {
        self.vision.encode(image)
    }

    /// Forward graph for a batch of images.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, inputs: &[ImageInput<'_>], mode: SamplingMode) -> Vec<ImageOutput> {
        let cfg = &self.config;
        let (use_ests, use_saga) = (cfg.train.enable_ests, cfg.train.enable_saga);
        let r = self.samples_per_image();
        let pairs = r.max(1);
        let heads = cfg.model.ests_heads;
        let target = (cfg.model.image_height, cfg.model.image_width);

        struct Partial {
            g: Var,
            f: Var,
            prototypes: Option<(Var, Var)>,
            elbo: Option<(Var, Var, Var)>,
            class_tokens: Option<Var>,
            mask: Vec<f64>,
        }

        let mut partial = Vec::with_capacity(inputs.len());
        let mut stacks = Vec::with_capacity(inputs.len());
        for input in inputs {
            let g = tape.constant(input.global.as_tensor().clone());
            let f = tape.constant(input.local.features.clone());
            let hw = input.local.num_patches();
            let (prototypes, injected) = if use_ests {
                let (pn, pa) = bound.ests.extract(tape, f, heads);
                let dn = tape.detach(pn);
                let da = tape.detach(pa);
                (Some((pn, pa)), Some((dn, da)))
            } else {
                (None, None)
            };
            let mask = match injected {
                Some((pn, pa)) if use_saga => {
                    let dn = nn_distances_var(tape, f, pn);
                    let da = nn_distances_var(tape, f, pa);
                    let (dn, da) = (tape.value(dn).data().to_vec(), tape.value(da).data().to_vec());
                    spatial_mask(&dn, &da, cfg.saga.alpha, cfg.saga.mask_norm)
                        .expect("cosine distances are non-negative")
                        .values
                }
                _ => vec![1.0; hw],
            };
            let (class_tokens, elbo) = if r > 0 {
                match mode {
                    SamplingMode::Posterior => {
                        let (mu, lv) = bound.vae.encode(tape, g);
                        let elbo = input.elbo_noise.as_ref().map(|eps| {
                            let z = reparameterize_var(tape, mu, lv, eps);
                            let s = bound.vae.decode(tape, z);
                            (mu, lv, s)
                        });
                        (Some(bound.vae.sample_posterior(tape, mu, lv, &input.class_noise)), elbo)
                    }
                    SamplingMode::Prior => {
                        let z = tape.constant(input.class_noise.clone());
                        let elbo = input.elbo_noise.as_ref().map(|eps| {
                            let (mu, lv) = bound.vae.encode(tape, g);
                            let z = reparameterize_var(tape, mu, lv, eps);
                            let s = bound.vae.decode(tape, z);
                            (mu, lv, s)
                        });
                        (Some(bound.vae.decode(tape, z)), elbo)
                    }
                }
            } else {
                (None, None)
            };
            stacks.push(bound.prompts.assemble(tape, injected, class_tokens, pairs));
            partial.push(Partial { g, f, prototypes, elbo, class_tokens, mask });
        }

        let all = tape.concat(&stacks);
        let encoded = self.text.encode_var(tape, &bound.text, all, 2 * pairs * inputs.len());
        let beta = if use_saga { cfg.saga.beta } else { 1.0 };
        partial
            .into_iter()
            .enumerate()
            .map(|(b, p)| {
                let hw = tape.value(p.f).rows();
                let grid = (cfg.model.image_height / cfg.model.patch_size, cfg.model.image_width / cfg.model.patch_size);
                let mine = tape.slice_rows(encoded, b * 2 * pairs, 2 * pairs);
                let embeddings = mean_embeddings_var(tape, mine, pairs);
                let x = tape.concat(&[p.g, p.f]);
                let (sn, sa) = similarity_var(tape, embeddings, x, cfg.saga.tau);
                let global_normal = tape.slice_rows(sn, 0, 1);
                let global_anomaly = tape.slice_rows(sa, 0, 1);
                let local_normal = tape.slice_rows(sn, 1, hw);
                let local_anomaly = tape.slice_rows(sa, 1, hw);
                let (refined_normal, score_normal) = refine_var(tape, local_normal, global_normal, &p.mask, beta);
                let (refined_anomaly, score_anomaly) = refine_var(tape, local_anomaly, global_anomaly, &p.mask, beta);
                let map_normal = upsample_var(tape, refined_normal, grid, target);
                let map_anomaly = upsample_var(tape, refined_anomaly, grid, target);
                ImageOutput {
                    global: p.g,
                    local: p.f,
                    prototypes: p.prototypes,
                    elbo: p.elbo,
                    class_tokens: p.class_tokens,
                    embeddings,
                    global_normal,
                    global_anomaly,
                    local_normal,
                    local_anomaly,
                    mask: p.mask,
                    refined_normal,
                    refined_anomaly,
                    score_normal,
                    score_anomaly,
                    map_normal,
                    map_anomaly,
                }
            })
            .collect()
    }
}
