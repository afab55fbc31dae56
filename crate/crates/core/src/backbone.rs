//! Frozen transformer encoders standing in for a pretrained CLIP.
//!
//! The vision encoder runs two residual streams in parallel through the same
//! frozen weights: the ordinary query-key attention stream (its class token
//! gives the global feature) and a value-value attention stream (its patch
//! tokens give the local features). The text encoder is a causal transformer
//! over continuous prompt tokens whose input prefix at layers 2..=9 is
//! replaced by learnable deep-prompt tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionSpec, Tape, Var};
use crate::error::{CopsError, Result};
use crate::params::{param_struct, Bind, LayerNorm, Linear, Mlp, Params, VarList};
use crate::tensor::Tensor;

/// Deep-prompt groups: one per text layer from the second to the ninth.
pub const DEEP_PROMPT_GROUPS: usize = 8;
/// Tokens per deep-prompt group.
pub const DEEP_PROMPT_LEN: usize = 4;
const FFN_RATIO: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            patch_size: 8,
            image_height: 32,
            image_width: 32,
            num_layers: 2,
            num_heads: 8,
            seed: 0,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(CopsError::InvalidArgument("encoder sizes must be positive".into()));
        }
        if self.image_height == 0 || self.image_height % p != 0 {
            return Err(CopsError::InvalidArgument(format!(
                "image height {} is not a positive multiple of patch size {p}",
                self.image_height
            )));
        }
        if self.image_width == 0 || self.image_width % p != 0 {
            return Err(CopsError::InvalidArgument(format!(
                "image width {} is not a positive multiple of patch size {p}",
                self.image_width
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(CopsError::InvalidArgument(format!(
                "{} heads do not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Patch grid `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// RGB image, row-major `h × w × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(CopsError::shape(
                "image",
                format!("{} values for a {height}x{width}x3 image", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(CopsError::InvalidArgument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    /// One row per patch (row-major patch order), `p·p·3` columns.
    pub fn patches(&self, p: usize) -> Tensor {
        let (gh, gw) = (self.height / p, self.width / p);
        let mut out = Tensor::zeros(gh * gw, p * p * 3);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_slice_mut(py * gw + px);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            row[k] = self.pixel(py * p + dy, px * p + dx, c);
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Pooled image feature `g` (`1 × C`), produced by the query-key stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature(pub Tensor);

impl GlobalFeature {
    pub fn new(values: &[f64]) -> Self {
        Self(Tensor::row(values))
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-patch features `F` (`HW × C`); row `i` is patch `(i / W, i % W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureMap {
    pub grid: (usize, usize),
    pub features: Tensor,
}

impl LocalFeatureMap {
    pub fn new(grid: (usize, usize), features: Tensor) -> Result<Self> {
        if grid.0 * grid.1 != features.rows() {
            return Err(CopsError::shape(
                "local features",
                format!("grid {grid:?} does not match {} rows", features.rows()),
            ));
        }
        Ok(Self { grid, features })
    }

    pub fn num_patches(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

param_struct! {
    /// Pre-norm transformer block.
    pub struct Block => BlockVars {
        pub ln1: LayerNorm,
        pub wq: Linear,
        pub wk: Linear,
        pub wv: Linear,
        pub wo: Linear,
        pub ln2: LayerNorm,
        pub ffn: Mlp,
    }
}

impl Block {
    fn new(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            wq: Linear::new(dim, dim, std, rng),
            wk: Linear::new(dim, dim, std, rng),
            wv: Linear::new(dim, dim, std, rng),
            wo: Linear::new(dim, dim, std, rng),
            ln2: LayerNorm::new(dim),
            ffn: Mlp::new(dim, FFN_RATIO * dim, std, rng),
        }
    }
}

impl BlockVars {
    /// Query-key attention sublayer plus feed-forward, both residual.
    fn forward_qkv(&self, tape: &mut Tape, x: Var, spec: AttentionSpec, zero_attention: bool) -> Var {
        let h = self.ln1.apply(tape, x);
        let x = if zero_attention {
            x
        } else {
            let q = self.wq.apply(tape, h);
            let k = self.wk.apply(tape, h);
            let v = self.wv.apply(tape, h);
            let a = tape.attention(q, k, v, spec);
            let o = self.wo.apply(tape, a);
            tape.add(x, o)
        };
        self.forward_ffn(tape, x)
    }

    /// Value-value attention sublayer plus feed-forward, both residual.
    fn forward_vv(&self, tape: &mut Tape, x: Var, blocks: usize, zero_attention: bool) -> Var {
        let x = if zero_attention {
            x
        } else {
            let h = self.ln1.apply(tape, x);
            let o = vv_branch(tape, h, &self.wv, &self.wo, blocks);
            tape.add(x, o)
        };
        self.forward_ffn(tape, x)
    }

    fn forward_ffn(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.ln2.apply(tape, x);
        let f = self.ffn.apply(tape, h);
        tape.add(x, f)
    }
}

/// `softmax(V·Vᵀ/√C)·V` followed by the output projection, where `V` is the
/// value projection of `tokens`; single head over the full width.
fn vv_branch(tape: &mut Tape, tokens: Var, wv: &crate::params::LinearVars, wo: &crate::params::LinearVars, blocks: usize) -> Var {
    let (n, c) = tape.value(tokens).shape();
    let v = wv.apply(tape, tokens);
    let per = n / blocks;
    let spec = AttentionSpec { heads: 1, scale: 1.0 / (c as f64).sqrt(), causal: false, q_block: per, k_block: per };
    let a = tape.attention(v, v, v, spec);
    wo.apply(tape, a)
}

/// Consistent (value-value) self-attention with residual:
/// `tokens + softmax(V·Vᵀ/√C)·V·W_o + b_o`, `V = tokens·W_v + b_v`.
pub fn vv_attention(tokens: &Tensor, wv: &Linear, wo: &Linear) -> Result<Tensor> {
    if tokens.rows() == 0 {
        return Err(CopsError::InvalidArgument("vv_attention needs at least one token".into()));
    }
    if wv.w.rows() != tokens.cols() || wv.w.cols() != wo.w.rows() || wo.w.cols() != tokens.cols() {
        return Err(CopsError::shape("vv_attention", "projection widths do not match tokens".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let wv = wv.bind(&mut tape, false);
    let wo = wo.bind(&mut tape, false);
    let o = vv_branch(&mut tape, x, &wv, &wo, 1);
    let y = tape.add(x, o);
    Ok(tape.value(y).clone())
}

param_struct! {
    pub struct VisionWeights => VisionVars {
        pub patch: Linear,
        pub cls: Tensor,
        pub pos: Tensor,
        pub blocks: Vec<Block>,
        pub ln_post: LayerNorm,
        pub proj: Tensor,
    }
}

/// Which attention sublayers to silence (for branch-independence checks).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BranchMask {
    pub zero_qkv: bool,
    pub zero_vv: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub weights: VisionWeights,
}

impl VisionEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (c, p, std) = (cfg.embed_dim, cfg.patch_size, cfg.init_std);
        let patch = Linear::new(p * p * 3, c, std, &mut rng);
        let cls = Tensor::randn(1, c, std, &mut rng);
        let pos = Tensor::randn(1 + cfg.num_patches(), c, std, &mut rng);
        let blocks = (0..cfg.num_layers).map(|_| Block::new(c, std, &mut rng)).collect();
        let proj = Tensor::randn(c, c, std, &mut rng);
        let weights = VisionWeights { patch, cls, pos, blocks, ln_post: LayerNorm::new(c), proj };
        Ok(Self { cfg, weights })
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.cfg.image_height {
            return Err(CopsError::shape(
                "encode_image",
                format!("height is {} but the encoder expects {}", image.height(), self.cfg.image_height),
            ));
        }
        if image.width() != self.cfg.image_width {
            return Err(CopsError::shape(
                "encode_image",
                format!("width is {} but the encoder expects {}", image.width(), self.cfg.image_width),
            ));
        }
        Ok(())
    }

    /// Patch embeddings before any attention layer (`HW × C`).
    pub fn patch_embed(&self, image: &ImageTensor) -> Result<Tensor> {
        self.check_image(image)?;
        Ok(self.weights.patch.forward(&image.patches(self.cfg.patch_size)))
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<(GlobalFeature, LocalFeatureMap)> {
        self.encode_with(image, BranchMask::default())
    }

    pub fn encode_with(&self, image: &ImageTensor, mask: BranchMask) -> Result<(GlobalFeature, LocalFeatureMap)> {
        let embedded = self.patch_embed(image)?;
        let c = self.cfg.embed_dim;
        let n = embedded.rows() + 1;
        let mut tape = Tape::new();
        let w = self.weights.bind(&mut tape, false);
        let emb = tape.constant(embedded);
        let tokens = tape.concat(&[w.cls, emb]);
        let x0 = tape.add(tokens, w.pos);
        let spec = AttentionSpec {
            heads: self.cfg.num_heads,
            scale: 1.0 / ((c / self.cfg.num_heads) as f64).sqrt(),
            causal: false,
            q_block: n,
            k_block: n,
        };
        let (mut qkv, mut vv) = (x0, x0);
        for block in &w.blocks {
            qkv = block.forward_qkv(&mut tape, qkv, spec, mask.zero_qkv);
            vv = block.forward_vv(&mut tape, vv, 1, mask.zero_vv);
        }
        let cls = tape.slice_rows(qkv, 0, 1);
        let g = w.ln_post.apply(&mut tape, cls);
        let g = tape.matmul(g, w.proj);
        let patches = tape.slice_rows(vv, 1, n - 1);
        let f = w.ln_post.apply(&mut tape, patches);
        let f = tape.matmul(f, w.proj);
        let global = GlobalFeature(tape.value(g).clone());
        let local = LocalFeatureMap::new(self.cfg.grid(), tape.value(f).clone())?;
        Ok((global, local))
    }
}

/// Free-function form of [`VisionEncoder::encode`].
pub fn encode_image(image: &ImageTensor, encoder: &VisionEncoder) -> Result<(GlobalFeature, LocalFeatureMap)> {
    encoder.encode(image)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Prompt length `L` accepted by the encoder.
    pub prompt_len: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(CopsError::InvalidArgument("text heads must divide embed_dim".into()));
        }
        if self.num_layers < DEEP_PROMPT_GROUPS + 1 {
            return Err(CopsError::InvalidArgument(format!(
                "text encoder needs at least {} layers for its deep prompts, got {}",
                DEEP_PROMPT_GROUPS + 1,
                self.num_layers
            )));
        }
        if self.prompt_len == 0 {
            return Err(CopsError::InvalidArgument("prompt length must be positive".into()));
        }
        Ok(())
    }

    /// Sequence length: start token, prefix slots, prompt, end token.
    pub fn seq_len(&self) -> usize {
        self.prompt_len + DEEP_PROMPT_LEN + 2
    }
}

param_struct! {
    pub struct TextFrozen => TextFrozenVars {
        /// Input projection of prompt tokens (identity plus noise), so that a
        /// constant shift of a token is not erased by the first LayerNorm.
        pub token_proj: Tensor,
        pub sos: Tensor,
        pub prefix: Tensor,
        pub eos: Tensor,
        pub pos: Tensor,
        pub blocks: Vec<Block>,
        pub ln_final: LayerNorm,
        pub proj: Tensor,
    }
}

/// Text encoder; only `deep_prompts` is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBackbone {
    pub cfg: TextConfig,
    pub frozen: TextFrozen,
    /// `DEEP_PROMPT_GROUPS` tensors of `DEEP_PROMPT_LEN × C`.
    pub deep_prompts: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TextVars {
    pub frozen: TextFrozenVars,
    pub deep: Vec<Var>,
}

impl TextBackbone {
    pub fn new(cfg: TextConfig) -> Result<Self> {
        cfg.validate()?;
        // Offset keeps the text stream independent of the vision stream under one seed.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57_0000_0000_0001);
        let (c, std) = (cfg.embed_dim, cfg.init_std);
        let mut token_proj = Tensor::randn(c, c, std, &mut rng);
        token_proj.add_assign(&Tensor::identity(c));
        let frozen = TextFrozen {
            token_proj,
            sos: Tensor::randn(1, c, std, &mut rng),
            prefix: Tensor::randn(DEEP_PROMPT_LEN, c, std, &mut rng),
            eos: Tensor::randn(1, c, std, &mut rng),
            pos: Tensor::randn(cfg.seq_len(), c, std, &mut rng),
            blocks: (0..cfg.num_layers).map(|_| Block::new(c, std, &mut rng)).collect(),
            ln_final: LayerNorm::new(c),
            proj: Tensor::randn(c, c, std, &mut rng),
        };
        let deep_prompts = (0..DEEP_PROMPT_GROUPS).map(|_| Tensor::randn(DEEP_PROMPT_LEN, c, std, &mut rng)).collect();
        Ok(Self { cfg, frozen, deep_prompts })
    }

    /// Frozen weights always bind as constants; deep prompts as trainable when asked.
    pub fn bind(&self, tape: &mut Tape, train_deep_prompts: bool) -> TextVars {
        TextVars { frozen: self.frozen.bind(tape, false), deep: self.deep_prompts.bind(tape, train_deep_prompts) }
    }

    /// Encode `count` prompts stacked as `(count·L) × C`; returns `count × C`.
    pub fn encode_var(&self, tape: &mut Tape, vars: &TextVars, prompts: Var, count: usize) -> Var {
        let (l, t) = (self.cfg.prompt_len, self.cfg.seq_len());
        assert_eq!(tape.value(prompts).rows(), count * l, "encode_var: prompt rows");
        let base = count * l;
        let f = &vars.frozen;
        let prompts = tape.matmul(prompts, f.token_proj);
        let pool = tape.concat(&[prompts, f.sos, f.prefix, f.eos]);
        let mut index = Vec::with_capacity(count * t);
        for s in 0..count {
            index.push(base);
            index.extend((0..DEEP_PROMPT_LEN).map(|j| base + 1 + j));
            index.extend((0..l).map(|j| s * l + j));
            index.push(base + 1 + DEEP_PROMPT_LEN);
        }
        let tokens = tape.gather_rows(pool, index);
        let pos = tape.gather_rows(f.pos, (0..count * t).map(|r| r % t).collect());
        let mut x = tape.add(tokens, pos);
        let c = self.cfg.embed_dim;
        let spec = AttentionSpec {
            heads: self.cfg.num_heads,
            scale: 1.0 / ((c / self.cfg.num_heads) as f64).sqrt(),
            causal: true,
            q_block: t,
            k_block: t,
        };
        for (layer, block) in f.blocks.iter().enumerate() {
            if (1..=DEEP_PROMPT_GROUPS).contains(&layer) {
                let n = count * t;
                let cat = tape.concat(&[x, vars.deep[layer - 1]]);
                let index = (0..n)
                    .map(|r| {
                        let p = r % t;
                        if (1..=DEEP_PROMPT_LEN).contains(&p) {
                            n + p - 1
                        } else {
                            r
                        }
                    })
                    .collect();
                x = tape.gather_rows(cat, index);
            }
            x = block.forward_qkv(tape, x, spec, false);
        }
        let eos = tape.gather_rows(x, (0..count).map(|s| s * t + t - 1).collect());
        let e = f.ln_final.apply(tape, eos);
        tape.matmul(e, f.proj)
    }

    /// End-of-sequence embedding of a single `L × C` prompt.
    pub fn encode_text(&self, prompt: &Tensor) -> Result<Tensor> {
        if prompt.rows() != self.cfg.prompt_len || prompt.cols() != self.cfg.embed_dim {
            return Err(CopsError::shape(
                "encode_text",
                format!(
                    "prompt is {}x{}, expected {}x{}",
                    prompt.rows(),
                    prompt.cols(),
                    self.cfg.prompt_len,
                    self.cfg.embed_dim
                ),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let p = tape.constant(prompt.clone());
        let e = self.encode_var(&mut tape, &vars, p, 1);
        Ok(tape.value(e).clone())
    }

    pub fn frozen_scalars(&self) -> usize {
        self.frozen.num_scalars()
    }
}

/// Free-function form of [`TextBackbone::encode_text`].
pub fn encode_text(prompt: &Tensor, tb: &TextBackbone) -> Result<Tensor> {
    tb.encode_text(prompt)
}

impl VarList for TextVars {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        self.frozen.collect_vars(out);
        self.deep.collect_vars(out);
    }
}
