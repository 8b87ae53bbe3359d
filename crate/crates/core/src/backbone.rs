//! Frozen dual-encoder transformer backbone.
//!
//! Two branches share nothing but width conventions: a vision branch over
//! non-overlapping image patches with a learned `[CLS]` token, and a text
//! branch over token ids wrapped in `[BOS]`/`[EOS]` markers. Each branch is
//! a stack of pre-LN transformer blocks (`x + MHA(LN(x))`, then
//! `x + MLP(LN(x))`); the MLP sublayer exposes the hook where the adapter
//! mixture attaches. Backbone weights are Gaussian-initialized from a seed
//! and frozen; only mixture parameters (names containing `.moa.`) train.
//! The global feature is the final-layer `[CLS]` (vision) or `[EOS]` (text)
//! row, layer-normalized then unit L2-normalized, so similarity is cosine.

use serde::{Deserialize, Serialize};

use crate::adapter::{build_moa_layer, sma_forward, AdapterInput, MoaConfig, MoaLayer, RoutingOutcome};
use crate::error::{Error, Result};
use crate::params::{gaussian_vec, stream_rng, Binding, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

/// Layer-norm stabilizer used throughout the backbone.
pub const LN_EPS: f64 = 1e-5;

/// Backbone dimensions and initialization seed. Defaults give a model that
/// trains in minutes on one CPU core while exercising every mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Embedding width.
    pub d_model: usize,
    /// Attention heads (must divide `d_model`).
    pub n_heads: usize,
    /// Transformer blocks per branch.
    pub n_layers: usize,
    /// MLP hidden expansion factor.
    pub mlp_ratio: usize,
    /// Input image (height, width) in pixels.
    pub image_hw: (usize, usize),
    /// Patch side length (must divide both image dimensions).
    pub patch: usize,
    /// Image channels.
    pub channels: usize,
    /// Synthetic token alphabet size.
    pub vocab_size: usize,
    /// Maximum text sequence length including [BOS] and [EOS].
    pub text_len: usize,
    /// Gaussian init scale for weights.
    pub init_std: f64,
    /// Seed for all weight-init streams.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            mlp_ratio: 4,
            image_hw: (32, 16),
            patch: 8,
            channels: 1,
            vocab_size: 64,
            text_len: 16,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.patch == 0
            || self.image_hw.0 % self.patch != 0
            || self.image_hw.1 % self.patch != 0
        {
            return Err(Error::Config(format!(
                "patch {} must divide image dimensions {:?}",
                self.patch, self.image_hw
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be >= 1".into()));
        }
        if self.text_len < 2 {
            return Err(Error::Config(
                "text_len must be >= 2 ([BOS] and [EOS] alone fill two slots)".into(),
            ));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_hw.0 / self.patch) * (self.image_hw.1 / self.patch)
    }

    /// Vision token count: patches + [CLS].
    pub fn n_image_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    /// Text token count for an id list: ids + [BOS] + [EOS].
    pub fn n_text_tokens(&self, n_ids: usize) -> usize {
        n_ids + 2
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Embedded token matrix plus marker bookkeeping.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[T, d_model]` node.
    pub tokens: TensorId,
    /// Marker rows: `[0]` for vision ([CLS]); `[0, T-1]` for text
    /// ([BOS], [EOS]).
    pub special_positions: Vec<usize>,
    /// The row `encode` reads as the global feature.
    pub feature_row: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub attn: AttentionParams,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct ImageEmbedParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub cls: ParamId,
}

#[derive(Debug, Clone)]
pub struct TextEmbedParams {
    pub tok: ParamId,
    pub pos: ParamId,
    pub bos: ParamId,
    pub eos: ParamId,
}

#[derive(Debug, Clone)]
pub struct ImageBranch {
    pub embed: ImageEmbedParams,
    pub blocks: Vec<BlockParams>,
    pub moa: Vec<MoaLayer>,
    pub final_ln_gamma: ParamId,
    pub final_ln_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct TextBranch {
    pub embed: TextEmbedParams,
    pub blocks: Vec<BlockParams>,
    pub moa: Vec<MoaLayer>,
    pub final_ln_gamma: ParamId,
    pub final_ln_beta: ParamId,
}

/// The full two-branch model: frozen backbone parameters plus (optionally)
/// one trainable adapter mixture per block per branch.
#[derive(Debug)]
pub struct DualEncoder {
    pub cfg: BackboneConfig,
    pub moa_cfg: Option<MoaConfig>,
    pub store: ParamStore,
    pub image: ImageBranch,
    pub text: TextBranch,
}

/// One encoder pass's outputs: the unit-norm global feature and per-layer
/// routing outcomes (empty when the model carries no mixture).
#[derive(Debug)]
pub struct EncodeOutput {
    pub feature: TensorId,
    pub routing: Vec<RoutingOutcome>,
}

impl DualEncoder {
    /// Build and seed both branches; backbone weights come out frozen,
    /// mixture weights trainable.
    pub fn build(cfg: BackboneConfig, moa_cfg: Option<MoaConfig>) -> Result<DualEncoder> {
        cfg.validate()?;
        if let Some(mc) = &moa_cfg {
            mc.validate(cfg.d_model)?;
        }
        let mut store = ParamStore::new();
        let image = build_image_branch(&mut store, &cfg, moa_cfg.as_ref())?;
        let text = build_text_branch(&mut store, &cfg, moa_cfg.as_ref())?;
        freeze_backbone(&mut store);
        Ok(DualEncoder {
            cfg,
            moa_cfg,
            store,
            image,
            text,
        })
    }

    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Result<Binding> {
        self.store.bind(tape, with_grad)
    }

    /// Patchify, project, add positions, prepend [CLS].
    pub fn embed_image(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        pixels: &[f64],
    ) -> Result<TokenSequence> {
        let cfg = &self.cfg;
        let (h, w) = cfg.image_hw;
        let c = cfg.channels;
        if pixels.len() != h * w * c {
            return Err(Error::InvalidArgument {
                op: "embed_image",
                msg: format!(
                    "expected {}x{}x{} = {} pixels, got {}",
                    h,
                    w,
                    c,
                    h * w * c,
                    pixels.len()
                ),
            });
        }
        let p = cfg.patch;
        let rows = h / p;
        let cols = w / p;
        let pdim = cfg.patch_dim();
        let mut patches = Vec::with_capacity(rows * cols * pdim);
        for pr in 0..rows {
            for pc in 0..cols {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let idx = ((pr * p + py) * w + (pc * p + px)) * c + ch;
                            patches.push(pixels[idx]);
                        }
                    }
                }
            }
        }
        let patches = tape.constant(patches, &[rows * cols, pdim])?;
        let proj = tape.matmul(patches, binding.id(self.image.embed.patch_w))?;
        let proj = tape.add_row(proj, binding.id(self.image.embed.patch_b))?;
        let pos = tape.reshape(
            binding.id(self.image.embed.pos),
            &[rows * cols, cfg.d_model],
        )?;
        let with_pos = tape.add(proj, pos)?;
        let cls = tape.reshape(binding.id(self.image.embed.cls), &[1, cfg.d_model])?;
        let tokens = tape.concat_rows(cls, with_pos)?;
        Ok(TokenSequence {
            tokens,
            special_positions: vec![0],
            feature_row: 0,
        })
    }

    /// Look up id embeddings, add positions, wrap in [BOS]/[EOS].
    pub fn embed_text(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        ids: &[usize],
    ) -> Result<TokenSequence> {
        let cfg = &self.cfg;
        if ids.len() + 2 > cfg.text_len {
            return Err(Error::Data(format!(
                "text of {} ids exceeds text_len {} (two slots go to [BOS]/[EOS])",
                ids.len(),
                cfg.text_len
            )));
        }
        for &id in ids {
            if id >= cfg.vocab_size {
                return Err(Error::Data(format!(
                    "token id {id} out of vocabulary (size {})",
                    cfg.vocab_size
                )));
            }
        }
        let d = cfg.d_model;
        let bos = tape.reshape(binding.id(self.text.embed.bos), &[1, d])?;
        let eos = tape.reshape(binding.id(self.text.embed.eos), &[1, d])?;
        let tokens = if ids.is_empty() {
            tape.concat_rows(bos, eos)?
        } else {
            let looked_up = tape.gather_rows(binding.id(self.text.embed.tok), ids)?;
            let positions: Vec<usize> = (0..ids.len()).collect();
            let pos = tape.gather_rows(binding.id(self.text.embed.pos), &positions)?;
            let body = tape.add(looked_up, pos)?;
            let with_bos = tape.concat_rows(bos, body)?;
            tape.concat_rows(with_bos, eos)?
        };
        let t = ids.len() + 2;
        Ok(TokenSequence {
            tokens,
            special_positions: vec![0, t - 1],
            feature_row: t - 1,
        })
    }

    pub fn encode_image(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        pixels: &[f64],
    ) -> Result<EncodeOutput> {
        let seq = self.embed_image(tape, binding, pixels)?;
        self.run_blocks(tape, binding, seq, BranchKind::Image)
    }

    pub fn encode_text(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        ids: &[usize],
    ) -> Result<EncodeOutput> {
        let seq = self.embed_text(tape, binding, ids)?;
        self.run_blocks(tape, binding, seq, BranchKind::Text)
    }

    fn run_blocks(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        seq: TokenSequence,
        kind: BranchKind,
    ) -> Result<EncodeOutput> {
        let (blocks, moa, g, b) = match kind {
            BranchKind::Image => (
                &self.image.blocks,
                &self.image.moa,
                self.image.final_ln_gamma,
                self.image.final_ln_beta,
            ),
            BranchKind::Text => (
                &self.text.blocks,
                &self.text.moa,
                self.text.final_ln_gamma,
                self.text.final_ln_beta,
            ),
        };
        let mut x = seq.tokens;
        let mut routing = Vec::new();
        for (l, block) in blocks.iter().enumerate() {
            let hook = match (&self.moa_cfg, moa.get(l)) {
                (Some(cfg), Some(layer)) => Some((layer, cfg)),
                _ => None,
            };
            let (y, outcome) =
                transformer_block(tape, binding, x, block, self.cfg.n_heads, hook)?;
            x = y;
            if let Some(o) = outcome {
                routing.push(o);
            }
        }
        let normed = tape.layer_norm(x, binding.id(g), binding.id(b), LN_EPS)?;
        let feat_row = tape.row(normed, seq.feature_row)?;
        let feature = tape.l2_normalize(feat_row)?;
        Ok(EncodeOutput { feature, routing })
    }
}

enum BranchKind {
    Image,
    Text,
}

/// Scaled dot-product multi-head attention over a `[T, d]` sequence.
/// Per head: `softmax(Q·Kᵀ / sqrt(d_head))·V`; heads concatenate and pass
/// through the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    binding: &Binding,
    x: TensorId,
    attn: &AttentionParams,
    n_heads: usize,
) -> Result<TensorId> {
    let d = tape.shape(x)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "n_heads {n_heads} must divide width {d}"
        )));
    }
    let dh = d / n_heads;
    let q = tape.matmul(x, binding.id(attn.wq))?;
    let q = tape.add_row(q, binding.id(attn.bq))?;
    let k = tape.matmul(x, binding.id(attn.wk))?;
    let k = tape.add_row(k, binding.id(attn.bk))?;
    let v = tape.matmul(x, binding.id(attn.wv))?;
    let v = tape.add_row(v, binding.id(attn.bv))?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.col_slice(q, h * dh, dh)?;
        let kh = tape.col_slice(k, h * dh, dh)?;
        let vh = tape.col_slice(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scaled, 1)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, binding.id(attn.wo))?;
    tape.add_row(out, binding.id(attn.bo))
}

/// One pre-LN block: `x ← x + MHA(LN(x))`, then `h_o = x + MLP(LN(x))`.
/// With a mixture hook, the layer output adds the routed expert sum on top
/// of `h_o`; the experts read the pre-LN residual stream (or the normalized
/// stream, per [`AdapterInput`]).
pub fn transformer_block(
    tape: &mut Tape,
    binding: &Binding,
    x: TensorId,
    block: &BlockParams,
    n_heads: usize,
    hook: Option<(&MoaLayer, &MoaConfig)>,
) -> Result<(TensorId, Option<RoutingOutcome>)> {
    let ln1 = tape.layer_norm(x, binding.id(block.ln1_gamma), binding.id(block.ln1_beta), LN_EPS)?;
    let attn_out = multi_head_attention(tape, binding, ln1, &block.attn, n_heads)?;
    let x1 = tape.add(x, attn_out)?;

    let ln2 = tape.layer_norm(
        x1,
        binding.id(block.ln2_gamma),
        binding.id(block.ln2_beta),
        LN_EPS,
    )?;
    let h1 = tape.matmul(ln2, binding.id(block.mlp_w1))?;
    let h1 = tape.add_row(h1, binding.id(block.mlp_b1))?;
    let act = tape.relu(h1)?;
    let h2 = tape.matmul(act, binding.id(block.mlp_w2))?;
    let mlp_out = tape.add_row(h2, binding.id(block.mlp_b2))?;
    let h_o = tape.add(x1, mlp_out)?;

    match hook {
        None => Ok((h_o, None)),
        Some((layer, cfg)) => {
            let expert_input = match cfg.adapter_input {
                AdapterInput::Residual => x1,
                AdapterInput::Normalized => ln2,
            };
            let (y, outcome) = sma_forward(tape, binding, expert_input, h_o, layer, cfg)?;
            Ok((y, Some(outcome)))
        }
    }
}

/// Enforce the freezing contract: a parameter is trainable iff its name
/// marks it as part of the adapter mixture (contains `.moa.`).
pub fn freeze_backbone(store: &mut ParamStore) {
    for id in 0..store.len() {
        let p = store.get_mut(id);
        p.trainable = p.name.contains(".moa.");
    }
}

fn build_image_branch(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    moa_cfg: Option<&MoaConfig>,
) -> Result<ImageBranch> {
    let d = cfg.d_model;
    let pdim = cfg.patch_dim();
    let n_patches = cfg.n_patches();
    let gauss = |label: &str, n: usize| {
        let mut rng = stream_rng(cfg.seed, label);
        gaussian_vec(&mut rng, n, cfg.init_std)
    };
    let embed = ImageEmbedParams {
        patch_w: store.add(
            "image.embed.patch_w",
            gauss("image.embed.patch_w", pdim * d),
            &[pdim, d],
            false,
        )?,
        patch_b: store.add("image.embed.patch_b", vec![0.0; d], &[d], false)?,
        pos: store.add(
            "image.embed.pos",
            gauss("image.embed.pos", n_patches * d),
            &[n_patches, d],
            false,
        )?,
        cls: store.add("image.embed.cls", gauss("image.embed.cls", d), &[d], false)?,
    };
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut moa = Vec::new();
    for l in 0..cfg.n_layers {
        let prefix = format!("image.block{l}");
        blocks.push(build_block(store, cfg, &prefix)?);
        if let Some(mc) = moa_cfg {
            moa.push(build_moa_layer(store, &prefix, d, mc, cfg.seed)?);
        }
    }
    let final_ln_gamma = store.add("image.final_ln.gamma", vec![1.0; d], &[d], false)?;
    let final_ln_beta = store.add("image.final_ln.beta", vec![0.0; d], &[d], false)?;
    Ok(ImageBranch {
        embed,
        blocks,
        moa,
        final_ln_gamma,
        final_ln_beta,
    })
}

fn build_text_branch(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    moa_cfg: Option<&MoaConfig>,
) -> Result<TextBranch> {
    let d = cfg.d_model;
    let max_ids = cfg.text_len - 2;
    let gauss = |label: &str, n: usize| {
        let mut rng = stream_rng(cfg.seed, label);
        gaussian_vec(&mut rng, n, cfg.init_std)
    };
    let embed = TextEmbedParams {
        tok: store.add(
            "text.embed.tok",
            gauss("text.embed.tok", cfg.vocab_size * d),
            &[cfg.vocab_size, d],
            false,
        )?,
        pos: store.add(
            "text.embed.pos",
            gauss("text.embed.pos", max_ids.max(1) * d),
            &[max_ids.max(1), d],
            false,
        )?,
        bos: store.add("text.embed.bos", gauss("text.embed.bos", d), &[d], false)?,
        eos: store.add("text.embed.eos", gauss("text.embed.eos", d), &[d], false)?,
    };
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut moa = Vec::new();
    for l in 0..cfg.n_layers {
        let prefix = format!("text.block{l}");
        blocks.push(build_block(store, cfg, &prefix)?);
        if let Some(mc) = moa_cfg {
            moa.push(build_moa_layer(store, &prefix, d, mc, cfg.seed)?);
        }
    }
    let final_ln_gamma = store.add("text.final_ln.gamma", vec![1.0; d], &[d], false)?;
    let final_ln_beta = store.add("text.final_ln.beta", vec![0.0; d], &[d], false)?;
    Ok(TextBranch {
        embed,
        blocks,
        moa,
        final_ln_gamma,
        final_ln_beta,
    })
}

fn build_block(store: &mut ParamStore, cfg: &BackboneConfig, prefix: &str) -> Result<BlockParams> {
    let d = cfg.d_model;
    let hidden = d * cfg.mlp_ratio;
    let mut weight = |suffix: &str, numel: usize, shape: &[usize]| -> Result<ParamId> {
        let name = format!("{prefix}.{suffix}");
        let mut rng = stream_rng(cfg.seed, &name);
        let data = gaussian_vec(&mut rng, numel, cfg.init_std);
        store.add(name, data, shape, false)
    };
    let wq = weight("attn.wq", d * d, &[d, d])?;
    let wk = weight("attn.wk", d * d, &[d, d])?;
    let wv = weight("attn.wv", d * d, &[d, d])?;
    let wo = weight("attn.wo", d * d, &[d, d])?;
    let mlp_w1 = weight("mlp.w1", d * hidden, &[d, hidden])?;
    let mlp_w2 = weight("mlp.w2", hidden * d, &[hidden, d])?;
    let mut fill = |suffix: &str, n: usize, v: f64| -> Result<ParamId> {
        store.add(format!("{prefix}.{suffix}"), vec![v; n], &[n], false)
    };
    let bq = fill("attn.bq", d, 0.0)?;
    let bk = fill("attn.bk", d, 0.0)?;
    let bv = fill("attn.bv", d, 0.0)?;
    let bo = fill("attn.bo", d, 0.0)?;
    let mlp_b1 = fill("mlp.b1", hidden, 0.0)?;
    let mlp_b2 = fill("mlp.b2", d, 0.0)?;
    let ln1_gamma = fill("ln1.gamma", d, 1.0)?;
    let ln1_beta = fill("ln1.beta", d, 0.0)?;
    let ln2_gamma = fill("ln2.gamma", d, 1.0)?;
    let ln2_beta = fill("ln2.beta", d, 0.0)?;
    Ok(BlockParams {
        ln1_gamma,
        ln1_beta,
        attn: AttentionParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        },
        ln2_gamma,
        ln2_beta,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
    })
}
