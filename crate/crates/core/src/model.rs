//! ViT backbone with in-backbone decoding.
//!
//! The first `depth - decoder_blocks` blocks form the encoder, which only
//! sees the visible (context) tokens. The trailing blocks act as the
//! decoder: they run over `[decoding latents; context]` and the latent rows
//! are read out through a patch-wise linear head. Blocks are pre-norm:
//! `norm → [rope] → attention → residual; norm → MLP → residual`.

use std::fmt;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BindMode, Binder, ParamStore};
use crate::patch::patch_grid;
use crate::rope::{build_rotation_table, grid_positions, ApplySite, GridPos, RopeConfig, RotationTable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total block count, decoder included.
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub patch_size: [usize; 3],
    /// Trailing blocks that act as the decoder.
    pub decoder_blocks: usize,
    /// `None` disables rotary embeddings inside the blocks.
    pub rope: Option<RopeConfig>,
    /// Adds one learned vector per grid position after the patch embedding.
    #[serde(default)]
    pub learned_pos: bool,
    /// Frame grid `(T, H, W)`.
    pub input: [usize; 3],
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("model.n_heads", "d_model must be a positive multiple of n_heads"));
        }
        if self.decoder_blocks >= self.depth {
            return Err(Error::config("model.decoder_blocks", "must be smaller than depth"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("model.mlp_ratio", "must be positive"));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::config("model.ln_eps", "must be positive"));
        }
        patch_grid(self.input, self.patch_size)?;
        if let Some(r) = &self.rope {
            if r.d_model != self.d_model {
                return Err(Error::config("model.rope.d_model", "must equal model d_model"));
            }
            r.part_sizes()?;
        }
        Ok(())
    }

    pub fn encoder_depth(&self) -> usize {
        self.depth - self.decoder_blocks
    }

    pub fn grid(&self) -> [usize; 3] {
        [
            self.input[0] / self.patch_size[0],
            self.input[1] / self.patch_size[1],
            self.input[2] / self.patch_size[2],
        ]
    }

    pub fn n_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Values per RGB patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch_size.iter().product::<usize>() * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.d_model as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Rope settings for decoding tokens; falls back to the defaults when the
    /// blocks themselves do not use rope.
    pub fn decoding_rope(&self) -> RopeConfig {
        self.rope.clone().unwrap_or_else(|| RopeConfig::new(self.d_model))
    }
}

/// Prediction target: raw pixels or the output of encoder block `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Pixels,
    Layer(usize),
}

impl Target {
    pub fn head_prefix(self) -> String {
        match self {
            Target::Pixels => "pixel_head".to_string(),
            Target::Layer(k) => format!("latent_heads.{k}"),
        }
    }

    pub fn layer(self) -> usize {
        match self {
            Target::Pixels => 0,
            Target::Layer(k) => k,
        }
    }

    pub fn from_layer(k: usize) -> Self {
        if k == 0 {
            Target::Pixels
        } else {
            Target::Layer(k)
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Pixels => write!(f, "pixels"),
            Target::Layer(k) => write!(f, "layer{k}"),
        }
    }
}

pub fn block_param_names(prefix: &str) -> Vec<String> {
    ["norm1.g", "norm1.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "norm2.g", "norm2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

/// 1-based encoder block a parameter belongs to, if any.
pub fn block_number(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("blocks.")?;
    let idx: usize = rest.split('.').next()?.parse().ok()?;
    Some(idx + 1)
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.insert(format!("{prefix}.w"), xavier(fan_in, fan_out, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_block(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut impl Rng) {
    store.insert(format!("{prefix}.norm1.g"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.norm1.b"), Tensor::zeros(&[d]));
    init_linear(store, &format!("{prefix}.qkv"), d, 3 * d, rng);
    init_linear(store, &format!("{prefix}.proj"), d, d, rng);
    store.insert(format!("{prefix}.norm2.g"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.norm2.b"), Tensor::zeros(&[d]));
    init_linear(store, &format!("{prefix}.fc1"), d, hidden, rng);
    init_linear(store, &format!("{prefix}.fc2"), hidden, d, rng);
}

/// Backbone architecture plus its precomputed rotation table.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: ModelConfig,
    table: RotationTable,
    decoding_tokens: Tensor,
}

impl Backbone {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let table = build_rotation_table(&cfg.decoding_rope(), cfg.grid())?;
        let decoding_tokens = decoding_tokens(&table)?;
        Ok(Self { cfg, table, decoding_tokens })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn table(&self) -> &RotationTable {
        &self.table
    }

    /// Fresh parameters: Xavier-uniform weights, zero biases, unit norm gains,
    /// zero-initialized pixel head.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let c = &self.cfg;
        let mut store = ParamStore::new();
        init_linear(&mut store, "embed", c.patch_dim(), c.d_model, rng);
        if c.learned_pos {
            store.insert("pos_embed", Tensor::randn(&[c.n_tokens(), c.d_model], 0.02, rng));
        }
        for i in 0..c.depth {
            init_block(&mut store, &block_prefix(i), c.d_model, c.mlp_hidden(), rng);
        }
        if c.decoder_blocks > 0 {
            self.ensure_head(&mut store, Target::Pixels);
        }
        store
    }

    /// Output width of the head for `target`.
    pub fn head_width(&self, target: Target) -> usize {
        match target {
            Target::Pixels => self.cfg.patch_dim(),
            Target::Layer(_) => self.cfg.d_model,
        }
    }

    /// Creates a zero-initialized head for `target` unless one exists.
    /// Returns whether a new head was created.
    pub fn ensure_head(&self, store: &mut ParamStore, target: Target) -> bool {
        let prefix = target.head_prefix();
        if store.contains(&format!("{prefix}.w")) {
            return false;
        }
        store.insert(format!("{prefix}.w"), Tensor::zeros(&[self.cfg.d_model, self.head_width(target)]));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[self.head_width(target)]));
        true
    }

    pub fn rotations(&self, positions: &[GridPos]) -> Result<Option<Rc<crate::rope::RowRotations>>> {
        match &self.cfg.rope {
            Some(_) => Ok(Some(Rc::new(self.table.rows_for(positions)?))),
            None => Ok(None),
        }
    }

    pub fn position_index(&self, pos: GridPos) -> usize {
        let g = self.cfg.grid();
        (pos[0] * g[1] + pos[1]) * g[2] + pos[2]
    }

    /// Patch embedding (plus learned positions if configured).
    pub fn embed(&self, g: &mut Graph, b: &mut Binder, raw: Var, positions: &[GridPos], mode: BindMode) -> Result<Var> {
        let w = b.bind(g, "embed.w", mode)?;
        let bias = b.bind(g, "embed.b", mode)?;
        let x = g.linear(raw, w, bias)?;
        if self.cfg.learned_pos {
            let pe = b.bind(g, "pos_embed", mode)?;
            let idx: Vec<usize> = positions.iter().map(|&p| self.position_index(p)).collect();
            let rows = g.gather_rows(pe, &idx)?;
            return g.add(x, rows);
        }
        Ok(x)
    }

    /// Runs encoder blocks `1..=freeze_layer` as constants and the rest with
    /// gradients. Returns the final embeddings and, when `record_layers`,
    /// the output of every encoder block.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        raw: Var,
        positions: &[GridPos],
        freeze_layer: usize,
        record_layers: bool,
    ) -> Result<(Var, Vec<Var>)> {
        if freeze_layer > self.cfg.encoder_depth() {
            return Err(Error::Contract(format!(
                "freeze_layer {freeze_layer} exceeds encoder depth {}",
                self.cfg.encoder_depth()
            )));
        }
        let mode_for = |layer: usize| if layer <= freeze_layer { BindMode::Const } else { BindMode::Auto };
        let embed_mode = if freeze_layer >= 1 { BindMode::Const } else { BindMode::Auto };
        let rot = self.rotations(positions)?;
        let mut x = self.embed(g, b, raw, positions, embed_mode)?;
        let mut outs = Vec::new();
        for i in 0..self.cfg.encoder_depth() {
            x = block_forward(g, b, &self.cfg, &block_prefix(i), x, rot.as_ref(), mode_for(i + 1))?;
            if record_layers {
                outs.push(x);
            }
        }
        Ok((x, outs))
    }

    /// Outputs of encoder blocks `1..=upto` on the given tokens, each bound
    /// with `mode`. Blocks past `upto` are not executed.
    pub fn forward_prefix(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        raw: Var,
        positions: &[GridPos],
        upto: usize,
        mode: BindMode,
    ) -> Result<Vec<Var>> {
        if upto > self.cfg.encoder_depth() {
            return Err(Error::Contract(format!("layer {upto} exceeds encoder depth {}", self.cfg.encoder_depth())));
        }
        let rot = self.rotations(positions)?;
        let mut x = self.embed(g, b, raw, positions, mode)?;
        let mut outs = Vec::with_capacity(upto);
        for i in 0..upto {
            x = block_forward(g, b, &self.cfg, &block_prefix(i), x, rot.as_ref(), mode)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// One decoding token per grid position (N×D), row-major.
    pub fn decoding_tokens(&self) -> &Tensor {
        &self.decoding_tokens
    }

    /// Runs the decoder blocks over `[latents; context]` and returns the
    /// latent rows.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        context: Var,
        context_positions: &[GridPos],
        latents: Var,
        latent_positions: &[GridPos],
    ) -> Result<Var> {
        let n = g.value(latents).rows();
        let mut positions = latent_positions.to_vec();
        positions.extend_from_slice(context_positions);
        let all = if context_positions.is_empty() { latents } else { g.concat_rows(&[latents, context])? };
        let rot = self.rotations(&positions)?;
        let mut x = all;
        for i in self.cfg.encoder_depth()..self.cfg.depth {
            x = block_forward(g, b, &self.cfg, &block_prefix(i), x, rot.as_ref(), BindMode::Auto)?;
        }
        g.slice_rows(x, 0, n)
    }

    /// Patch-wise linear head for `target`.
    pub fn predict(&self, g: &mut Graph, b: &mut Binder, out_tokens: Var, target: Target) -> Result<Var> {
        let prefix = target.head_prefix();
        let w = b.var(g, &format!("{prefix}.w"))?;
        let bias = b.var(g, &format!("{prefix}.b"))?;
        g.linear(out_tokens, w, bias)
    }

    /// Encoder block outputs `h_1..h_upto` for raw tokens on the full grid,
    /// computed without any gradient bookkeeping.
    pub fn layer_outputs(&self, params: &ParamStore, raw: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(params);
        let x = g.constant(raw.clone())?;
        let positions = grid_positions(self.cfg.grid());
        let outs = self.forward_prefix(&mut g, &mut b, x, &positions, upto, BindMode::Const)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Decoding token at each position: the position's rotation applied to the
/// fixed unit vector `(1, …, 1)/√D`.
pub fn decoding_tokens(table: &RotationTable) -> Result<Tensor> {
    let d = table.d_model();
    let positions = grid_positions(table.grid());
    let u = 1.0 / (d as f64).sqrt();
    let base = Tensor::full(&[positions.len(), d], u);
    crate::rope::apply_rope(&base, table, &positions)
}

/// One pre-norm transformer block over `x` (M×D).
pub fn block_forward(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    rot: Option<&Rc<crate::rope::RowRotations>>,
    mode: BindMode,
) -> Result<Var> {
    let mut p = |g: &mut Graph, s: &str| b.bind(g, &format!("{prefix}.{s}"), mode);
    let n1g = p(g, "norm1.g")?;
    let n1b = p(g, "norm1.b")?;
    let qkv_w = p(g, "qkv.w")?;
    let qkv_b = p(g, "qkv.b")?;
    let proj_w = p(g, "proj.w")?;
    let proj_b = p(g, "proj.b")?;
    let n2g = p(g, "norm2.g")?;
    let n2b = p(g, "norm2.b")?;
    let fc1_w = p(g, "fc1.w")?;
    let fc1_b = p(g, "fc1.b")?;
    let fc2_w = p(g, "fc2.w")?;
    let fc2_b = p(g, "fc2.b")?;

    let site = cfg.rope.as_ref().map(|r| r.apply_site);
    let d = cfg.d_model;
    let dh = cfg.head_dim();

    let mut h = g.layer_norm(x, n1g, n1b, cfg.ln_eps)?;
    if let (Some(r), Some(ApplySite::PostFirstNorm)) = (rot, site) {
        h = g.rope(h, r.clone())?;
    }
    let qkv = g.linear(h, qkv_w, qkv_b)?;
    let mut q_all = g.slice_cols(qkv, 0, d)?;
    let mut k_all = g.slice_cols(qkv, d, d)?;
    let v_all = g.slice_cols(qkv, 2 * d, d)?;
    if let (Some(r), Some(ApplySite::AttentionQk)) = (rot, site) {
        q_all = g.rope(q_all, r.clone())?;
        k_all = g.rope(k_all, r.clone())?;
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hi in 0..cfg.n_heads {
        let q = g.slice_cols(q_all, hi * dh, dh)?;
        let k = g.slice_cols(k_all, hi * dh, dh)?;
        let v = g.slice_cols(v_all, hi * dh, dh)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows(s)?;
        heads.push(g.matmul(a, v)?);
    }
    let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn = g.linear(attn, proj_w, proj_b)?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, n2g, n2b, cfg.ln_eps)?;
    let h = g.linear(h, fc1_w, fc1_b)?;
    let h = g.gelu(h)?;
    let h = g.linear(h, fc2_w, fc2_b)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            depth: 4,
            d_model: 16,
            n_heads: 2,
            mlp_ratio: 2.0,
            patch_size: [2, 4, 4],
            decoder_blocks: 1,
            rope: Some(RopeConfig::new(16)),
            learned_pos: false,
            input: [4, 8, 8],
            ln_eps: 1e-6,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.decoder_blocks = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.input = [4, 8, 9];
        assert!(c.validate().is_err());
    }

    #[test]
    fn block_numbers() {
        assert_eq!(block_number("blocks.0.qkv.w"), Some(1));
        assert_eq!(block_number("blocks.11.fc2.b"), Some(12));
        assert_eq!(block_number("pred.blocks.0.qkv.w"), None);
        assert_eq!(block_number("embed.w"), None);
    }

    #[test]
    fn decoding_token_properties() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let toks = bb.decoding_tokens();
        let u = 1.0 / 4.0;
        assert!(toks.row(0).iter().all(|&v| v == u));
        for r in 0..toks.rows() {
            let n: f64 = toks.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_decodes() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = bb.init_params(&mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, |_| true);
        let lat = g.constant(bb.decoding_tokens().clone()).unwrap();
        let ctx = g.constant(Tensor::zeros(&[0, 16])).unwrap();
        let pos = grid_positions(bb.cfg().grid());
        let out = bb.decode(&mut g, &mut b, ctx, &[], lat, &pos).unwrap();
        assert_eq!(g.value(out).shape(), &[8, 16]);
    }

    #[test]
    fn zero_head_predicts_zero() {
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = bb.init_params(&mut rng);
        assert!(bb.ensure_head(&mut store, Target::Layer(2)));
        assert!(!bb.ensure_head(&mut store, Target::Layer(2)));
        let mut g = Graph::new();
        let mut b = Binder::new(&store, |_| true);
        let x = g.constant(Tensor::zeros(&[8, 16])).unwrap();
        for t in [Target::Pixels, Target::Layer(2)] {
            let y = bb.predict(&mut g, &mut b, x, t).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
            assert_eq!(g.value(y).cols(), bb.head_width(t));
        }
    }
}
