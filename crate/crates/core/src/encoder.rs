//! The video vision encoder: patch embedding, a stack of transformer blocks
//! with per-frame spatial attention and per-patch temporal attention, and a
//! projector plus pooled classification/embedding heads.
//!
//! The temporal sub-block is the interesting part: each patch position
//! attends across frames with its own (smaller) head count, rotary frame
//! encoding, and an output projection that is zero-initialized at the start
//! of adaptation so the stack initially behaves like the spatial-only model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::rope::{tiled_angles_1d, tiled_angles_2d, RotaryTable};
use crate::tape::{AttentionGroups, NodeId, RopeAngles, Tape};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalOrder {
    SpatialFirst,
    TemporalFirst,
}

/// Which blocks carry a temporal attention sub-block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    All,
    FirstHalf,
    UniformHalf,
    None,
    #[serde(untagged)]
    Indices(Vec<usize>),
}

impl Placement {
    pub fn block_indices(&self, blocks: usize) -> Vec<usize> {
        match self {
            Placement::All => (0..blocks).collect(),
            Placement::FirstHalf => (0..blocks / 2).collect(),
            Placement::UniformHalf => (0..blocks).step_by(2).collect(),
            Placement::None => Vec::new(),
            Placement::Indices(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_spatial_heads")]
    pub spatial_heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    /// Ratio of temporal to spatial head count at fixed head dimension.
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    #[serde(default = "default_order")]
    pub temporal_order: TemporalOrder,
    #[serde(default = "default_placement")]
    pub sta_placement: Placement,
    #[serde(default = "default_true")]
    pub temporal_enabled: bool,
    #[serde(default = "default_embed")]
    pub projector_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_frames() -> usize {
    8
}
fn default_extent() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_patch() -> usize {
    8
}
fn default_embed() -> usize {
    64
}
fn default_blocks() -> usize {
    4
}
fn default_spatial_heads() -> usize {
    4
}
fn default_head_dim() -> usize {
    16
}
fn default_head_scale() -> f64 {
    0.25
}
fn default_order() -> TemporalOrder {
    TemporalOrder::SpatialFirst
}
fn default_placement() -> Placement {
    Placement::All
}
fn default_true() -> bool {
    true
}
fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

impl Default for EncoderConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |cond: bool, msg: String| if cond { Ok(()) } else { Err(Error::Config(msg)) };
        c(self.frames >= 1, format!("frames must be >= 1, got {}", self.frames))?;
        c(self.channels >= 1, format!("channels must be >= 1, got {}", self.channels))?;
        c(self.patch_size >= 1, "patch_size must be >= 1".into())?;
        c(
            self.height % self.patch_size == 0 && self.width % self.patch_size == 0,
            format!(
                "frame extent {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ),
        )?;
        c(
            self.embed_dim == self.spatial_heads * self.head_dim,
            format!(
                "embed_dim {} must equal spatial_heads {} * head_dim {}",
                self.embed_dim, self.spatial_heads, self.head_dim
            ),
        )?;
        c(
            self.head_dim % 4 == 0,
            format!("head_dim must be divisible by 4, got {}", self.head_dim),
        )?;
        c(
            [1.0, 0.5, 0.25].contains(&self.head_scale),
            format!("head_scale must be one of 1.0, 0.5, 0.25, got {}", self.head_scale),
        )?;
        c(
            self.temporal_dim() <= self.embed_dim,
            format!(
                "temporal width {} exceeds embed_dim {}",
                self.temporal_dim(),
                self.embed_dim
            ),
        )?;
        if let Placement::Indices(v) = &self.sta_placement {
            if let Some(bad) = v.iter().find(|i| **i >= self.blocks) {
                return Err(Error::Config(format!(
                    "sta_placement index {bad} out of range for {} blocks",
                    self.blocks
                )));
            }
        }
        c(self.projector_dim >= 1, "projector_dim must be >= 1".into())?;
        Ok(())
    }

    /// N = H*W / P^2.
    pub fn n_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.n_patches()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// h_t = max(1, round(s * h_s)).
    pub fn temporal_heads(&self) -> usize {
        ((self.head_scale * self.spatial_heads as f64).round() as usize).max(1)
    }

    /// d_t = h_t * head_dim.
    pub fn temporal_dim(&self) -> usize {
        self.temporal_heads() * self.head_dim
    }

    pub fn temporal_blocks(&self) -> Vec<usize> {
        self.sta_placement.block_indices(self.blocks)
    }

    pub fn has_temporal_block(&self, m: usize) -> bool {
        self.temporal_blocks().contains(&m)
    }
}

/// Attention maps recorded during a traced forward pass: one matrix per
/// group, already averaged over heads.
pub struct AttentionMaps {
    pub block: usize,
    /// Per frame: N x N attention over patches.
    pub spatial: Vec<Tensor>,
    /// Per patch: T x T attention over frames; empty when the block has no
    /// temporal sub-block or temporal attention is disabled.
    pub temporal: Vec<Tensor>,
}

/// Encoder weights plus attached low-rank adapters.
pub struct Model {
    pub config: EncoderConfig,
    pub classes: usize,
    pub params: ParamStore,
    pub adapters: Vec<LoraAdapter>,
    rope_spatial: Arc<RopeAngles>,
    rope_temporal: Arc<RopeAngles>,
    spatial_groups: Arc<AttentionGroups>,
    temporal_groups: Arc<AttentionGroups>,
}

impl Model {
    /// Fresh model with scaled-uniform projection weights. All weights are
    /// random, including the temporal output projections; stage-1 adaptation
    /// zeroes those before training.
    pub fn new(config: EncoderConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let mut rng = SeededRng::derive(seed, "init");
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let d_t = config.temporal_dim();

        let mut xavier = |store: &mut ParamStore, path: String, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let t = Tensor::from_fn(&[rows, cols], |_| rng.uniform(-limit, limit));
            store.insert(path, t);
        };
        let layer_norm = |store: &mut ParamStore, prefix: &str, width: usize| {
            store.insert(format!("{prefix}.gain"), Tensor::full(&[width], 1.0));
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
        };

        xavier(&mut params, "embed.weight".into(), config.patch_pixels(), d);
        params.insert("embed.bias", Tensor::zeros(&[d]));

        for m in 0..config.blocks {
            layer_norm(&mut params, &format!("blocks.{m}.spatial.ln"), d);
            for name in ["wq", "wk", "wv"] {
                xavier(&mut params, format!("blocks.{m}.spatial.{name}"), d, d);
            }
            xavier(&mut params, format!("blocks.{m}.spatial.wo"), d, d);
            if config.has_temporal_block(m) {
                layer_norm(&mut params, &format!("blocks.{m}.temporal.ln"), d);
                for name in ["wq", "wk", "wv"] {
                    xavier(&mut params, format!("blocks.{m}.temporal.{name}"), d, d_t);
                }
                xavier(&mut params, format!("blocks.{m}.temporal.wo"), d_t, d);
            }
            layer_norm(&mut params, &format!("blocks.{m}.mlp.ln"), d);
            xavier(&mut params, format!("blocks.{m}.mlp.fc1.weight"), d, 4 * d);
            params.insert(format!("blocks.{m}.mlp.fc1.bias"), Tensor::zeros(&[4 * d]));
            xavier(&mut params, format!("blocks.{m}.mlp.fc2.weight"), 4 * d, d);
            params.insert(format!("blocks.{m}.mlp.fc2.bias"), Tensor::zeros(&[d]));
        }

        xavier(&mut params, "projector.weight".into(), d, config.projector_dim);
        params.insert("projector.bias", Tensor::zeros(&[config.projector_dim]));
        xavier(&mut params, "head.weight".into(), config.projector_dim, classes);
        params.insert("head.bias", Tensor::zeros(&[classes]));

        Self::assemble(config, classes, params)
    }

    /// Builds the derived attention layout for an existing parameter store
    /// (used both by `new` and by checkpoint loading).
    pub fn assemble(config: EncoderConfig, classes: usize, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let t = config.frames;
        let n = config.n_patches();
        let (_, grid_w) = config.grid();

        // spatial groups: one group per frame, rows are contiguous
        let spatial_index: Vec<usize> = (0..t * n).collect();
        // temporal groups: one group per patch position, strided rows
        let mut temporal_index = Vec::with_capacity(t * n);
        for i in 0..n {
            for f in 0..t {
                temporal_index.push(f * n + i);
            }
        }

        let spatial_table = RotaryTable::new(config.rope_base, config.head_dim / 2, grid_w.max(config.height / config.patch_size))?;
        let temporal_table = RotaryTable::new(config.rope_base, config.head_dim, t)?;

        let mut row_pos = Vec::with_capacity(t * n);
        let mut col_pos = Vec::with_capacity(t * n);
        let mut frame_pos = Vec::with_capacity(t * n);
        for f in 0..t {
            for i in 0..n {
                row_pos.push(i / grid_w);
                col_pos.push(i % grid_w);
                frame_pos.push(f);
            }
        }
        let rope_spatial = tiled_angles_2d(&spatial_table, &row_pos, &col_pos, config.spatial_heads)?;
        let rope_temporal = tiled_angles_1d(&temporal_table, &frame_pos, config.temporal_heads())?;

        Ok(Model {
            config,
            classes,
            params,
            adapters: Vec::new(),
            rope_spatial,
            rope_temporal,
            spatial_groups: Arc::new(AttentionGroups {
                group_size: n,
                index: spatial_index,
            }),
            temporal_groups: Arc::new(AttentionGroups {
                group_size: t,
                index: temporal_index,
            }),
        })
    }

    fn adapter_for(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Linear map through a named weight, adding the low-rank path when an
    /// adapter targets it.
    fn linear(&self, tape: &mut Tape, x: NodeId, weight: &str) -> Result<NodeId> {
        let w = tape.param(&self.params, self.params.id(weight)?);
        let base = tape.matmul(x, w)?;
        if let Some(adapter) = self.adapter_for(weight) {
            let a = tape.param(&self.params, self.params.id(&adapter.a_path())?);
            let b = tape.param(&self.params, self.params.id(&adapter.b_path())?);
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let delta = tape.scale(xab, adapter.scaling());
            return tape.add(base, delta);
        }
        Ok(base)
    }

    fn linear_bias(&self, tape: &mut Tape, x: NodeId, weight: &str, bias: &str) -> Result<NodeId> {
        let y = self.linear(tape, x, weight)?;
        let b = tape.param(&self.params, self.params.id(bias)?);
        tape.add_row(y, b)
    }

    fn pre_norm(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = tape.param(&self.params, self.params.id(&format!("{prefix}.gain"))?);
        let bias = tape.param(&self.params, self.params.id(&format!("{prefix}.bias"))?);
        tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    /// Per-frame multi-head attention over patches with 2-D rotary q/k,
    /// residual added; frames never attend to each other.
    pub fn spatial_attention(
        &self,
        tape: &mut Tape,
        x: NodeId,
        m: usize,
        trace: Option<&mut TraceRequest>,
    ) -> Result<NodeId> {
        let p = format!("blocks.{m}.spatial");
        let xn = self.pre_norm(tape, x, &format!("{p}.ln"))?;
        let q = self.linear(tape, xn, &format!("{p}.wq"))?;
        let k = self.linear(tape, xn, &format!("{p}.wk"))?;
        let v = self.linear(tape, xn, &format!("{p}.wv"))?;
        let q = tape.rope(q, self.rope_spatial.clone())?;
        let k = tape.rope(k, self.rope_spatial.clone())?;
        let att = tape.attention(q, k, v, self.spatial_groups.clone(), self.config.spatial_heads)?;
        if let Some(req) = trace {
            if req.block == m {
                req.spatial = Some(att);
            }
        }
        let out = self.linear(tape, att, &format!("{p}.wo"))?;
        tape.add(x, out)
    }

    /// Per-patch multi-head attention over frames with 1-D rotary q/k,
    /// output-projected and residual-added; patch positions never mix.
    pub fn temporal_attention(
        &self,
        tape: &mut Tape,
        x: NodeId,
        m: usize,
        trace: Option<&mut TraceRequest>,
    ) -> Result<NodeId> {
        let p = format!("blocks.{m}.temporal");
        let xn = self.pre_norm(tape, x, &format!("{p}.ln"))?;
        let q = self.linear(tape, xn, &format!("{p}.wq"))?;
        let k = self.linear(tape, xn, &format!("{p}.wk"))?;
        let v = self.linear(tape, xn, &format!("{p}.wv"))?;
        let q = tape.rope(q, self.rope_temporal.clone())?;
        let k = tape.rope(k, self.rope_temporal.clone())?;
        let att = tape.attention(
            q,
            k,
            v,
            self.temporal_groups.clone(),
            self.config.temporal_heads(),
        )?;
        if let Some(req) = trace {
            if req.block == m {
                req.temporal = Some(att);
            }
        }
        let out = self.linear(tape, att, &format!("{p}.wo"))?;
        tape.add(x, out)
    }

    pub fn mlp(&self, tape: &mut Tape, x: NodeId, m: usize) -> Result<NodeId> {
        let p = format!("blocks.{m}.mlp");
        let xn = self.pre_norm(tape, x, &format!("{p}.ln"))?;
        let h = self.linear_bias(tape, xn, &format!("{p}.fc1.weight"), &format!("{p}.fc1.bias"))?;
        let h = tape.gelu(h);
        let out = self.linear_bias(tape, h, &format!("{p}.fc2.weight"), &format!("{p}.fc2.bias"))?;
        tape.add(x, out)
    }

    /// One transformer block: attention sub-blocks in configured order, then MLP.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        m: usize,
        mut trace: Option<&mut TraceRequest>,
    ) -> Result<NodeId> {
        let temporal_active = self.config.temporal_enabled && self.config.has_temporal_block(m);
        let mut x = x;
        match self.config.temporal_order {
            TemporalOrder::SpatialFirst => {
                x = self.spatial_attention(tape, x, m, trace.as_deref_mut())?;
                if temporal_active {
                    x = self.temporal_attention(tape, x, m, trace.as_deref_mut())?;
                }
            }
            TemporalOrder::TemporalFirst => {
                if temporal_active {
                    x = self.temporal_attention(tape, x, m, trace.as_deref_mut())?;
                }
                x = self.spatial_attention(tape, x, m, trace.as_deref_mut())?;
            }
        }
        self.mlp(tape, x, m)
    }

    /// Flattened token matrix (T*N) x D on the tape.
    pub fn patchify_tape(&self, tape: &mut Tape, clip: &Tensor) -> Result<NodeId> {
        let pm = patch_matrix(clip, &self.config)?;
        let x = tape.input(pm);
        self.linear_bias(tape, x, "embed.weight", "embed.bias")
    }

    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        clip: &Tensor,
        mut trace: Option<&mut TraceRequest>,
    ) -> Result<NodeId> {
        let mut x = self.patchify_tape(tape, clip)?;
        for m in 0..self.config.blocks {
            x = self.block_forward(tape, x, m, trace.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Final token representation, shaped [T, N, D].
    pub fn encode(&self, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = self.encode_tape(&mut tape, clip, None)?;
        let t = tape.value(x).clone();
        t.reshape(&[self.config.frames, self.config.n_patches(), self.config.embed_dim])
    }

    /// Tokenwise affine map into the projector space.
    pub fn project_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.linear_bias(tape, x, "projector.weight", "projector.bias")
    }

    /// Mean pool over all tokens of the projected representation: 1 x D_out.
    pub fn pooled_tape(&self, tape: &mut Tape, clip: &Tensor) -> Result<NodeId> {
        let x = self.encode_tape(tape, clip, None)?;
        let proj = self.project_tape(tape, x)?;
        Ok(tape.mean_rows(proj))
    }

    /// Class logits for one clip: 1 x classes.
    pub fn logits_tape(&self, tape: &mut Tape, clip: &Tensor) -> Result<NodeId> {
        let pooled = self.pooled_tape(tape, clip)?;
        self.linear_bias(tape, pooled, "head.weight", "head.bias")
    }

    pub fn class_logits(&self, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let node = self.logits_tape(&mut tape, clip)?;
        Ok(tape.value(node).clone())
    }

    /// L2-normalized pooled projector output, shape [D_out].
    pub fn clip_embedding(&self, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pooled = self.pooled_tape(&mut tape, clip)?;
        let mut emb = tape.value(pooled).clone().reshape(&[self.config.projector_dim])?;
        let norm = emb.norm();
        if norm > 0.0 {
            for v in emb.data_mut() {
                *v /= norm;
            }
        }
        Ok(emb)
    }

    /// Forward pass that also captures the attention weights of one block.
    pub fn encode_with_attention(&self, clip: &Tensor, block: usize) -> Result<(Tensor, AttentionMaps)> {
        if block >= self.config.blocks {
            return Err(Error::Config(format!(
                "block index {block} out of range for {} blocks",
                self.config.blocks
            )));
        }
        let mut req = TraceRequest {
            block,
            spatial: None,
            temporal: None,
        };
        let mut tape = Tape::new();
        let x = self.encode_tape(&mut tape, clip, Some(&mut req))?;
        let tokens = tape.value(x).clone().reshape(&[
            self.config.frames,
            self.config.n_patches(),
            self.config.embed_dim,
        ])?;
        let spatial = req
            .spatial
            .and_then(|n| tape.attention_probs_mean(n))
            .unwrap_or_default();
        let temporal = req
            .temporal
            .and_then(|n| tape.attention_probs_mean(n))
            .unwrap_or_default();
        Ok((tokens, AttentionMaps { block, spatial, temporal }))
    }

    /// Exact parameter counts split by component.
    pub fn count_parameters(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for (path, p) in self.params.iter() {
            let n = p.value.numel();
            if path.starts_with("embed.") {
                counts.embed += n;
            } else if path.starts_with("projector.") {
                counts.projector += n;
            } else if path.starts_with("head.") {
                counts.head += n;
            } else if path.starts_with("lora.") {
                counts.lora += n;
            } else if path.contains(".ln.") {
                counts.layer_norm += n;
            } else if path.contains(".mlp.") {
                counts.mlp += n;
            } else if path.contains(".spatial.w") {
                counts.spatial_attention += n;
            } else if path.contains(".temporal.w") {
                counts.temporal_attention += n;
            }
        }
        let d = self.config.embed_dim;
        let d_t = self.config.temporal_dim();
        counts.per_block_spatial_attention = 4 * d * d;
        counts.per_block_temporal_attention = if self.config.temporal_blocks().is_empty() {
            0
        } else {
            3 * d * d_t + d_t * d
        };
        counts
    }
}

/// Attention-trace request for one block; filled in during the forward pass.
pub struct TraceRequest {
    pub block: usize,
    pub spatial: Option<NodeId>,
    pub temporal: Option<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embed: usize,
    pub spatial_attention: usize,
    pub temporal_attention: usize,
    pub mlp: usize,
    pub layer_norm: usize,
    pub projector: usize,
    pub head: usize,
    pub lora: usize,
    pub per_block_spatial_attention: usize,
    pub per_block_temporal_attention: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embed
            + self.spatial_attention
            + self.temporal_attention
            + self.mlp
            + self.layer_norm
            + self.projector
            + self.head
            + self.lora
    }

    /// Per-block temporal / spatial attention parameter ratio.
    pub fn temporal_spatial_ratio(&self) -> f64 {
        self.per_block_temporal_attention as f64 / self.per_block_spatial_attention as f64
    }
}

/// Gathers non-overlapping P x P patches into a (T*N) x (P*P*C) matrix.
/// Patch (t, r, c) lands at row t*N + r*(W/P) + c; pixels flatten row-major
/// as (pixel row, pixel col, channel).
pub fn patch_matrix(clip: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    let want = [config.frames, config.height, config.width, config.channels];
    if clip.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: clip.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    let (gh, gw) = config.grid();
    let p = config.patch_size;
    let (h, w, ch) = (config.height, config.width, config.channels);
    let cols = config.patch_pixels();
    let mut out = Tensor::zeros(&[config.tokens(), cols]);
    let src = clip.data();
    let dst = out.data_mut();
    for t in 0..config.frames {
        for gr in 0..gh {
            for gc in 0..gw {
                let row = t * gh * gw + gr * gw + gc;
                let base = row * cols;
                for pr in 0..p {
                    for pc in 0..p {
                        let pixel = ((t * h + gr * p + pr) * w + gc * p + pc) * ch;
                        let slot = base + (pr * p + pc) * ch;
                        dst[slot..slot + ch].copy_from_slice(&src[pixel..pixel + ch]);
                    }
                }
            }
        }
    }
    Ok(out)
}
