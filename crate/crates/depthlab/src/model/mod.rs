//! Pre-LN decoder-only transformer with RoPE, RMSNorm, SwiGLU, grouped-query
//! attention, and an optional top-k mixture-of-experts FFN.
//!
//! A "layer" is the full decoder block (attention sublayer then FFN sublayer,
//! each with its own residual). All layer-effectiveness machinery operates on
//! these blocks.

mod forward;

pub use forward::{
    block_jacobian, forward, loss, loss_and_grads, skip_layer_forward,
    replace_layer_linear_forward, BlockOverride, ForwardTrace, LayerTrace, LossParts,
    RoutingTrace, TokenBatch, TraceOptions,
};

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::rng::Rng;
use crate::tensor::{KernelError, Tensor};

/// Epsilon inside every RMSNorm.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
pub enum ModelError {
    InvalidConfig { field: &'static str, reason: String },
    TokenOutOfRange { token: u32, vocab: usize },
    SequenceTooLong { len: usize, max: usize },
    SequenceTooShort { len: usize },
    LayerOutOfRange { layer: usize, depth: usize },
    BatchShape { reason: String },
    Kernel(KernelError),
    Io(std::io::Error),
    BadCheckpoint { reason: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig { field, reason } => write!(f, "invalid config field {field}: {reason}"),
            Self::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocab {vocab}")
            }
            Self::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            Self::SequenceTooShort { len } => {
                write!(f, "sequence length {len} yields no prediction targets")
            }
            Self::LayerOutOfRange { layer, depth } => {
                write!(f, "layer index {layer} out of range for depth {depth}")
            }
            Self::BatchShape { reason } => write!(f, "bad token batch: {reason}"),
            Self::Kernel(e) => write!(f, "kernel error: {e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::BadCheckpoint { reason } => write!(f, "bad checkpoint: {reason}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<KernelError> for ModelError {
    fn from(e: KernelError) -> Self {
        Self::Kernel(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Mixture-of-experts settings. `mlp_hidden` from the parent config is the
/// per-expert hidden width.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub lb_coeff: f64,
    pub z_coeff: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self { n_experts: 4, top_k: 2, n_shared: 0, lb_coeff: 0.01, z_coeff: 0.001 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub moe: Option<MoeConfig>,
    pub init_std: f64,
    pub rope_base: f64,
}

impl ModelConfig {
    /// Small dense default used by tests and presets.
    pub fn small(depth: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            depth,
            d_model,
            n_query_heads: n_heads,
            n_kv_heads: n_heads,
            mlp_hidden: 2 * d_model,
            vocab_size: 257,
            max_seq_len: 128,
            moe: None,
            init_std: 0.02,
            rope_base: 10_000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_query_heads
    }

    /// Query heads per shared K/V head (G = H / n_kv_heads). G = 1 is MHA,
    /// G = H is MQA.
    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &'static str, reason: String| Err(ModelError::InvalidConfig { field, reason });
        if self.depth == 0 {
            return bad("depth", "must be positive".into());
        }
        if self.d_model == 0 {
            return bad("d_model", "must be positive".into());
        }
        if self.n_query_heads == 0 {
            return bad("n_query_heads", "must be positive".into());
        }
        if self.n_kv_heads == 0 || self.n_query_heads % self.n_kv_heads != 0 {
            return bad(
                "n_kv_heads",
                format!("{} must divide n_query_heads {}", self.n_kv_heads, self.n_query_heads),
            );
        }
        if self.d_model % self.n_query_heads != 0 {
            return bad(
                "d_model",
                format!("{} must be divisible by n_query_heads {}", self.d_model, self.n_query_heads),
            );
        }
        if self.head_dim() % 2 != 0 {
            return bad(
                "n_query_heads",
                format!("head dim {} must be even for rotary embedding", self.head_dim()),
            );
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden", "must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be positive".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len", "must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std", format!("must be finite and non-negative, got {}", self.init_std));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad("rope_base", format!("must be positive, got {}", self.rope_base));
        }
        if let Some(moe) = &self.moe {
            if moe.n_experts == 0 {
                return bad("moe.n_experts", "must be positive".into());
            }
            if moe.top_k == 0 || moe.top_k > moe.n_experts {
                return bad(
                    "moe.top_k",
                    format!("{} must be in 1..={}", moe.top_k, moe.n_experts),
                );
            }
        }
        Ok(())
    }

    /// Flat key/value lines (`model.depth = 4`) used in config snapshots and
    /// checkpoint headers.
    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model.depth = {}\n", self.depth));
        s.push_str(&format!("model.d_model = {}\n", self.d_model));
        s.push_str(&format!("model.n_query_heads = {}\n", self.n_query_heads));
        s.push_str(&format!("model.n_kv_heads = {}\n", self.n_kv_heads));
        s.push_str(&format!("model.mlp_hidden = {}\n", self.mlp_hidden));
        s.push_str(&format!("model.vocab_size = {}\n", self.vocab_size));
        s.push_str(&format!("model.max_seq_len = {}\n", self.max_seq_len));
        s.push_str(&format!("model.init_std = {}\n", self.init_std));
        s.push_str(&format!("model.rope_base = {}\n", self.rope_base));
        if let Some(moe) = &self.moe {
            s.push_str(&format!("model.moe.n_experts = {}\n", moe.n_experts));
            s.push_str(&format!("model.moe.top_k = {}\n", moe.top_k));
            s.push_str(&format!("model.moe.n_shared = {}\n", moe.n_shared));
            s.push_str(&format!("model.moe.lb_coeff = {}\n", moe.lb_coeff));
            s.push_str(&format!("model.moe.z_coeff = {}\n", moe.z_coeff));
        }
        s
    }
}

/// SwiGLU feed-forward weights: gate and up projections, then down.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeWeights {
    pub router: Tensor,
    pub experts: Vec<FfnWeights>,
    pub shared: Vec<FfnWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnParams {
    Dense(FfnWeights),
    Moe(MoeWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_gain: Tensor,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub unembed: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn ffn_weights(rng: &mut Rng, d: usize, hidden: usize, std: f64) -> Result<FfnWeights, KernelError> {
    Ok(FfnWeights {
        w_gate: rng.gaussian(vec![d, hidden], 0.0, std)?,
        w_up: rng.gaussian(vec![d, hidden], 0.0, std)?,
        w_down: rng.gaussian(vec![hidden, d], 0.0, std)?,
    })
}

/// Build a model with Gaussian(0, init_std) projections and unit norm gains,
/// deterministically from the given stream.
pub fn build_model(config: &ModelConfig, rng: &mut Rng) -> Result<Model, ModelError> {
    config.validate()?;
    let d = config.d_model;
    let kv_dim = config.n_kv_heads * config.head_dim();
    let std = config.init_std;
    let embed = rng.gaussian(vec![config.vocab_size, d], 0.0, std)?;
    let mut layers = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let attn_gain = Tensor::filled(vec![d], 1.0);
        let wq = rng.gaussian(vec![d, d], 0.0, std)?;
        let wk = rng.gaussian(vec![d, kv_dim], 0.0, std)?;
        let wv = rng.gaussian(vec![d, kv_dim], 0.0, std)?;
        let wo = rng.gaussian(vec![d, d], 0.0, std)?;
        let ffn_gain = Tensor::filled(vec![d], 1.0);
        let ffn = match &config.moe {
            None => FfnParams::Dense(ffn_weights(rng, d, config.mlp_hidden, std)?),
            Some(moe) => {
                let router = rng.gaussian(vec![d, moe.n_experts], 0.0, std)?;
                let experts = (0..moe.n_experts)
                    .map(|_| ffn_weights(rng, d, config.mlp_hidden, std))
                    .collect::<Result<Vec<_>, _>>()?;
                let shared = (0..moe.n_shared)
                    .map(|_| ffn_weights(rng, d, config.mlp_hidden, std))
                    .collect::<Result<Vec<_>, _>>()?;
                FfnParams::Moe(MoeWeights { router, experts, shared })
            }
        };
        layers.push(LayerParams { attn_gain, wq, wk, wv, wo, ffn_gain, ffn });
    }
    let final_gain = Tensor::filled(vec![d], 1.0);
    let unembed = rng.gaussian(vec![d, config.vocab_size], 0.0, std)?;
    Ok(Model {
        config: config.clone(),
        params: Params { embed, layers, final_gain, unembed },
    })
}

impl Model {
    /// Visit every parameter in a fixed order. The order defines optimizer
    /// state layout and checkpoint layout.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("embed", &self.params.embed);
        for (l, layer) in self.params.layers.iter().enumerate() {
            f(&format!("layer{l}.attn_gain"), &layer.attn_gain);
            f(&format!("layer{l}.wq"), &layer.wq);
            f(&format!("layer{l}.wk"), &layer.wk);
            f(&format!("layer{l}.wv"), &layer.wv);
            f(&format!("layer{l}.wo"), &layer.wo);
            f(&format!("layer{l}.ffn_gain"), &layer.ffn_gain);
            match &layer.ffn {
                FfnParams::Dense(w) => {
                    f(&format!("layer{l}.ffn.w_gate"), &w.w_gate);
                    f(&format!("layer{l}.ffn.w_up"), &w.w_up);
                    f(&format!("layer{l}.ffn.w_down"), &w.w_down);
                }
                FfnParams::Moe(m) => {
                    f(&format!("layer{l}.router"), &m.router);
                    for (e, w) in m.experts.iter().enumerate() {
                        f(&format!("layer{l}.expert{e}.w_gate"), &w.w_gate);
                        f(&format!("layer{l}.expert{e}.w_up"), &w.w_up);
                        f(&format!("layer{l}.expert{e}.w_down"), &w.w_down);
                    }
                    for (s, w) in m.shared.iter().enumerate() {
                        f(&format!("layer{l}.shared{s}.w_gate"), &w.w_gate);
                        f(&format!("layer{l}.shared{s}.w_up"), &w.w_up);
                        f(&format!("layer{l}.shared{s}.w_down"), &w.w_down);
                    }
                }
            }
        }
        f("final_gain", &self.params.final_gain);
        f("unembed", &self.params.unembed);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("embed", &mut self.params.embed);
        for (l, layer) in self.params.layers.iter_mut().enumerate() {
            f(&format!("layer{l}.attn_gain"), &mut layer.attn_gain);
            f(&format!("layer{l}.wq"), &mut layer.wq);
            f(&format!("layer{l}.wk"), &mut layer.wk);
            f(&format!("layer{l}.wv"), &mut layer.wv);
            f(&format!("layer{l}.wo"), &mut layer.wo);
            f(&format!("layer{l}.ffn_gain"), &mut layer.ffn_gain);
            match &mut layer.ffn {
                FfnParams::Dense(w) => {
                    f(&format!("layer{l}.ffn.w_gate"), &mut w.w_gate);
                    f(&format!("layer{l}.ffn.w_up"), &mut w.w_up);
                    f(&format!("layer{l}.ffn.w_down"), &mut w.w_down);
                }
                FfnParams::Moe(m) => {
                    f(&format!("layer{l}.router"), &mut m.router);
                    for (e, w) in m.experts.iter_mut().enumerate() {
                        f(&format!("layer{l}.expert{e}.w_gate"), &mut w.w_gate);
                        f(&format!("layer{l}.expert{e}.w_up"), &mut w.w_up);
                        f(&format!("layer{l}.expert{e}.w_down"), &mut w.w_down);
                    }
                    for (s, w) in m.shared.iter_mut().enumerate() {
                        f(&format!("layer{l}.shared{s}.w_gate"), &mut w.w_gate);
                        f(&format!("layer{l}.shared{s}.w_up"), &mut w.w_up);
                        f(&format!("layer{l}.shared{s}.w_down"), &mut w.w_down);
                    }
                }
            }
        }
        f("final_gain", &mut self.params.final_gain);
        f("unembed", &mut self.params.unembed);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    /// Norm gains are exempt from weight decay; nothing else is.
    pub fn decay_exempt(name: &str) -> bool {
        name.ends_with("gain")
    }

    /// New model with the full parameter sets of two blocks exchanged.
    pub fn swap_layers(&self, l1: usize, l2: usize) -> Result<Model, ModelError> {
        let depth = self.config.depth;
        if l1 >= depth || l2 >= depth {
            return Err(ModelError::LayerOutOfRange { layer: l1.max(l2), depth });
        }
        let mut out = self.clone();
        out.params.layers.swap(l1, l2);
        Ok(out)
    }

    /// Serialize config plus all named parameters (little-endian f64).
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"DLABCKPT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let cfg = self.config.to_flat();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
        let mut count = 0u32;
        self.for_each_param(|_, _| count += 1);
        buf.extend_from_slice(&count.to_le_bytes());
        self.for_each_param(|name, t| {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        });
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Load a checkpoint, validating every tensor shape against the config.
    pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *pos + n > bytes.len() {
                return Err(ModelError::BadCheckpoint { reason: "truncated".into() });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != b"DLABCKPT" {
            return Err(ModelError::BadCheckpoint { reason: "bad magic".into() });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(ModelError::BadCheckpoint { reason: format!("unsupported version {version}") });
        }
        let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
            .map_err(|_| ModelError::BadCheckpoint { reason: "config not utf-8".into() })?
            .to_string();
        let config = config_from_flat(&cfg_text)?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| ModelError::BadCheckpoint { reason: "name not utf-8".into() })?
                .to_string();
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| ModelError::BadCheckpoint { reason: format!("tensor {name}: {e}") })?;
            tensors.push((name, t));
        }
        if pos != bytes.len() {
            return Err(ModelError::BadCheckpoint { reason: "trailing bytes".into() });
        }
        // Build a skeleton with the right shapes, then fill by name.
        let mut rng = Rng::new(0);
        let mut model = build_model(&config, &mut rng)?;
        let mut idx = 0usize;
        let mut err: Option<ModelError> = None;
        model.for_each_param_mut(|name, slot| {
            if err.is_some() {
                return;
            }
            match tensors.get(idx) {
                Some((got_name, t)) if got_name == name => {
                    if t.shape() != slot.shape() {
                        err = Some(ModelError::BadCheckpoint {
                            reason: format!(
                                "tensor {name}: shape {:?} does not match config shape {:?}",
                                t.shape(),
                                slot.shape()
                            ),
                        });
                    } else {
                        *slot = t.clone();
                    }
                }
                Some((got_name, _)) => {
                    err = Some(ModelError::BadCheckpoint {
                        reason: format!("expected tensor {name}, found {got_name}"),
                    });
                }
                None => {
                    err = Some(ModelError::BadCheckpoint {
                        reason: format!("missing tensor {name}"),
                    });
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != tensors.len() {
            return Err(ModelError::BadCheckpoint {
                reason: format!("checkpoint has {} extra tensors", tensors.len() - idx),
            });
        }
        Ok(model)
    }
}

/// Parse the `model.*` keys of a flat config block (checkpoint header).
pub fn config_from_flat(text: &str) -> Result<ModelConfig, ModelError> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ModelError::BadCheckpoint { reason: format!("bad config line: {line}") });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get_usize = |key: &str| -> Result<usize, ModelError> {
        map.get(key)
            .ok_or_else(|| ModelError::BadCheckpoint { reason: format!("missing {key}") })?
            .parse()
            .map_err(|_| ModelError::BadCheckpoint { reason: format!("bad integer for {key}") })
    };
    let get_f64 = |key: &str| -> Result<f64, ModelError> {
        map.get(key)
            .ok_or_else(|| ModelError::BadCheckpoint { reason: format!("missing {key}") })?
            .parse()
            .map_err(|_| ModelError::BadCheckpoint { reason: format!("bad number for {key}") })
    };
    let moe = if map.contains_key("model.moe.n_experts") {
        Some(MoeConfig {
            n_experts: get_usize("model.moe.n_experts")?,
            top_k: get_usize("model.moe.top_k")?,
            n_shared: get_usize("model.moe.n_shared")?,
            lb_coeff: get_f64("model.moe.lb_coeff")?,
            z_coeff: get_f64("model.moe.z_coeff")?,
        })
    } else {
        None
    };
    let config = ModelConfig {
        depth: get_usize("model.depth")?,
        d_model: get_usize("model.d_model")?,
        n_query_heads: get_usize("model.n_query_heads")?,
        n_kv_heads: get_usize("model.n_kv_heads")?,
        mlp_hidden: get_usize("model.mlp_hidden")?,
        vocab_size: get_usize("model.vocab_size")?,
        max_seq_len: get_usize("model.max_seq_len")?,
        moe,
        init_std: get_f64("model.init_std")?,
        rope_base: get_f64("model.rope_base")?,
    };
    config.validate()?;
    Ok(config)
}
