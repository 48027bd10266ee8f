//! Instantaneous diagnostics computed from a forward trace or parameter set:
//! variance, weight sparsity, attention sparsity, attention entropy, kurtosis,
//! Jacobian deviation. All probes are pure functions of immutable snapshots.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{block_jacobian, forward, Model, ModelError, TokenBatch, TraceOptions};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum ProbeError {
    Degenerate { what: String },
    Domain { what: &'static str, value: f64 },
    MissingCapture { what: &'static str },
    Model(ModelError),
}

impl fmt::Display for ProbeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Degenerate { what } => write!(f, "degenerate input: {what}"),
            Self::Domain { what, value } => write!(f, "{what} out of domain: {value}"),
            Self::MissingCapture { what } => write!(f, "trace does not capture {what}"),
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ProbeError {}

impl From<ModelError> for ProbeError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// Per-token variance across hidden dimensions, averaged over tokens:
/// (1/(n d)) sum_i sum_j (h_ij - mean_j h_i)^2.
pub fn hidden_variance(h: &Tensor) -> Result<f64, ProbeError> {
    let (n, d) = (h.rows(), h.cols());
    if d < 2 {
        return Err(ProbeError::Degenerate { what: format!("hidden width {d} < 2") });
    }
    let mut acc = 0.0;
    for i in 0..n {
        let row = h.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        acc += row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    Ok(acc / (n as f64 * d as f64))
}

/// hidden_variance of every block output y_0 .. y_{L-1}.
pub fn per_layer_variances(trace: &ForwardTrace) -> Result<Vec<f64>, ProbeError> {
    trace.layers.iter().map(|l| hidden_variance(&l.output)).collect()
}

/// hidden_variance of the attention and FFN branch outputs per layer.
pub fn branch_variances(trace: &ForwardTrace) -> Result<(Vec<f64>, Vec<f64>), ProbeError> {
    let attn = trace
        .layers
        .iter()
        .map(|l| hidden_variance(&l.attn_branch))
        .collect::<Result<Vec<_>, _>>()?;
    let mlp = trace
        .layers
        .iter()
        .map(|l| hidden_variance(&l.ffn_branch))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((attn, mlp))
}

/// Fraction of parameters with |w| < eps (strict), over every parameter
/// tensor including embeddings.
pub fn weight_sparsity(model: &Model, eps: f64) -> Result<f64, ProbeError> {
    if !(eps > 0.0) {
        return Err(ProbeError::Domain { what: "weight sparsity threshold", value: eps });
    }
    let mut below = 0usize;
    let mut total = 0usize;
    model.for_each_param(|_, t| {
        total += t.numel();
        below += t.data().iter().filter(|v| v.abs() < eps).count();
    });
    Ok(below as f64 / total as f64)
}

/// Which entries of an attention map count toward sparsity:
/// `Literal` counts all T^2 entries (causally masked zeros included),
/// `CausalSupport` counts only j <= i and normalizes by T(T+1)/2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparsityMode {
    Literal,
    CausalSupport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerHeadValue {
    pub layer: usize,
    pub head: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnSparsity {
    pub mode: SparsityMode,
    pub threshold: f64,
    pub per_head: Vec<PerHeadValue>,
    /// Mean over all layers and heads.
    pub global: f64,
}

fn map_sparsity(a: &Tensor, eps: f64, mode: SparsityMode) -> f64 {
    let t = a.rows();
    match mode {
        SparsityMode::Literal => {
            let below = a.data().iter().filter(|v| **v < eps).count();
            below as f64 / (t * t) as f64
        }
        SparsityMode::CausalSupport => {
            let mut below = 0usize;
            for i in 0..t {
                below += a.row(i)[..=i].iter().filter(|v| **v < eps).count();
            }
            below as f64 / (t * (t + 1) / 2) as f64
        }
    }
}

/// Per-(layer, head) fraction of attention weights below eps, averaged over
/// the batch sequences, plus the global mean over layers and heads.
pub fn attention_sparsity(
    trace: &ForwardTrace,
    eps: f64,
    mode: SparsityMode,
) -> Result<AttnSparsity, ProbeError> {
    if !(eps > 0.0) {
        return Err(ProbeError::Domain { what: "attention sparsity threshold", value: eps });
    }
    let mut per_head = Vec::new();
    let mut global_acc = 0.0;
    for (l, layer) in trace.layers.iter().enumerate() {
        let maps = layer
            .attn_maps
            .as_ref()
            .ok_or(ProbeError::MissingCapture { what: "attention maps" })?;
        let n_heads = maps.first().map_or(0, Vec::len);
        for h in 0..n_heads {
            let mut acc = 0.0;
            for seq_maps in maps {
                acc += map_sparsity(&seq_maps[h], eps, mode);
            }
            let value = acc / maps.len() as f64;
            global_acc += value;
            per_head.push(PerHeadValue { layer: l, head: h, value });
        }
    }
    if per_head.is_empty() {
        return Err(ProbeError::MissingCapture { what: "attention maps" });
    }
    let global = global_acc / per_head.len() as f64;
    Ok(AttnSparsity { mode, threshold: eps, per_head, global })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnEntropy {
    pub per_head: Vec<PerHeadValue>,
    /// Mean over all layers and heads.
    pub global: f64,
}

/// Per-query entropy of one attention map, -sum_j A_ij ln A_ij with
/// 0 ln 0 := 0, averaged over queries.
pub fn map_entropy(a: &Tensor) -> f64 {
    let t = a.rows();
    let mut acc = 0.0;
    for i in 0..t {
        let mut h = 0.0;
        for &v in a.row(i) {
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        acc += h;
    }
    acc / t as f64
}

/// Head-level attention entropy (mean over queries, then over batch
/// sequences), plus the global mean over layers and heads.
pub fn attention_entropy(trace: &ForwardTrace) -> Result<AttnEntropy, ProbeError> {
    let mut per_head = Vec::new();
    let mut global_acc = 0.0;
    for (l, layer) in trace.layers.iter().enumerate() {
        let maps = layer
            .attn_maps
            .as_ref()
            .ok_or(ProbeError::MissingCapture { what: "attention maps" })?;
        let n_heads = maps.first().map_or(0, Vec::len);
        for h in 0..n_heads {
            let mut acc = 0.0;
            for seq_maps in maps {
                acc += map_entropy(&seq_maps[h]);
            }
            let value = acc / maps.len() as f64;
            global_acc += value;
            per_head.push(PerHeadValue { layer: l, head: h, value });
        }
    }
    if per_head.is_empty() {
        return Err(ProbeError::MissingCapture { what: "attention maps" });
    }
    let global = global_acc / per_head.len() as f64;
    Ok(AttnEntropy { per_head, global })
}

/// Fourth standardized moment per hidden dimension over tokens, plus the
/// layer-level mean. Dimensions with second moment below 1e-12 are excluded
/// from the mean and listed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KurtosisReport {
    /// Per-dimension kurtosis; None marks an excluded degenerate dimension.
    pub per_dim: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    pub layer: f64,
}

const KURTOSIS_M2_FLOOR: f64 = 1e-12;

pub fn kurtosis(h: &Tensor) -> Result<KurtosisReport, ProbeError> {
    let (n, d) = (h.rows(), h.cols());
    if n < 2 {
        return Err(ProbeError::Degenerate { what: format!("kurtosis needs n >= 2, got {n}") });
    }
    let mut per_dim = Vec::with_capacity(d);
    let mut excluded = Vec::new();
    let mut acc = 0.0;
    let mut kept = 0usize;
    for j in 0..d {
        let mean = (0..n).map(|i| h.at(i, j)).sum::<f64>() / n as f64;
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        for i in 0..n {
            let c = h.at(i, j) - mean;
            let c2 = c * c;
            m2 += c2;
            m4 += c2 * c2;
        }
        m2 /= n as f64;
        m4 /= n as f64;
        if m2 < KURTOSIS_M2_FLOOR {
            excluded.push(j);
            per_dim.push(None);
        } else {
            let k = m4 / (m2 * m2);
            per_dim.push(Some(k));
            acc += k;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(ProbeError::Degenerate { what: "all dimensions degenerate".into() });
    }
    Ok(KurtosisReport { per_dim, excluded, layer: acc / kept as f64 })
}

/// Mean over probe sequences of ||J - I||_F for the block map at `layer`,
/// each Jacobian taken at `position` (default: final token).
pub fn jacobian_deviation(
    model: &Model,
    batch: &TokenBatch,
    layer: usize,
    position: Option<usize>,
) -> Result<f64, ProbeError> {
    let pos = position.unwrap_or(batch.seq_len() - 1);
    let d = model.config.d_model;
    let eye = Tensor::identity(d);
    let mut acc = 0.0;
    for s in 0..batch.n_seqs() {
        let jac = block_jacobian(model, batch.seq(s), layer, pos)?;
        acc += jac.sub(&eye).map_err(ModelError::from)?.frob_norm();
    }
    Ok(acc / batch.n_seqs() as f64)
}

/// What the probe battery computes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub weight_thresholds: Vec<f64>,
    pub attn_thresholds: Vec<f64>,
    pub capture_attention: bool,
    pub jacobian: bool,
    pub jacobian_position: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            weight_thresholds: vec![1e-1, 1e-2, 1e-4],
            attn_thresholds: vec![1e-3, 1e-4, 1e-6],
            capture_attention: true,
            jacobian: false,
            jacobian_position: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub last_layer_var: f64,
    pub per_layer_var: Vec<f64>,
    pub attn_block_var: Vec<f64>,
    pub mlp_block_var: Vec<f64>,
    /// (threshold, fraction) pairs.
    pub weight_sparsity: Vec<(f64, f64)>,
    pub attn_sparsity_literal: Vec<AttnSparsity>,
    pub attn_sparsity_causal: Vec<AttnSparsity>,
    pub attn_entropy: Option<AttnEntropy>,
    pub kurtosis: Vec<KurtosisReport>,
    pub jacobian_dev: Option<Vec<f64>>,
}

/// Run the full battery on one model snapshot over a fixed batch.
pub fn probe_report(
    model: &Model,
    batch: &TokenBatch,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, ProbeError> {
    let opts = TraceOptions { states: true, attention: cfg.capture_attention, routing: false };
    let (_, trace) = forward(model, batch, &opts)?;
    let per_layer_var = per_layer_variances(&trace)?;
    let (attn_block_var, mlp_block_var) = branch_variances(&trace)?;
    let last_layer_var = *per_layer_var.last().expect("depth >= 1");
    let mut ws = Vec::new();
    for &eps in &cfg.weight_thresholds {
        ws.push((eps, weight_sparsity(model, eps)?));
    }
    let mut lit = Vec::new();
    let mut cau = Vec::new();
    let mut entropy = None;
    if cfg.capture_attention {
        for &eps in &cfg.attn_thresholds {
            lit.push(attention_sparsity(&trace, eps, SparsityMode::Literal)?);
            cau.push(attention_sparsity(&trace, eps, SparsityMode::CausalSupport)?);
        }
        entropy = Some(attention_entropy(&trace)?);
    }
    let kurt = trace
        .layers
        .iter()
        .map(|l| kurtosis(&l.output))
        .collect::<Result<Vec<_>, _>>()?;
    let jacobian_dev = if cfg.jacobian {
        let mut devs = Vec::with_capacity(model.config.depth);
        for l in 0..model.config.depth {
            devs.push(jacobian_deviation(model, batch, l, cfg.jacobian_position)?);
        }
        Some(devs)
    } else {
        None
    };
    Ok(ProbeReport {
        last_layer_var,
        per_layer_var,
        attn_block_var,
        mlp_block_var,
        weight_sparsity: ws,
        attn_sparsity_literal: lit,
        attn_sparsity_causal: cau,
        attn_entropy: entropy,
        kurtosis: kurt,
        jacobian_dev,
    })
}
