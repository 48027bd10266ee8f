//! Forward passes with full per-layer tracing, block overrides (skip /
//! affine-replace), loss assembly, and exact block Jacobians.

use std::cmp::Ordering;

use crate::graph::{jacobian_at_row, Graph, NodeId};
use crate::tensor::Tensor;

use super::{FfnParams, FfnWeights, LayerParams, Model, ModelConfig, ModelError, NORM_EPS};

/// Equal-length token sequences evaluated together.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    seqs: Vec<Vec<u32>>,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new(seqs: Vec<Vec<u32>>) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::BatchShape { reason: "no sequences".into() });
        }
        let seq_len = seqs[0].len();
        if seq_len == 0 {
            return Err(ModelError::BatchShape { reason: "empty sequence".into() });
        }
        if seqs.iter().any(|s| s.len() != seq_len) {
            return Err(ModelError::BatchShape { reason: "unequal sequence lengths".into() });
        }
        Ok(Self { seqs, seq_len })
    }

    pub fn single(seq: Vec<u32>) -> Result<Self, ModelError> {
        Self::new(vec![seq])
    }

    pub fn n_seqs(&self) -> usize {
        self.seqs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn seq(&self, s: usize) -> &[u32] {
        &self.seqs[s]
    }

    pub fn n_tokens(&self) -> usize {
        self.seqs.len() * self.seq_len
    }

    fn flat_ids(&self) -> Vec<u32> {
        self.seqs.iter().flatten().copied().collect()
    }

    fn positions(&self) -> Vec<usize> {
        (0..self.seqs.len()).flat_map(|_| 0..self.seq_len).collect()
    }
}

/// What to copy out of the graph while running.
#[derive(Clone, Copy, Debug)]
pub struct TraceOptions {
    /// Per-layer hidden states and branch outputs.
    pub states: bool,
    /// Attention maps per (sequence, layer, head).
    pub attention: bool,
    /// Expert selections and gate weights per token.
    pub routing: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { states: true, attention: false, routing: false }
    }
}

impl TraceOptions {
    pub fn everything() -> Self {
        Self { states: true, attention: true, routing: true }
    }

    pub fn nothing() -> Self {
        Self { states: false, attention: false, routing: false }
    }
}

/// How one block's map is replaced for interventions.
#[derive(Clone, Debug)]
pub enum BlockOverride {
    None,
    /// Bypass block `layer` entirely: x_{l+1} := x_l.
    Skip { layer: usize },
    /// Replace block `layer` with the per-token affine map x -> A x + b.
    Linear { layer: usize, a: Tensor, b: Tensor },
}

/// Per-token routing decisions of one MoE layer: (expert id, gate weight)
/// for each of the top-k selections, token-major.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    pub selected: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Residual-stream input x_l.
    pub input: Tensor,
    /// Post-attention, pre-FFN state x'_l.
    pub post_attn: Tensor,
    /// Block output y_l = x_{l+1}.
    pub output: Tensor,
    /// Attention branch Attn(LN(x_l)) added to the stream.
    pub attn_branch: Tensor,
    /// FFN branch added to the stream.
    pub ffn_branch: Tensor,
    /// attn_maps[seq][head] is the T x T attention matrix.
    pub attn_maps: Option<Vec<Vec<Tensor>>>,
    pub routing: Option<RoutingTrace>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Final residual state x_L (before the final norm).
    pub final_state: Option<Tensor>,
}

impl ForwardTrace {
    /// Hidden states x_0 .. x_L (layer inputs plus the final state).
    pub fn hidden_states(&self) -> Vec<&Tensor> {
        let mut states: Vec<&Tensor> = self.layers.iter().map(|l| &l.input).collect();
        if let Some(fs) = &self.final_state {
            states.push(fs);
        }
        states
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub load_balance: f64,
    pub router_z: f64,
}

struct FfnDenseNodes {
    w_gate: NodeId,
    w_up: NodeId,
    w_down: NodeId,
}

enum FfnNodes {
    Dense(FfnDenseNodes),
    Moe { router: NodeId, experts: Vec<FfnDenseNodes>, shared: Vec<FfnDenseNodes> },
}

struct LayerNodes {
    attn_gain: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ffn_gain: NodeId,
    ffn: FfnNodes,
}

struct ModelNodes {
    embed: NodeId,
    layers: Vec<LayerNodes>,
    final_gain: NodeId,
    unembed: NodeId,
}

struct MoeAux {
    lb: NodeId,
    z: NodeId,
    lb_coeff: f64,
    z_coeff: f64,
}

pub(crate) struct TracedForward {
    pub graph: Graph,
    pub logits: NodeId,
    pub trace: ForwardTrace,
    /// (name, leaf id) in canonical parameter order.
    pub params: Vec<(String, NodeId)>,
    moe_aux: Vec<MoeAux>,
}

fn register_ffn_leaves(g: &mut Graph, w: &FfnWeights, prefix: &str, out: &mut Vec<(String, NodeId)>) -> FfnDenseNodes {
    let w_gate = g.leaf(w.w_gate.clone());
    out.push((format!("{prefix}.w_gate"), w_gate));
    let w_up = g.leaf(w.w_up.clone());
    out.push((format!("{prefix}.w_up"), w_up));
    let w_down = g.leaf(w.w_down.clone());
    out.push((format!("{prefix}.w_down"), w_down));
    FfnDenseNodes { w_gate, w_up, w_down }
}

/// Register every parameter as a graph leaf, in `for_each_param` order.
fn register_leaves(g: &mut Graph, model: &Model) -> (ModelNodes, Vec<(String, NodeId)>) {
    let mut names = Vec::new();
    let embed = g.leaf(model.params.embed.clone());
    names.push(("embed".to_string(), embed));
    let mut layers = Vec::with_capacity(model.params.layers.len());
    for (l, layer) in model.params.layers.iter().enumerate() {
        let attn_gain = g.leaf(layer.attn_gain.clone());
        names.push((format!("layer{l}.attn_gain"), attn_gain));
        let wq = g.leaf(layer.wq.clone());
        names.push((format!("layer{l}.wq"), wq));
        let wk = g.leaf(layer.wk.clone());
        names.push((format!("layer{l}.wk"), wk));
        let wv = g.leaf(layer.wv.clone());
        names.push((format!("layer{l}.wv"), wv));
        let wo = g.leaf(layer.wo.clone());
        names.push((format!("layer{l}.wo"), wo));
        let ffn_gain = g.leaf(layer.ffn_gain.clone());
        names.push((format!("layer{l}.ffn_gain"), ffn_gain));
        let ffn = match &layer.ffn {
            FfnParams::Dense(w) => {
                FfnNodes::Dense(register_ffn_leaves(g, w, &format!("layer{l}.ffn"), &mut names))
            }
            FfnParams::Moe(m) => {
                let router = g.leaf(m.router.clone());
                names.push((format!("layer{l}.router"), router));
                let experts = m
                    .experts
                    .iter()
                    .enumerate()
                    .map(|(e, w)| register_ffn_leaves(g, w, &format!("layer{l}.expert{e}"), &mut names))
                    .collect();
                let shared = m
                    .shared
                    .iter()
                    .enumerate()
                    .map(|(s, w)| register_ffn_leaves(g, w, &format!("layer{l}.shared{s}"), &mut names))
                    .collect();
                FfnNodes::Moe { router, experts, shared }
            }
        };
        layers.push(LayerNodes { attn_gain, wq, wk, wv, wo, ffn_gain, ffn });
    }
    let final_gain = g.leaf(model.params.final_gain.clone());
    names.push(("final_gain".to_string(), final_gain));
    let unembed = g.leaf(model.params.unembed.clone());
    names.push(("unembed".to_string(), unembed));
    (ModelNodes { embed, layers, final_gain, unembed }, names)
}

fn swiglu(g: &mut Graph, x: NodeId, w: &FfnDenseNodes) -> Result<NodeId, ModelError> {
    let gate = g.matmul(x, w.w_gate)?;
    let up = g.matmul(x, w.w_up)?;
    let act = g.silu(gate);
    let h = g.mul(act, up)?;
    Ok(g.matmul(h, w.w_down)?)
}

/// Indices of the k largest entries, ties broken toward the lower index,
/// returned ascending.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

struct BlockOut {
    x_out: NodeId,
    post_attn: NodeId,
    attn_branch: NodeId,
    ffn_branch: NodeId,
    attn_maps: Option<Vec<Vec<Tensor>>>,
    routing: Option<RoutingTrace>,
    moe_aux: Option<MoeAux>,
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    g: &mut Graph,
    x: NodeId,
    nodes: &LayerNodes,
    config: &ModelConfig,
    positions: &[usize],
    n_seqs: usize,
    seq_len: usize,
    opts: &TraceOptions,
) -> Result<BlockOut, ModelError> {
    let dh = config.head_dim();
    let n_heads = config.n_query_heads;
    let n_kv = config.n_kv_heads;
    let group = config.group_size();

    // Attention sublayer.
    let normed = g.rmsnorm(x, NORM_EPS);
    let scaled = g.mul_row_broadcast(normed, nodes.attn_gain)?;
    let q_all = g.matmul(scaled, nodes.wq)?;
    let k_all = g.matmul(scaled, nodes.wk)?;
    let v_all = g.matmul(scaled, nodes.wv)?;
    let mut q_heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let s = g.slice_cols(q_all, h * dh, dh)?;
        q_heads.push(g.rope(s, positions, config.rope_base)?);
    }
    let mut k_heads = Vec::with_capacity(n_kv);
    let mut v_heads = Vec::with_capacity(n_kv);
    for j in 0..n_kv {
        let ks = g.slice_cols(k_all, j * dh, dh)?;
        k_heads.push(g.rope(ks, positions, config.rope_base)?);
        v_heads.push(g.slice_cols(v_all, j * dh, dh)?);
    }
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut seq_ctx = Vec::with_capacity(n_seqs);
    let mut maps: Option<Vec<Vec<Tensor>>> = opts.attention.then(Vec::new);
    for s in 0..n_seqs {
        let mut head_ctx = Vec::with_capacity(n_heads);
        let mut seq_maps = opts.attention.then(|| Vec::with_capacity(n_heads));
        for h in 0..n_heads {
            // Query head h shares the K/V of group floor(h / G).
            let kv = h / group;
            let qs = g.slice_rows(q_heads[h], s * seq_len, seq_len)?;
            let ks = g.slice_rows(k_heads[kv], s * seq_len, seq_len)?;
            let vs = g.slice_rows(v_heads[kv], s * seq_len, seq_len)?;
            let scores = g.matmul_nt(qs, ks)?;
            let scaled_scores = g.scale(scores, inv_sqrt);
            let attn = g.softmax_causal(scaled_scores)?;
            if let Some(sm) = &mut seq_maps {
                sm.push(g.value(attn).clone());
            }
            head_ctx.push(g.matmul(attn, vs)?);
        }
        if let (Some(ms), Some(sm)) = (&mut maps, seq_maps) {
            ms.push(sm);
        }
        seq_ctx.push(g.concat_cols(&head_ctx)?);
    }
    let ctx = if n_seqs == 1 { seq_ctx[0] } else { g.concat_rows(&seq_ctx)? };
    let attn_branch = g.matmul(ctx, nodes.wo)?;
    let post_attn = g.add(x, attn_branch)?;

    // FFN sublayer.
    let normed2 = g.rmsnorm(post_attn, NORM_EPS);
    let scaled2 = g.mul_row_broadcast(normed2, nodes.ffn_gain)?;
    let (ffn_branch, routing, moe_aux) = match &nodes.ffn {
        FfnNodes::Dense(w) => (swiglu(g, scaled2, w)?, None, None),
        FfnNodes::Moe { router, experts, shared } => {
            let moe_cfg = config.moe.as_ref().expect("moe nodes imply moe config");
            let n = n_seqs * seq_len;
            let d = config.d_model;
            let e_count = moe_cfg.n_experts;
            let k = moe_cfg.top_k;
            let router_logits = g.matmul(scaled2, *router)?;
            let probs = g.softmax_rows(router_logits)?;
            let pv = g.value(probs).clone();
            let selected: Vec<Vec<usize>> =
                (0..n).map(|t| top_k_indices(pv.row(t), k)).collect();
            // Gates renormalize the softmax over the selected set.
            let sel_pairs: Vec<(usize, usize)> = selected
                .iter()
                .enumerate()
                .flat_map(|(t, es)| es.iter().map(move |&e| (t, e)))
                .collect();
            let sel_probs = g.gather_elems(probs, &sel_pairs)?;
            let sel_mat = g.reshape(sel_probs, vec![n, k])?;
            let denom = g.row_sum(sel_mat);
            let mut out = g.leaf(Tensor::zeros(vec![n, d]));
            let mut counts = vec![0usize; e_count];
            for (e, expert) in experts.iter().enumerate() {
                let idx: Vec<usize> = (0..n).filter(|&t| selected[t].contains(&e)).collect();
                counts[e] = idx.len();
                if idx.is_empty() {
                    continue;
                }
                let xe = g.gather_rows(scaled2, &idx)?;
                let ue = swiglu(g, xe, expert)?;
                let pe_pairs: Vec<(usize, usize)> = idx.iter().map(|&t| (t, e)).collect();
                let pe = g.gather_elems(probs, &pe_pairs)?;
                let de2 = g.gather_rows(denom, &idx)?;
                let de = g.reshape(de2, vec![idx.len()])?;
                let gate = g.div(pe, de)?;
                out = g.scatter_add_weighted(out, ue, gate, &idx)?;
            }
            for sh in shared {
                let u = swiglu(g, scaled2, sh)?;
                out = g.add(out, u)?;
            }
            // Load balance: E * sum_e freq_e * mean_prob_e; 1.0 at uniform.
            let freq: Vec<f64> = counts
                .iter()
                .map(|&c| c as f64 / (n as f64 * k as f64) * e_count as f64)
                .collect();
            let pbar = g.col_mean(probs);
            let lb = g.weighted_sum_const(pbar, &Tensor::new(vec![e_count], freq)?)?;
            let lse = g.logsumexp_rows(router_logits);
            let lse2 = g.square(lse);
            let z = g.mean_all(lse2);
            let routing = opts.routing.then(|| {
                let dv = g.value(denom).clone();
                RoutingTrace {
                    selected: selected
                        .iter()
                        .enumerate()
                        .map(|(t, es)| {
                            es.iter().map(|&e| (e, pv.at(t, e) / dv.data()[t])).collect()
                        })
                        .collect(),
                }
            });
            (
                out,
                routing,
                Some(MoeAux { lb, z, lb_coeff: moe_cfg.lb_coeff, z_coeff: moe_cfg.z_coeff }),
            )
        }
    };
    let x_out = g.add(post_attn, ffn_branch)?;
    Ok(BlockOut { x_out, post_attn, attn_branch, ffn_branch, attn_maps: maps, routing, moe_aux })
}

pub(crate) fn traced_forward(
    model: &Model,
    batch: &TokenBatch,
    opts: &TraceOptions,
    over: &BlockOverride,
) -> Result<TracedForward, ModelError> {
    let config = &model.config;
    if batch.seq_len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: batch.seq_len(), max: config.max_seq_len });
    }
    for seq in &batch.seqs {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: bad, vocab: config.vocab_size });
        }
    }
    match over {
        BlockOverride::Skip { layer } if *layer >= config.depth => {
            return Err(ModelError::LayerOutOfRange { layer: *layer, depth: config.depth });
        }
        BlockOverride::Linear { layer, a, b } => {
            if *layer >= config.depth {
                return Err(ModelError::LayerOutOfRange { layer: *layer, depth: config.depth });
            }
            let d = config.d_model;
            if a.shape() != [d, d] || b.numel() != d {
                return Err(ModelError::BatchShape {
                    reason: format!(
                        "linear override shapes {:?} / {:?} do not match d_model {d}",
                        a.shape(),
                        b.shape()
                    ),
                });
            }
        }
        _ => {}
    }

    let mut g = Graph::new();
    let (nodes, params) = register_leaves(&mut g, model);
    let ids = batch.flat_ids();
    let positions = batch.positions();
    let mut x = g.embed_lookup(nodes.embed, &ids)?;
    let mut trace = ForwardTrace::default();
    let mut moe_aux = Vec::new();
    let zeros_like_x = |g: &Graph, x: NodeId| Tensor::zeros(g.value(x).shape().to_vec());

    for l in 0..config.depth {
        match over {
            BlockOverride::Skip { layer } if *layer == l => {
                if opts.states {
                    let v = g.value(x).clone();
                    trace.layers.push(LayerTrace {
                        input: v.clone(),
                        post_attn: v.clone(),
                        output: v,
                        attn_branch: zeros_like_x(&g, x),
                        ffn_branch: zeros_like_x(&g, x),
                        attn_maps: None,
                        routing: None,
                    });
                }
            }
            BlockOverride::Linear { layer, a, b } if *layer == l => {
                let a_leaf = g.leaf(a.clone());
                let b_leaf = g.leaf(b.clone());
                // Row convention: y_row = x_row A^T + b.
                let ax = g.matmul_nt(x, a_leaf)?;
                let y = g.add_row_broadcast(ax, b_leaf)?;
                if opts.states {
                    trace.layers.push(LayerTrace {
                        input: g.value(x).clone(),
                        post_attn: g.value(y).clone(),
                        output: g.value(y).clone(),
                        attn_branch: zeros_like_x(&g, x),
                        ffn_branch: zeros_like_x(&g, x),
                        attn_maps: None,
                        routing: None,
                    });
                }
                x = y;
            }
            _ => {
                let out = block_forward(
                    &mut g,
                    x,
                    &nodes.layers[l],
                    config,
                    &positions,
                    batch.n_seqs(),
                    batch.seq_len(),
                    opts,
                )?;
                if opts.states {
                    trace.layers.push(LayerTrace {
                        input: g.value(x).clone(),
                        post_attn: g.value(out.post_attn).clone(),
                        output: g.value(out.x_out).clone(),
                        attn_branch: g.value(out.attn_branch).clone(),
                        ffn_branch: g.value(out.ffn_branch).clone(),
                        attn_maps: out.attn_maps,
                        routing: out.routing,
                    });
                }
                if let Some(aux) = out.moe_aux {
                    moe_aux.push(aux);
                }
                x = out.x_out;
            }
        }
    }
    if opts.states {
        trace.final_state = Some(g.value(x).clone());
    }
    let final_normed = g.rmsnorm(x, NORM_EPS);
    let final_scaled = g.mul_row_broadcast(final_normed, nodes.final_gain)?;
    let logits = g.matmul(final_scaled, nodes.unembed)?;
    Ok(TracedForward { graph: g, logits, trace, params, moe_aux })
}

/// Logits for every position plus the requested trace.
pub fn forward(
    model: &Model,
    batch: &TokenBatch,
    opts: &TraceOptions,
) -> Result<(Tensor, ForwardTrace), ModelError> {
    let mut opts = *opts;
    opts.states = true;
    let tf = traced_forward(model, batch, &opts, &BlockOverride::None)?;
    Ok((tf.graph.value(tf.logits).clone(), tf.trace))
}

struct LossNodes {
    total: NodeId,
    ce: NodeId,
    lb: Option<NodeId>,
    z: Option<NodeId>,
}

fn loss_nodes(tf: &mut TracedForward, batch: &TokenBatch) -> Result<LossNodes, ModelError> {
    if batch.seq_len() < 2 {
        return Err(ModelError::SequenceTooShort { len: batch.seq_len() });
    }
    let t = batch.seq_len();
    let mut pred_rows = Vec::with_capacity(batch.n_seqs() * (t - 1));
    let mut targets = Vec::with_capacity(pred_rows.capacity());
    for s in 0..batch.n_seqs() {
        for i in 0..t - 1 {
            pred_rows.push(s * t + i);
            targets.push(batch.seq(s)[i + 1]);
        }
    }
    let g = &mut tf.graph;
    let pred_logits = g.gather_rows(tf.logits, &pred_rows)?;
    let ce = g.cross_entropy(pred_logits, &targets)?;
    if tf.moe_aux.is_empty() {
        return Ok(LossNodes { total: ce, ce, lb: None, z: None });
    }
    // Auxiliary terms average over MoE layers, keeping magnitudes
    // depth-independent.
    let inv = 1.0 / tf.moe_aux.len() as f64;
    let mut lb_acc = tf.moe_aux[0].lb;
    let mut z_acc = tf.moe_aux[0].z;
    for aux in &tf.moe_aux[1..] {
        lb_acc = g.add(lb_acc, aux.lb)?;
        z_acc = g.add(z_acc, aux.z)?;
    }
    let lb = g.scale(lb_acc, inv);
    let z = g.scale(z_acc, inv);
    let lb_term = g.scale(lb, tf.moe_aux[0].lb_coeff);
    let z_term = g.scale(z, tf.moe_aux[0].z_coeff);
    let partial = g.add(ce, lb_term)?;
    let total = g.add(partial, z_term)?;
    Ok(LossNodes { total, ce, lb: Some(lb), z: Some(z) })
}

fn read_loss_parts(tf: &TracedForward, ln: &LossNodes) -> LossParts {
    LossParts {
        total: tf.graph.value(ln.total).scalar_value(),
        cross_entropy: tf.graph.value(ln.ce).scalar_value(),
        load_balance: ln.lb.map_or(0.0, |n| tf.graph.value(n).scalar_value()),
        router_z: ln.z.map_or(0.0, |n| tf.graph.value(n).scalar_value()),
    }
}

/// Next-token loss: cross-entropy plus coefficient-weighted auxiliary terms.
pub fn loss(model: &Model, batch: &TokenBatch) -> Result<LossParts, ModelError> {
    let mut tf = traced_forward(model, batch, &TraceOptions::nothing(), &BlockOverride::None)?;
    let ln = loss_nodes(&mut tf, batch)?;
    Ok(read_loss_parts(&tf, &ln))
}

/// Loss, per-parameter gradients (canonical order), and the global gradient
/// L2 norm.
pub fn loss_and_grads(
    model: &Model,
    batch: &TokenBatch,
) -> Result<(LossParts, Vec<(String, Tensor)>, f64), ModelError> {
    let mut tf = traced_forward(model, batch, &TraceOptions::nothing(), &BlockOverride::None)?;
    let ln = loss_nodes(&mut tf, batch)?;
    let parts = read_loss_parts(&tf, &ln);
    let mut grads_by_node = tf.graph.backward(ln.total)?;
    let mut out = Vec::with_capacity(tf.params.len());
    let mut sq_norm = 0.0;
    for (name, id) in &tf.params {
        let g = grads_by_node
            .take(*id)
            .unwrap_or_else(|| Tensor::zeros(tf.graph.value(*id).shape().to_vec()));
        sq_norm += g.data().iter().map(|v| v * v).sum::<f64>();
        out.push((name.clone(), g));
    }
    Ok((parts, out, sq_norm.sqrt()))
}

/// Run with block `s` bypassed (x_{s+1} := x_s); all other layers normal.
pub fn skip_layer_forward(
    model: &Model,
    batch: &TokenBatch,
    s: usize,
    opts: &TraceOptions,
) -> Result<ForwardTrace, ModelError> {
    let mut opts = *opts;
    opts.states = true;
    let tf = traced_forward(model, batch, &opts, &BlockOverride::Skip { layer: s })?;
    Ok(tf.trace)
}

/// Replace block `layer` with x -> A x + b (per token) and evaluate the loss.
pub fn replace_layer_linear_forward(
    model: &Model,
    batch: &TokenBatch,
    layer: usize,
    a: &Tensor,
    b: &Tensor,
) -> Result<LossParts, ModelError> {
    let over = BlockOverride::Linear { layer, a: a.clone(), b: b.clone() };
    let mut tf = traced_forward(model, batch, &TraceOptions::nothing(), &over)?;
    let ln = loss_nodes(&mut tf, batch)?;
    Ok(read_loss_parts(&tf, &ln))
}

/// Exact Jacobian of the block map x_l -> x_{l+1} restricted to one token's
/// d-vector, holding the other tokens' layer-l inputs fixed.
pub fn block_jacobian(
    model: &Model,
    tokens: &[u32],
    layer: usize,
    position: usize,
) -> Result<Tensor, ModelError> {
    let config = &model.config;
    if layer >= config.depth {
        return Err(ModelError::LayerOutOfRange { layer, depth: config.depth });
    }
    if position >= tokens.len() {
        return Err(ModelError::BatchShape {
            reason: format!("position {position} out of range for sequence length {}", tokens.len()),
        });
    }
    let batch = TokenBatch::single(tokens.to_vec())?;
    let tf = traced_forward(model, &batch, &TraceOptions::default(), &BlockOverride::None)?;
    let x_in = tf.trace.layers[layer].input.clone();
    drop(tf);

    let mut g = Graph::new();
    let x = g.leaf(x_in);
    let mut names = Vec::new();
    let layer_nodes = {
        let lp: &LayerParams = &model.params.layers[layer];
        let attn_gain = g.leaf(lp.attn_gain.clone());
        let wq = g.leaf(lp.wq.clone());
        let wk = g.leaf(lp.wk.clone());
        let wv = g.leaf(lp.wv.clone());
        let wo = g.leaf(lp.wo.clone());
        let ffn_gain = g.leaf(lp.ffn_gain.clone());
        let ffn = match &lp.ffn {
            FfnParams::Dense(w) => FfnNodes::Dense(register_ffn_leaves(&mut g, w, "jac", &mut names)),
            FfnParams::Moe(m) => {
                let router = g.leaf(m.router.clone());
                let experts = m
                    .experts
                    .iter()
                    .map(|w| register_ffn_leaves(&mut g, w, "jac", &mut names))
                    .collect();
                let shared = m
                    .shared
                    .iter()
                    .map(|w| register_ffn_leaves(&mut g, w, "jac", &mut names))
                    .collect();
                FfnNodes::Moe { router, experts, shared }
            }
        };
        LayerNodes { attn_gain, wq, wk, wv, wo, ffn_gain, ffn }
    };
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let out = block_forward(
        &mut g,
        x,
        &layer_nodes,
        config,
        &positions,
        1,
        tokens.len(),
        &TraceOptions::nothing(),
    )?;
    Ok(jacobian_at_row(&g, out.x_out, x, position)?)
}
