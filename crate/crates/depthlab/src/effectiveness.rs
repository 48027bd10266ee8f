//! The three layer-effectiveness scores: causal (skip-induced disruption of
//! downstream deltas), permutation (loss change under layer swaps), and
//! usefulness (loss change under fitted affine replacement).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{
    forward, loss, replace_layer_linear_forward, skip_layer_forward, Model, ModelError,
    TokenBatch, TraceOptions,
};
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum EffError {
    DepthTooSmall { depth: usize },
    ZeroBaselineLoss,
    InsufficientFitData { needed: usize, got: usize },
    Solver { reason: String },
    Model(ModelError),
}

impl fmt::Display for EffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DepthTooSmall { depth } => write!(f, "scores need depth >= 2, got {depth}"),
            Self::ZeroBaselineLoss => write!(f, "baseline loss is zero; permutation score undefined"),
            Self::InsufficientFitData { needed, got } => {
                write!(f, "affine fit needs at least {needed} token vectors, got {got}")
            }
            Self::Solver { reason } => write!(f, "least-squares solver failed: {reason}"),
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EffError {}

impl From<ModelError> for EffError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// One defined C(s, l) cell, l > s.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CausalCell {
    pub skipped: usize,
    pub layer: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CausalReport {
    pub cells: Vec<CausalCell>,
    /// (1/sqrt(N)) (1/N) sum_s mean_{l>s} C(s, l), N = depth; the empty inner
    /// mean at s = N-1 contributes zero.
    pub global: f64,
    /// Cells excluded because the baseline delta norm was zero.
    pub undefined_cells: usize,
}

/// C(s, l) = ||(h_{l+1} - h_l) - (skip_{l+1} - skip_l)|| / ||h_{l+1} - h_l||,
/// states flattened over tokens x dims per sequence and averaged over the
/// batch. Runs one skip-forward per layer.
pub fn causal_score(model: &Model, batch: &TokenBatch) -> Result<CausalReport, EffError> {
    let depth = model.config.depth;
    if depth < 2 {
        return Err(EffError::DepthTooSmall { depth });
    }
    let t = batch.seq_len();
    let opts = TraceOptions::default();
    let (_, base) = forward(model, batch, &opts)?;
    let base_states = base.hidden_states();
    let base_states: Vec<&Tensor> = base_states.into_iter().collect();

    let seq_norm = |x: &Tensor, s: usize| -> f64 {
        let mut acc = 0.0;
        for i in s * t..(s + 1) * t {
            acc += x.row(i).iter().map(|v| v * v).sum::<f64>();
        }
        acc.sqrt()
    };
    let seq_delta_norm = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor, s: usize| -> f64 {
        // || (a - b) - (c - d) || over one sequence's rows.
        let mut acc = 0.0;
        for i in s * t..(s + 1) * t {
            for (((av, bv), cv), dv) in a.row(i).iter().zip(b.row(i)).zip(c.row(i)).zip(d.row(i)) {
                let v = (av - bv) - (cv - dv);
                acc += v * v;
            }
        }
        acc.sqrt()
    };

    let mut cells = Vec::new();
    let mut undefined = 0usize;
    let mut outer_acc = 0.0;
    for s in 0..depth {
        let mut inner_acc = 0.0;
        let mut inner_n = 0usize;
        if s + 1 < depth {
            let skipped = skip_layer_forward(model, batch, s, &opts)?;
            let skip_states = skipped.hidden_states();
            for l in s + 1..depth {
                let mut cell_acc = 0.0;
                let mut cell_n = 0usize;
                for seq in 0..batch.n_seqs() {
                    let den = {
                        let diff = base_states[l + 1].sub(base_states[l]).map_err(ModelError::from)?;
                        seq_norm(&diff, seq)
                    };
                    if den == 0.0 {
                        continue;
                    }
                    let num = seq_delta_norm(
                        base_states[l + 1],
                        base_states[l],
                        skip_states[l + 1],
                        skip_states[l],
                        seq,
                    );
                    cell_acc += num / den;
                    cell_n += 1;
                }
                if cell_n == 0 {
                    undefined += 1;
                    continue;
                }
                let value = cell_acc / cell_n as f64;
                cells.push(CausalCell { skipped: s, layer: l, value });
                inner_acc += value;
                inner_n += 1;
            }
        }
        if inner_n > 0 {
            outer_acc += inner_acc / inner_n as f64;
        }
    }
    let n = depth as f64;
    let global = outer_acc / (n * n.sqrt());
    Ok(CausalReport { cells, global, undefined_cells: undefined })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermutationCell {
    pub l1: usize,
    pub l2: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermutationReport {
    pub cells: Vec<PermutationCell>,
    pub baseline_ce: f64,
    /// 2 / (N (N-1)) sum over unordered pairs.
    pub global: f64,
}

/// P(l1, l2) = |L(M) - L(M_swap)| / |L(M)| with L the cross-entropy on the
/// eval batch. Runs one forward per unordered layer pair.
pub fn permutation_score(model: &Model, batch: &TokenBatch) -> Result<PermutationReport, EffError> {
    let depth = model.config.depth;
    if depth < 2 {
        return Err(EffError::DepthTooSmall { depth });
    }
    let baseline = loss(model, batch)?.cross_entropy;
    if baseline == 0.0 {
        return Err(EffError::ZeroBaselineLoss);
    }
    let mut cells = Vec::new();
    let mut acc = 0.0;
    for l1 in 0..depth {
        for l2 in l1 + 1..depth {
            let swapped = model.swap_layers(l1, l2)?;
            let ce = loss(&swapped, batch)?.cross_entropy;
            let value = (baseline - ce).abs() / baseline.abs();
            acc += value;
            cells.push(PermutationCell { l1, l2, value });
        }
    }
    let n = depth as f64;
    let global = 2.0 * acc / (n * (n - 1.0));
    Ok(PermutationReport { cells, baseline_ce: baseline, global })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UsefulnessLayer {
    pub layer: usize,
    pub linear_loss: f64,
    pub loss_ratio: f64,
    pub delta_loss: f64,
    pub useful: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UsefulnessReport {
    pub layers: Vec<UsefulnessLayer>,
    pub baseline_loss: f64,
    pub alpha: f64,
    pub s_useful: f64,
    pub effective: usize,
    pub wasted: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UsefulnessConfig {
    /// Loss-ratio threshold: useful iff ratio > 1 + alpha.
    pub alpha: f64,
    /// Ridge damping, scaled by the mean diagonal of the normal matrix.
    pub ridge_rel: f64,
    /// Cap on fit token vectors taken from the fit batch.
    pub max_fit_tokens: usize,
}

impl Default for UsefulnessConfig {
    fn default() -> Self {
        Self { alpha: 0.1, ridge_rel: 1e-6, max_fit_tokens: 4096 }
    }
}

/// Cholesky-factor the symmetric positive-definite matrix in place (lower
/// triangle holds L).
fn cholesky(g: &mut [f64], n: usize) -> Result<(), EffError> {
    for j in 0..n {
        let mut diag = g[j * n + j];
        for k in 0..j {
            diag -= g[j * n + k] * g[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(EffError::Solver {
                reason: format!("non-positive pivot {diag} at column {j}; increase ridge"),
            });
        }
        let root = diag.sqrt();
        g[j * n + j] = root;
        for i in j + 1..n {
            let mut v = g[i * n + j];
            for k in 0..j {
                v -= g[i * n + k] * g[j * n + k];
            }
            g[i * n + j] = v / root;
        }
    }
    Ok(())
}

/// Solve L L^T X = B in place given the factor from `cholesky`; B has `m`
/// right-hand-side columns.
fn solve_factored(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for col in 0..m {
        for i in 0..n {
            let mut v = b[i * m + col];
            for k in 0..i {
                v -= l[i * n + k] * b[k * m + col];
            }
            b[i * m + col] = v / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = b[i * m + col];
            for k in i + 1..n {
                v -= l[k * n + i] * b[k * m + col];
            }
            b[i * m + col] = v / l[i * n + i];
        }
    }
}

/// Fit y ~ A x + b over token pairs by ridge least squares. Returns (A, b)
/// in the per-token column convention used by the replace-layer override.
pub fn fit_affine(
    xs: &Tensor,
    ys: &Tensor,
    ridge_rel: f64,
) -> Result<(Tensor, Tensor), EffError> {
    let (n, d) = (xs.rows(), xs.cols());
    if ys.rows() != n || ys.cols() != d {
        return Err(EffError::Solver { reason: "fit pair shape mismatch".into() });
    }
    if n < d + 1 {
        return Err(EffError::InsufficientFitData { needed: d + 1, got: n });
    }
    let dd = d + 1;
    // Normal matrix M^T M for M = [X | 1], and M^T Y.
    let mut gram = vec![0.0; dd * dd];
    let mut rhs = vec![0.0; dd * d];
    for r in 0..n {
        let x = xs.row(r);
        let y = ys.row(r);
        for i in 0..d {
            let xi = x[i];
            for j in 0..d {
                gram[i * dd + j] += xi * x[j];
            }
            gram[i * dd + d] += xi;
            for j in 0..d {
                rhs[i * d + j] += xi * y[j];
            }
        }
        gram[d * dd + d] += 1.0;
        for j in 0..d {
            gram[d * dd + j] += x[j];
            rhs[d * d + j] += y[j];
        }
    }
    let trace_scale = (0..dd).map(|i| gram[i * dd + i]).sum::<f64>() / dd as f64;
    let ridge = ridge_rel * trace_scale.max(1e-300);
    let gram_orig = gram.clone();
    for i in 0..dd {
        gram[i * dd + i] += ridge;
    }
    cholesky(&mut gram, dd)?;
    let mut w = rhs.clone();
    solve_factored(&gram, dd, &mut w, d);
    // The ridge stabilizes the factorization; iterative refinement against
    // the unridged normal equations removes its shrinkage bias, so an exactly
    // affine block is recovered exactly.
    for _ in 0..2 {
        let mut resid = rhs.clone();
        for i in 0..dd {
            for k in 0..dd {
                let gik = gram_orig[i * dd + k];
                for j in 0..d {
                    resid[i * d + j] -= gik * w[k * d + j];
                }
            }
        }
        solve_factored(&gram, dd, &mut resid, d);
        for (wv, rv) in w.iter_mut().zip(&resid) {
            *wv += rv;
        }
    }
    let rhs = w;
    // rhs holds W with y_row = x_row W_x + w_b; A = W_x^T, b = w_b.
    let mut a = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        for j in 0..d {
            a.row_mut(j)[i] = rhs[i * d + j];
        }
    }
    let b = Tensor::new(vec![d], rhs[d * d..].to_vec()).map_err(ModelError::from)?;
    Ok((a, b))
}

/// Sum of squared residuals of y ~ A x + b over token pairs.
pub fn affine_residual(xs: &Tensor, ys: &Tensor, a: &Tensor, b: &Tensor) -> f64 {
    let (n, d) = (xs.rows(), xs.cols());
    let mut acc = 0.0;
    for r in 0..n {
        let x = xs.row(r);
        let y = ys.row(r);
        for j in 0..d {
            let pred = a.row(j).iter().zip(x).map(|(av, xv)| av * xv).sum::<f64>() + b.data()[j];
            let e = pred - y[j];
            acc += e * e;
        }
    }
    acc
}

fn stack_pairs(model: &Model, fit_batch: &TokenBatch, layer: usize, cap: usize) -> Result<(Tensor, Tensor), EffError> {
    let (_, trace) = forward(model, fit_batch, &TraceOptions::default())?;
    let lt = &trace.layers[layer];
    let n = lt.input.rows().min(cap);
    let d = lt.input.cols();
    let mut xs = Tensor::zeros(vec![n, d]);
    let mut ys = Tensor::zeros(vec![n, d]);
    for r in 0..n {
        xs.row_mut(r).copy_from_slice(lt.input.row(r));
        ys.row_mut(r).copy_from_slice(lt.output.row(r));
    }
    Ok((xs, ys))
}

/// Per layer: fit (A, b) on the fit batch, evaluate the replaced model's loss
/// on the eval batch; useful iff ratio > 1 + alpha. Fit and eval batches must
/// be disjoint.
pub fn usefulness_score(
    model: &Model,
    fit_batch: &TokenBatch,
    eval_batch: &TokenBatch,
    cfg: &UsefulnessConfig,
) -> Result<UsefulnessReport, EffError> {
    let depth = model.config.depth;
    let baseline = loss(model, eval_batch)?.total;
    let mut layers = Vec::with_capacity(depth);
    let mut effective = 0usize;
    for l in 0..depth {
        let (xs, ys) = stack_pairs(model, fit_batch, l, cfg.max_fit_tokens)?;
        let (a, b) = fit_affine(&xs, &ys, cfg.ridge_rel)?;
        let linear_loss = replace_layer_linear_forward(model, eval_batch, l, &a, &b)?.total;
        let loss_ratio = linear_loss / baseline;
        let useful = loss_ratio > 1.0 + cfg.alpha;
        if useful {
            effective += 1;
        }
        layers.push(UsefulnessLayer {
            layer: l,
            linear_loss,
            loss_ratio,
            delta_loss: linear_loss - baseline,
            useful,
        });
    }
    Ok(UsefulnessReport {
        layers,
        baseline_loss: baseline,
        alpha: cfg.alpha,
        s_useful: effective as f64 / depth as f64,
        effective,
        wasted: depth - effective,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectivenessReport {
    pub causal: CausalReport,
    pub permutation: PermutationReport,
    pub usefulness: UsefulnessReport,
}

/// All three scores on one snapshot. `fit_batch` feeds the affine fits;
/// `eval_batch` is the held-out loss batch.
pub fn effectiveness_report(
    model: &Model,
    fit_batch: &TokenBatch,
    eval_batch: &TokenBatch,
    cfg: &UsefulnessConfig,
) -> Result<EffectivenessReport, EffError> {
    Ok(EffectivenessReport {
        causal: causal_score(model, eval_batch)?,
        permutation: permutation_score(model, eval_batch)?,
        usefulness: usefulness_score(model, fit_batch, eval_batch, cfg)?,
    })
}
