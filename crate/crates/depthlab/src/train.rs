//! Deterministic desk-scale training: byte-level corpus windows, AdamW with
//! decoupled weight decay, warmup-cosine schedule, periodic probe rows on a
//! fixed held-out batch.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{
    build_model, loss, loss_and_grads, Model, ModelConfig, ModelError, TokenBatch, TraceOptions,
};
use crate::probes::{per_layer_variances, ProbeError};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum TrainError {
    InvalidConfig { field: &'static str, reason: String },
    CorpusTooSmall { needed: usize, got: usize },
    NonFiniteGradient { step: usize, param: String },
    Model(ModelError),
    Probe(ProbeError),
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig { field, reason } => {
                write!(f, "invalid train config field {field}: {reason}")
            }
            Self::CorpusTooSmall { needed, got } => {
                write!(f, "corpus too small: need at least {needed} windows, got {got}")
            }
            Self::NonFiniteGradient { step, param } => {
                write!(f, "non-finite gradient for {param} at step {step}; step rejected")
            }
            Self::Model(e) => write!(f, "{e}"),
            Self::Probe(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<ProbeError> for TrainError {
    fn from(e: ProbeError) -> Self {
        Self::Probe(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Where training bytes come from: a file on disk, or the deterministic
/// built-in generator (`synthetic:<bytes>:<seed>`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusSource {
    File(PathBuf),
    Synthetic { bytes: usize, seed: u64 },
}

impl fmt::Display for CorpusSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::File(p) => write!(f, "{}", p.display()),
            Self::Synthetic { bytes, seed } => write!(f, "synthetic:{bytes}:{seed}"),
        }
    }
}

impl FromStr for CorpusSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let mut parts = rest.split(':');
            let bytes = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("bad synthetic corpus size in {s:?}"))?;
            let seed = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("bad synthetic corpus seed in {s:?}"))?;
            if parts.next().is_some() {
                return Err(format!("trailing fields in corpus spec {s:?}"));
            }
            Ok(Self::Synthetic { bytes, seed })
        } else {
            Ok(Self::File(PathBuf::from(s)))
        }
    }
}

const SYNTH_WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "that", "is", "was", "he", "for", "it", "with", "as",
    "his", "on", "be", "at", "by", "had", "not", "are", "but", "from", "or", "have", "an", "they",
    "which", "one", "you", "were", "her", "all", "she", "there", "would", "their", "we", "him",
    "been", "has", "when", "who", "will", "more", "no", "if", "out", "so", "said", "what", "up",
    "its", "about", "into", "than", "them", "can", "only", "other", "new", "some", "could", "time",
    "these", "two", "may", "then", "do", "first", "any", "my", "now", "such", "like", "our",
    "over", "man", "me", "even", "most", "made", "after", "also", "did", "many", "before", "must",
    "through", "years", "where", "much", "way", "well", "down", "should", "because", "each",
    "just", "those", "people", "how", "too", "little", "state", "good", "very", "make", "world",
    "still", "own", "see", "men", "work", "long", "get", "here", "between", "both", "life",
    "being", "under", "never", "day", "same", "another", "know", "while", "last", "might", "us",
    "great", "old", "year", "off", "come", "since", "against", "go", "came", "right", "used",
    "take", "three", "water", "light", "early", "point", "river", "small", "large", "number",
    "model", "layer", "depth", "signal", "measure", "sound", "letter", "paper", "ground", "study",
];

/// Deterministic English-like byte stream: Zipf-weighted words, sentences,
/// paragraphs. Enough byte-level structure to train on; not real prose.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed).substream(&[0x535954_48]);
    let mut out = Vec::with_capacity(bytes + 16);
    let mut sentence_start = true;
    let mut words_in_sentence = 0usize;
    let mut sentences_in_paragraph = 0usize;
    while out.len() < bytes {
        // Zipf-ish pick: rank r with weight 1/(r+1).
        let u = rng.uniform();
        let n = SYNTH_WORDS.len() as f64;
        let rank = ((n + 1.0).powf(u) - 1.0).floor() as usize;
        let word = SYNTH_WORDS[rank.min(SYNTH_WORDS.len() - 1)];
        if sentence_start {
            let mut chars = word.chars();
            if let Some(c) = chars.next() {
                out.extend(c.to_uppercase().to_string().as_bytes());
                out.extend(chars.as_str().as_bytes());
            }
            sentence_start = false;
        } else {
            out.push(b' ');
            if rng.uniform() < 0.06 {
                out.pop();
                out.extend(b", ");
            }
            out.extend(word.as_bytes());
        }
        words_in_sentence += 1;
        let end_sentence = words_in_sentence >= 4 && rng.uniform() < 0.18;
        if end_sentence {
            out.push(b'.');
            words_in_sentence = 0;
            sentence_start = true;
            sentences_in_paragraph += 1;
            if sentences_in_paragraph >= 3 && rng.uniform() < 0.3 {
                out.extend(b"\n\n");
                sentences_in_paragraph = 0;
            } else {
                out.push(b' ');
            }
        }
    }
    out.truncate(bytes);
    out
}

/// Raw bytes plus deterministic windowing into (seq_len + 1)-token tiles.
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn from_source(source: &CorpusSource) -> Result<Self, TrainError> {
        let bytes = match source {
            CorpusSource::File(path) => std::fs::read(path)?,
            CorpusSource::Synthetic { bytes, seed } => synthetic_corpus(*bytes, *seed),
        };
        Ok(Self { bytes })
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn len_bytes(&self) -> usize {
        self.bytes.len()
    }

    /// Number of disjoint windows of seq_len + 1 tokens.
    pub fn n_windows(&self, seq_len: usize) -> usize {
        self.bytes.len() / (seq_len + 1)
    }

    /// Window w covers bytes [w (T+1), (w+1)(T+1)); input and target overlap
    /// by one position inside the window.
    pub fn window(&self, seq_len: usize, w: usize) -> Vec<u32> {
        let stride = seq_len + 1;
        self.bytes[w * stride..(w + 1) * stride].iter().map(|&b| b as u32).collect()
    }
}

/// Training and held-out window index ranges. The held-out tail is the last
/// max(16, 1%) of windows; the probe batch is its first 8 windows and is
/// disjoint from every training window.
pub struct CorpusSplit {
    pub n_train: usize,
    pub n_holdout: usize,
}

pub const PROBE_BATCH_SEQS: usize = 8;

pub fn split_windows(n_windows: usize, batch_size: usize) -> Result<CorpusSplit, TrainError> {
    let n_holdout = (n_windows / 100).max(16);
    let needed = n_holdout + batch_size.max(1);
    if n_windows < needed {
        return Err(TrainError::CorpusTooSmall { needed, got: n_windows });
    }
    Ok(CorpusSplit { n_train: n_windows - n_holdout, n_holdout })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub lr_min_ratio: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub probe_every: usize,
    pub corpus: CorpusSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seq_len: 64,
            lr_peak: 3e-3,
            weight_decay: 0.1,
            warmup_steps: 20,
            lr_min_ratio: 0.1,
            grad_clip: Some(1.0),
            seed: 0,
            probe_every: 25,
            corpus: CorpusSource::Synthetic { bytes: 2_000_000, seed: 7 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: String| Err(TrainError::InvalidConfig { field, reason });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.seq_len < 2 {
            return bad("seq_len", "must be at least 2 to have prediction targets".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak", format!("must be positive, got {}", self.lr_peak));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if self.warmup_steps > self.steps {
            return bad(
                "warmup_steps",
                format!("{} exceeds total steps {}", self.warmup_steps, self.steps),
            );
        }
        if !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return bad("lr_min_ratio", format!("must be in [0, 1], got {}", self.lr_min_ratio));
        }
        if self.probe_every == 0 {
            return bad("probe_every", "must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("train.steps = {}\n", self.steps));
        s.push_str(&format!("train.batch_size = {}\n", self.batch_size));
        s.push_str(&format!("train.seq_len = {}\n", self.seq_len));
        s.push_str(&format!("train.lr_peak = {}\n", self.lr_peak));
        s.push_str(&format!("train.weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("train.warmup_steps = {}\n", self.warmup_steps));
        s.push_str(&format!("train.lr_min_ratio = {}\n", self.lr_min_ratio));
        match self.grad_clip {
            Some(c) => s.push_str(&format!("train.grad_clip = {c}\n")),
            None => s.push_str("train.grad_clip = none\n"),
        }
        s.push_str(&format!("train.seed = {}\n", self.seed));
        s.push_str(&format!("train.probe_every = {}\n", self.probe_every));
        s.push_str(&format!("train.corpus = {}\n", self.corpus));
        s
    }
}

/// Linear warmup to lr_peak, then cosine down to lr_peak * lr_min_ratio.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1);
    let t = (step - cfg.warmup_steps) as f64 / span as f64;
    let cos = (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
    cfg.lr_peak * (cfg.lr_min_ratio + (1.0 - cfg.lr_min_ratio) * cos)
}

/// AdamW moments, aligned with the model's canonical parameter order.
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let mut m = Vec::new();
        model.for_each_param(|_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        let v = m.clone();
        Self { m, v, t: 0, beta1: 0.9, beta2: 0.95, epsilon: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update: decoupled decay W <- (1 - lr λ) W on non-exempt
/// parameters, then the bias-corrected Adam step. A non-finite gradient
/// rejects the whole step before any mutation.
pub fn adamw_step(
    model: &mut Model,
    grads: &[(String, Tensor)],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    at_step: usize,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { step: at_step, param: name.clone() });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let mut i = 0usize;
    model.for_each_param_mut(|name, w| {
        let g = &grads[i].1;
        debug_assert_eq!(grads[i].0, name);
        if !Model::decay_exempt(name) && weight_decay > 0.0 {
            let factor = 1.0 - lr * weight_decay;
            for wv in w.data_mut() {
                *wv *= factor;
            }
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (((wv, gv), mv), vv) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *wv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        i += 1;
    });
    Ok(())
}

/// One row of the probe timeline, all metrics on the fixed held-out batch
/// except grad_norm (the most recent training step's pre-clip global norm).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub lb: f64,
    pub z: f64,
    pub last_layer_var: f64,
    pub per_layer_var: Vec<f64>,
    pub grad_norm: f64,
}

pub struct TrainRun {
    pub model: Model,
    pub timeline: Vec<ProbeRow>,
    pub probe_batch: TokenBatch,
}

fn probe_row(
    model: &Model,
    probe_batch: &TokenBatch,
    step: usize,
    lr: f64,
    grad_norm: f64,
) -> Result<ProbeRow, TrainError> {
    let parts = loss(model, probe_batch)?;
    let (_, trace) = crate::model::forward(model, probe_batch, &TraceOptions::default())?;
    let per_layer_var = per_layer_variances(&trace)?;
    let last = *per_layer_var.last().expect("depth >= 1");
    Ok(ProbeRow {
        step,
        lr,
        loss: parts.total,
        ce: parts.cross_entropy,
        lb: parts.load_balance,
        z: parts.router_z,
        last_layer_var: last,
        per_layer_var,
        grad_norm,
    })
}

/// Deterministic training loop. Emits a probe row at step 0, every
/// `probe_every` steps, and at the final step.
pub fn train_run(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    train_cfg.validate()?;
    // Windows carry seq_len + 1 tokens (inputs and targets overlap), and the
    // whole window goes through the model.
    if train_cfg.seq_len + 1 > model_cfg.max_seq_len {
        return Err(TrainError::InvalidConfig {
            field: "seq_len",
            reason: format!(
                "window length {} (seq_len + 1) exceeds model max_seq_len {}",
                train_cfg.seq_len + 1,
                model_cfg.max_seq_len
            ),
        });
    }
    let corpus = Corpus::from_source(&train_cfg.corpus)?;
    let n_windows = corpus.n_windows(train_cfg.seq_len);
    let split = split_windows(n_windows, train_cfg.batch_size)?;
    if split.n_holdout < PROBE_BATCH_SEQS {
        return Err(TrainError::CorpusTooSmall {
            needed: split.n_train + PROBE_BATCH_SEQS,
            got: n_windows,
        });
    }
    if split.n_train < train_cfg.batch_size {
        return Err(TrainError::CorpusTooSmall {
            needed: train_cfg.batch_size + split.n_holdout,
            got: n_windows,
        });
    }

    let root = Rng::new(train_cfg.seed);
    let mut init_rng = root.substream(&[0x494e_4954]);
    let mut model = build_model(model_cfg, &mut init_rng)?;
    let mut opt = OptimizerState::new(&model);

    let probe_batch = TokenBatch::new(
        (0..PROBE_BATCH_SEQS)
            .map(|i| {
                let mut w = corpus.window(train_cfg.seq_len, split.n_train + i);
                w.truncate(train_cfg.seq_len);
                w
            })
            .collect(),
    )?;

    let mut timeline = vec![probe_row(&model, &probe_batch, 0, lr_at(0, train_cfg), 0.0)?];

    let mut order: Vec<usize> = (0..split.n_train).collect();
    let mut epoch = 0u64;
    let mut cursor = split.n_train; // force shuffle on first use
    for step in 1..=train_cfg.steps {
        if cursor + train_cfg.batch_size > order.len() {
            let mut shuffle_rng = root.substream(&[0x4241_5443, epoch]);
            shuffle_rng.shuffle(&mut order);
            epoch += 1;
            cursor = 0;
        }
        let batch = TokenBatch::new(
            order[cursor..cursor + train_cfg.batch_size]
                .iter()
                .map(|&w| corpus.window(train_cfg.seq_len, w))
                .collect(),
        )?;
        cursor += train_cfg.batch_size;

        let lr = lr_at(step, train_cfg);
        let (_parts, mut grads, grad_norm) = loss_and_grads(&model, &batch)?;
        if let Some(clip) = train_cfg.grad_clip {
            if grad_norm > clip {
                let scale = clip / grad_norm;
                for (_, g) in &mut grads {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        adamw_step(&mut model, &grads, &mut opt, lr, train_cfg.weight_decay, step)?;

        if step % train_cfg.probe_every == 0 || step == train_cfg.steps {
            timeline.push(probe_row(&model, &probe_batch, step, lr, grad_norm)?);
        }
    }
    Ok(TrainRun { model, timeline, probe_batch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FfnParams;

    fn tiny_model_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::small(2, 16, 2);
        cfg.max_seq_len = 32;
        cfg
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch_size: 2,
            seq_len: 16,
            lr_peak: 1e-3,
            weight_decay: 0.1,
            warmup_steps: 2,
            lr_min_ratio: 0.1,
            grad_clip: Some(1.0),
            seed: 11,
            probe_every: 2,
            corpus: CorpusSource::Synthetic { bytes: 40_000, seed: 3 },
        }
    }

    #[test]
    fn corpus_source_parses() {
        assert_eq!(
            "synthetic:1000:5".parse::<CorpusSource>().unwrap(),
            CorpusSource::Synthetic { bytes: 1000, seed: 5 }
        );
        assert_eq!(
            "data/corpus.txt".parse::<CorpusSource>().unwrap(),
            CorpusSource::File(PathBuf::from("data/corpus.txt"))
        );
        assert!("synthetic:x:5".parse::<CorpusSource>().is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_bytey() {
        let a = synthetic_corpus(10_000, 1);
        let b = synthetic_corpus(10_000, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        assert_ne!(a, synthetic_corpus(10_000, 2));
        assert!(a.iter().all(|&c| c < 128), "ascii only");
        let spaces = a.iter().filter(|&&c| c == b' ').count();
        assert!(spaces > 1000, "should look like words");
    }

    #[test]
    fn windows_tile_without_overlap() {
        let corpus = Corpus::from_bytes((0u16..900).map(|v| (v % 251) as u8).collect());
        let t = 8;
        assert_eq!(corpus.n_windows(t), 100);
        let w0 = corpus.window(t, 0);
        let w1 = corpus.window(t, 1);
        assert_eq!(w0.len(), t + 1);
        assert_eq!(w0[0], 0);
        assert_eq!(w1[0], (t as u32 + 1) % 251);
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig { steps: 100, warmup_steps: 10, lr_peak: 2e-3, lr_min_ratio: 0.1, ..tiny_train_cfg() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(10, &cfg), 2e-3);
        // Midpoint of the cosine span.
        let mid = lr_at(55, &cfg);
        let expected = 2e-3 * (0.1 + 0.9 * (1.0 + (std::f64::consts::PI / 2.0).cos()) / 2.0);
        assert!((mid - expected).abs() < 1e-15);
        // Continuous at the junction and non-increasing after it.
        assert!((lr_at(10, &cfg) - lr_at(11, &cfg)).abs() < 2e-3 * 0.01);
        let mut prev = lr_at(10, &cfg);
        for s in 11..=100 {
            let cur = lr_at(s, &cfg);
            assert!(cur <= prev + 1e-18);
            prev = cur;
        }
        assert!((lr_at(100, &cfg) - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn adamw_noop_when_everything_zero() {
        let mut model = build_model(&tiny_model_cfg(), &mut Rng::new(1)).unwrap();
        let before = model.clone();
        let zero_grads: Vec<(String, Tensor)> = {
            let mut v = Vec::new();
            model.for_each_param(|n, t| v.push((n.to_string(), Tensor::zeros(t.shape().to_vec()))));
            v
        };
        let mut opt = OptimizerState::new(&model);
        adamw_step(&mut model, &zero_grads, &mut opt, 1e-3, 0.0, 1).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn adamw_zero_grads_applies_pure_decay() {
        let mut model = build_model(&tiny_model_cfg(), &mut Rng::new(2)).unwrap();
        let before = model.clone();
        let zero_grads: Vec<(String, Tensor)> = {
            let mut v = Vec::new();
            model.for_each_param(|n, t| v.push((n.to_string(), Tensor::zeros(t.shape().to_vec()))));
            v
        };
        let mut opt = OptimizerState::new(&model);
        let (lr, wd) = (1e-2, 0.5);
        adamw_step(&mut model, &zero_grads, &mut opt, lr, wd, 1).unwrap();
        let factor = 1.0 - lr * wd;
        let mut idx = 0;
        let mut expected: Vec<(String, Tensor)> = Vec::new();
        before.for_each_param(|n, t| {
            let want = if Model::decay_exempt(n) { t.clone() } else { t.scale(factor) };
            expected.push((n.to_string(), want));
        });
        model.for_each_param(|n, t| {
            assert_eq!(t, &expected[idx].1, "decay mismatch for {n}");
            idx += 1;
        });
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        // Independent scalar AdamW, one step from zero moments.
        fn reference(w: f64, g: f64, lr: f64, wd: f64, b1: f64, b2: f64, eps: f64, decay: bool) -> f64 {
            let mut w = w;
            if decay {
                w *= 1.0 - lr * wd;
            }
            let m = (1.0 - b1) * g;
            let v = (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1);
            let v_hat = v / (1.0 - b2);
            w - lr * m_hat / (v_hat.sqrt() + eps)
        }
        let mut model = build_model(&tiny_model_cfg(), &mut Rng::new(3)).unwrap();
        let before = model.clone();
        let mut rng = Rng::new(4);
        let mut grads: Vec<(String, Tensor)> = Vec::new();
        model.for_each_param(|n, t| {
            grads.push((n.to_string(), Tensor::zeros(t.shape().to_vec())));
        });
        for (_, g) in &mut grads {
            *g = rng.gaussian(g.shape().to_vec(), 0.0, 1.0).unwrap();
        }
        let mut opt = OptimizerState::new(&model);
        let (lr, wd) = (7e-4, 0.2);
        adamw_step(&mut model, &grads, &mut opt, lr, wd, 1).unwrap();
        let mut idx = 0usize;
        let mut flat_before: Vec<(String, Tensor)> = Vec::new();
        before.for_each_param(|n, t| flat_before.push((n.to_string(), t.clone())));
        model.for_each_param(|n, t| {
            let (bn, bt) = &flat_before[idx];
            assert_eq!(bn, n);
            let g = &grads[idx].1;
            let decay = !Model::decay_exempt(n);
            for ((wv, bv), gv) in t.data().iter().zip(bt.data()).zip(g.data()) {
                let want = reference(*bv, *gv, lr, wd, opt.beta1, opt.beta2, opt.epsilon, decay);
                assert!((wv - want).abs() < 1e-12, "{n}: {wv} vs {want}");
            }
            idx += 1;
        });
    }

    #[test]
    fn decoupled_decay_compounds_exactly() {
        // With zero gradients, each step multiplies decayed parameters by
        // (1 - lr_t λ); verify bitwise against a scalar replay.
        let mut model = build_model(&tiny_model_cfg(), &mut Rng::new(5)).unwrap();
        let w0 = model.params.layers[0].wq.at(0, 0);
        let zero_grads: Vec<(String, Tensor)> = {
            let mut v = Vec::new();
            model.for_each_param(|n, t| v.push((n.to_string(), Tensor::zeros(t.shape().to_vec()))));
            v
        };
        let mut opt = OptimizerState::new(&model);
        let cfg = TrainConfig { steps: 7, warmup_steps: 3, ..tiny_train_cfg() };
        let mut expected = w0;
        for step in 1..=7 {
            let lr = lr_at(step, &cfg);
            adamw_step(&mut model, &zero_grads, &mut opt, lr, cfg.weight_decay, step).unwrap();
            expected *= 1.0 - lr * cfg.weight_decay;
        }
        assert_eq!(model.params.layers[0].wq.at(0, 0), expected);
        // Gains untouched.
        assert!(model.params.layers[0].attn_gain.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut model = build_model(&tiny_model_cfg(), &mut Rng::new(6)).unwrap();
        let before = model.clone();
        let mut grads: Vec<(String, Tensor)> = Vec::new();
        model.for_each_param(|n, t| grads.push((n.to_string(), Tensor::zeros(t.shape().to_vec()))));
        grads[3].1.data_mut()[0] = f64::NAN;
        let mut opt = OptimizerState::new(&model);
        let err = adamw_step(&mut model, &grads, &mut opt, 1e-3, 0.1, 9).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { step: 9, .. }));
        assert_eq!(model, before, "rejected step must not mutate parameters");
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn zero_steps_returns_initialized_model_with_step0_probe() {
        let run = train_run(&tiny_model_cfg(), &TrainConfig { steps: 0, warmup_steps: 0, ..tiny_train_cfg() }).unwrap();
        assert_eq!(run.timeline.len(), 1);
        assert_eq!(run.timeline[0].step, 0);
        let fresh = build_model(&tiny_model_cfg(), &mut Rng::new(11).substream(&[0x494e_4954])).unwrap();
        assert_eq!(run.model, fresh);
    }

    #[test]
    fn fresh_model_loss_near_ln_vocab() {
        let run = train_run(&tiny_model_cfg(), &TrainConfig { steps: 0, warmup_steps: 0, ..tiny_train_cfg() }).unwrap();
        let ln_v = (tiny_model_cfg().vocab_size as f64).ln();
        assert!((run.timeline[0].ce - ln_v).abs() < 0.5, "ce {} vs ln V {ln_v}", run.timeline[0].ce);
    }

    #[test]
    fn training_is_deterministic_and_learns_a_little() {
        let cfg = TrainConfig { steps: 12, ..tiny_train_cfg() };
        let a = train_run(&tiny_model_cfg(), &cfg).unwrap();
        let b = train_run(&tiny_model_cfg(), &cfg).unwrap();
        assert_eq!(a.model, b.model, "same config + seed must reproduce bitwise");
        let rows_a: Vec<(usize, f64)> = a.timeline.iter().map(|r| (r.step, r.loss)).collect();
        let rows_b: Vec<(usize, f64)> = b.timeline.iter().map(|r| (r.step, r.loss)).collect();
        assert_eq!(rows_a, rows_b);
        assert!(a.timeline.last().unwrap().loss < a.timeline[0].loss, "loss should drop");
        // Probe rows at 0, probe_every multiples, and the final step.
        assert_eq!(
            a.timeline.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 2, 4, 6, 8, 10, 12]
        );
    }

    #[test]
    fn corpus_too_small_is_reported() {
        let cfg = TrainConfig {
            corpus: CorpusSource::Synthetic { bytes: 300, seed: 1 },
            ..tiny_train_cfg()
        };
        assert!(matches!(
            train_run(&tiny_model_cfg(), &cfg),
            Err(TrainError::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn probe_batch_is_disjoint_from_training_windows() {
        let corpus = Corpus::from_bytes(synthetic_corpus(50_000, 9));
        let t = 16;
        let n = corpus.n_windows(t);
        let split = split_windows(n, 2).unwrap();
        assert_eq!(split.n_train + split.n_holdout, n);
        assert!(split.n_holdout >= 16);
        // Probe batch uses windows n_train..n_train+8, training uses 0..n_train.
        assert!(split.n_train > 0);
    }

    #[test]
    fn moe_training_runs() {
        let mut mc = tiny_model_cfg();
        mc.moe = Some(crate::model::MoeConfig { n_experts: 4, top_k: 2, n_shared: 1, ..Default::default() });
        let cfg = TrainConfig { steps: 3, probe_every: 3, ..tiny_train_cfg() };
        let run = train_run(&mc, &cfg).unwrap();
        assert!(run.timeline.iter().all(|r| r.lb > 0.0));
        for layer in &run.model.params.layers {
            assert!(matches!(layer.ffn, FfnParams::Moe(_)));
        }
    }
}
