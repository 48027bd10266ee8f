//! Flat key/value experiment configs with dotted section paths.
//!
//! Grammar, one entry per line:
//!   `key.path = value`    (everything after the first `=` is the value)
//!   `# comment` and blank lines are ignored.
//! Values are integers, reals, booleans (`true`/`false`), comma-separated
//! number lists, or strings. Unknown keys are errors; every message carries
//! the field path.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use crate::model::{ModelConfig, MoeConfig};
use crate::probes::ProbeConfig;
use crate::effectiveness::UsefulnessConfig;
use crate::train::{CorpusSource, TrainConfig};

#[derive(Debug)]
pub enum ConfigError {
    Parse { line: usize, reason: String },
    UnknownKey { path: String },
    MissingField { path: String },
    BadValue { path: String, reason: String },
    Invalid { path: String, reason: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse { line, reason } => write!(f, "config line {line}: {reason}"),
            Self::UnknownKey { path } => write!(f, "unknown config key: {path}"),
            Self::MissingField { path } => write!(f, "missing config field: {path}"),
            Self::BadValue { path, reason } => write!(f, "bad value for {path}: {reason}"),
            Self::Invalid { path, reason } => write!(f, "invalid {path}: {reason}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Sweep axes mirroring the experiment families: depth, weight decay,
/// sequence length (equal compute), GQA group size, and MoE expert count
/// (0 = dense).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Depth,
    WeightDecay,
    SeqLen,
    GqaGroups,
    Moe,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Depth => "depth",
            Self::WeightDecay => "weight_decay",
            Self::SeqLen => "seq_len",
            Self::GqaGroups => "gqa_groups",
            Self::Moe => "moe",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "depth" => Some(Self::Depth),
            "weight_decay" => Some(Self::WeightDecay),
            "seq_len" => Some(Self::SeqLen),
            "gqa_groups" => Some(Self::GqaGroups),
            "moe" => Some(Self::Moe),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probes: ProbeConfig,
    pub export_attention: bool,
    pub effectiveness: UsefulnessConfig,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::small(4, 64, 4),
            train: TrainConfig::default(),
            probes: ProbeConfig::default(),
            export_attention: false,
            effectiveness: UsefulnessConfig::default(),
            sweep: None,
        }
    }
}

/// Parse `key = value` lines into an ordered map, rejecting duplicates.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: i + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Parse { line: i + 1, reason: "empty key".into() });
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Parse { line: i + 1, reason: format!("duplicate key {key}") });
        }
    }
    Ok(map)
}

struct Schema {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl Schema {
    fn new(map: BTreeMap<String, String>) -> Self {
        Self { map, used: Default::default() }
    }

    fn raw(&mut self, path: &str) -> Option<String> {
        self.used.insert(path.to_string());
        self.map.get(path).cloned()
    }

    fn get_usize(&mut self, path: &str, default: usize) -> Result<usize, ConfigError> {
        match self.raw(path) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                path: path.into(),
                reason: format!("expected non-negative integer, got {v:?}"),
            }),
        }
    }

    fn get_u64(&mut self, path: &str, default: u64) -> Result<u64, ConfigError> {
        match self.raw(path) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                path: path.into(),
                reason: format!("expected integer, got {v:?}"),
            }),
        }
    }

    fn get_f64(&mut self, path: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(path) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                path: path.into(),
                reason: format!("expected number, got {v:?}"),
            }),
        }
    }

    fn get_bool(&mut self, path: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(path) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    path: path.into(),
                    reason: format!("expected true or false, got {v:?}"),
                }),
            },
        }
    }

    fn get_string(&mut self, path: &str, default: &str) -> String {
        self.raw(path).unwrap_or_else(|| default.to_string())
    }

    fn get_f64_list(&mut self, path: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.raw(path) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::BadValue {
                        path: path.into(),
                        reason: format!("expected comma-separated numbers, got {v:?}"),
                    })
                })
                .collect(),
        }
    }

    fn reject_unknown(&self) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !self.used.contains(key) {
                return Err(ConfigError::UnknownKey { path: key.clone() });
            }
        }
        Ok(())
    }
}

/// Parse and validate a full experiment config.
pub fn experiment_from_flat(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let defaults = ExperimentConfig::default();
    let mut s = Schema::new(parse_flat(text)?);

    let name = s.get_string("name", &defaults.name);
    let output_dir = PathBuf::from(s.get_string("output_dir", "runs"));

    let moe = if s.map.keys().any(|k| k.starts_with("model.moe.")) {
        let d = MoeConfig::default();
        Some(MoeConfig {
            n_experts: s.get_usize("model.moe.n_experts", d.n_experts)?,
            top_k: s.get_usize("model.moe.top_k", d.top_k)?,
            n_shared: s.get_usize("model.moe.n_shared", d.n_shared)?,
            lb_coeff: s.get_f64("model.moe.lb_coeff", d.lb_coeff)?,
            z_coeff: s.get_f64("model.moe.z_coeff", d.z_coeff)?,
        })
    } else {
        None
    };
    let model = ModelConfig {
        depth: s.get_usize("model.depth", defaults.model.depth)?,
        d_model: s.get_usize("model.d_model", defaults.model.d_model)?,
        n_query_heads: s.get_usize("model.n_query_heads", defaults.model.n_query_heads)?,
        n_kv_heads: s.get_usize("model.n_kv_heads", defaults.model.n_kv_heads)?,
        mlp_hidden: s.get_usize("model.mlp_hidden", defaults.model.mlp_hidden)?,
        vocab_size: s.get_usize("model.vocab_size", defaults.model.vocab_size)?,
        max_seq_len: s.get_usize("model.max_seq_len", defaults.model.max_seq_len)?,
        moe,
        init_std: s.get_f64("model.init_std", defaults.model.init_std)?,
        rope_base: s.get_f64("model.rope_base", defaults.model.rope_base)?,
    };

    let grad_clip = match s.raw("train.grad_clip") {
        None => defaults.train.grad_clip,
        Some(v) if v == "none" => None,
        Some(v) => Some(v.parse().map_err(|_| ConfigError::BadValue {
            path: "train.grad_clip".into(),
            reason: format!("expected number or none, got {v:?}"),
        })?),
    };
    let corpus = match s.raw("train.corpus") {
        None => defaults.train.corpus.clone(),
        Some(v) => v
            .parse::<CorpusSource>()
            .map_err(|reason| ConfigError::BadValue { path: "train.corpus".into(), reason })?,
    };
    let train = TrainConfig {
        steps: s.get_usize("train.steps", defaults.train.steps)?,
        batch_size: s.get_usize("train.batch_size", defaults.train.batch_size)?,
        seq_len: s.get_usize("train.seq_len", defaults.train.seq_len)?,
        lr_peak: s.get_f64("train.lr_peak", defaults.train.lr_peak)?,
        weight_decay: s.get_f64("train.weight_decay", defaults.train.weight_decay)?,
        warmup_steps: s.get_usize("train.warmup_steps", defaults.train.warmup_steps)?,
        lr_min_ratio: s.get_f64("train.lr_min_ratio", defaults.train.lr_min_ratio)?,
        grad_clip,
        seed: s.get_u64("train.seed", defaults.train.seed)?,
        probe_every: s.get_usize("train.probe_every", defaults.train.probe_every)?,
        corpus,
    };

    let probes = ProbeConfig {
        weight_thresholds: s.get_f64_list("probes.weight_thresholds", &defaults.probes.weight_thresholds)?,
        attn_thresholds: s.get_f64_list("probes.attn_thresholds", &defaults.probes.attn_thresholds)?,
        capture_attention: s.get_bool("probes.capture_attention", defaults.probes.capture_attention)?,
        jacobian: s.get_bool("probes.jacobian", defaults.probes.jacobian)?,
        jacobian_position: match s.raw("probes.jacobian_position") {
            None => None,
            Some(v) => Some(v.parse().map_err(|_| ConfigError::BadValue {
                path: "probes.jacobian_position".into(),
                reason: format!("expected integer, got {v:?}"),
            })?),
        },
    };
    let export_attention = s.get_bool("probes.export_attention", false)?;

    let effectiveness = UsefulnessConfig {
        alpha: s.get_f64("effectiveness.alpha", defaults.effectiveness.alpha)?,
        ridge_rel: s.get_f64("effectiveness.ridge_rel", defaults.effectiveness.ridge_rel)?,
        max_fit_tokens: s.get_usize("effectiveness.max_fit_tokens", defaults.effectiveness.max_fit_tokens)?,
    };

    let sweep = match s.raw("sweep.axis") {
        None => {
            // Consume dependent keys for unknown-key hygiene even when absent.
            let _ = s.raw("sweep.values");
            let _ = s.raw("sweep.seeds");
            if s.map.contains_key("sweep.values") || s.map.contains_key("sweep.seeds") {
                return Err(ConfigError::MissingField { path: "sweep.axis".into() });
            }
            None
        }
        Some(axis_raw) => {
            let axis = SweepAxis::parse(&axis_raw).ok_or_else(|| ConfigError::BadValue {
                path: "sweep.axis".into(),
                reason: format!(
                    "expected one of depth|weight_decay|seq_len|gqa_groups|moe, got {axis_raw:?}"
                ),
            })?;
            let values = s.get_f64_list("sweep.values", &[])?;
            if values.is_empty() {
                return Err(ConfigError::MissingField { path: "sweep.values".into() });
            }
            let seeds: Vec<u64> = s
                .get_f64_list("sweep.seeds", &[train.seed as f64])?
                .into_iter()
                .map(|v| v as u64)
                .collect();
            Some(SweepSpec { axis, values, seeds })
        }
    };

    s.reject_unknown()?;

    let cfg = ExperimentConfig {
        name,
        output_dir,
        model,
        train,
        probes,
        export_attention,
        effectiveness,
        sweep,
    };
    validate_experiment(&cfg)?;
    Ok(cfg)
}

fn validate_experiment(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    cfg.model.validate().map_err(|e| ConfigError::Invalid {
        path: "model".into(),
        reason: e.to_string(),
    })?;
    cfg.train.validate().map_err(|e| ConfigError::Invalid {
        path: "train".into(),
        reason: e.to_string(),
    })?;
    if cfg.name.is_empty() || cfg.name.contains('/') || cfg.name.contains(char::is_whitespace) {
        return Err(ConfigError::Invalid {
            path: "name".into(),
            reason: "must be a non-empty token without slashes or spaces".into(),
        });
    }
    if let Some(sweep) = &cfg.sweep {
        for &v in &sweep.values {
            let integral = v.fract() == 0.0 && v >= 0.0;
            match sweep.axis {
                SweepAxis::WeightDecay => {
                    if v < 0.0 {
                        return Err(ConfigError::Invalid {
                            path: "sweep.values".into(),
                            reason: format!("weight decay must be non-negative, got {v}"),
                        });
                    }
                }
                SweepAxis::Depth | SweepAxis::SeqLen => {
                    if !integral || v == 0.0 {
                        return Err(ConfigError::Invalid {
                            path: "sweep.values".into(),
                            reason: format!("{} values must be positive integers, got {v}", sweep.axis.as_str()),
                        });
                    }
                }
                SweepAxis::GqaGroups => {
                    if !integral || v == 0.0 || cfg.model.n_query_heads % (v as usize) != 0 {
                        return Err(ConfigError::Invalid {
                            path: "sweep.values".into(),
                            reason: format!(
                                "group size {v} must divide n_query_heads {}",
                                cfg.model.n_query_heads
                            ),
                        });
                    }
                }
                SweepAxis::Moe => {
                    if !integral {
                        return Err(ConfigError::Invalid {
                            path: "sweep.values".into(),
                            reason: format!("moe expert counts must be non-negative integers, got {v}"),
                        });
                    }
                }
            }
        }
        if sweep.seeds.is_empty() {
            return Err(ConfigError::Invalid {
                path: "sweep.seeds".into(),
                reason: "need at least one seed".into(),
            });
        }
    }
    Ok(())
}

/// Resolve one sweep point into a standalone run config. Sequence-length
/// points keep compute constant: steps scale by base_T / T, rounded down.
pub fn apply_sweep_value(base: &ExperimentConfig, axis: SweepAxis, value: f64, seed: u64) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    cfg.sweep = None;
    cfg.train.seed = seed;
    match axis {
        SweepAxis::Depth => cfg.model.depth = value as usize,
        SweepAxis::WeightDecay => cfg.train.weight_decay = value,
        SweepAxis::SeqLen => {
            let t = value as usize;
            let base_t = base.train.seq_len;
            cfg.train.seq_len = t;
            cfg.model.max_seq_len = cfg.model.max_seq_len.max(t + 1);
            cfg.train.steps = base.train.steps * base_t / t;
            cfg.train.warmup_steps = base.train.warmup_steps.min(cfg.train.steps);
        }
        SweepAxis::GqaGroups => {
            let g = value as usize;
            if cfg.model.n_query_heads % g != 0 {
                return Err(ConfigError::Invalid {
                    path: "sweep.values".into(),
                    reason: format!("group size {g} must divide n_query_heads {}", cfg.model.n_query_heads),
                });
            }
            cfg.model.n_kv_heads = cfg.model.n_query_heads / g;
        }
        SweepAxis::Moe => {
            let e = value as usize;
            if e == 0 {
                cfg.model.moe = None;
            } else {
                let mut moe = cfg.model.moe.clone().unwrap_or_default();
                moe.n_experts = e;
                moe.top_k = moe.top_k.min(e);
                cfg.model.moe = Some(moe);
            }
        }
    }
    let label = match axis {
        SweepAxis::WeightDecay => format!("{value}"),
        _ => format!("{}", value as usize),
    };
    cfg.name = format!("{}-{}{}-s{}", base.name, axis.as_str(), label, seed);
    validate_experiment(&cfg)?;
    Ok(cfg)
}

/// Serialize the resolved config; parsing this text reproduces the run.
pub fn experiment_to_flat(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("name = {}\n", cfg.name));
    s.push_str(&format!("output_dir = {}\n", cfg.output_dir.display()));
    s.push_str(&cfg.model.to_flat());
    s.push_str(&cfg.train.to_flat());
    let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    s.push_str(&format!("probes.weight_thresholds = {}\n", join(&cfg.probes.weight_thresholds)));
    s.push_str(&format!("probes.attn_thresholds = {}\n", join(&cfg.probes.attn_thresholds)));
    s.push_str(&format!("probes.capture_attention = {}\n", cfg.probes.capture_attention));
    s.push_str(&format!("probes.jacobian = {}\n", cfg.probes.jacobian));
    if let Some(p) = cfg.probes.jacobian_position {
        s.push_str(&format!("probes.jacobian_position = {p}\n"));
    }
    s.push_str(&format!("probes.export_attention = {}\n", cfg.export_attention));
    s.push_str(&format!("effectiveness.alpha = {}\n", cfg.effectiveness.alpha));
    s.push_str(&format!("effectiveness.ridge_rel = {}\n", cfg.effectiveness.ridge_rel));
    s.push_str(&format!("effectiveness.max_fit_tokens = {}\n", cfg.effectiveness.max_fit_tokens));
    if let Some(sweep) = &cfg.sweep {
        s.push_str(&format!("sweep.axis = {}\n", sweep.axis.as_str()));
        s.push_str(&format!("sweep.values = {}\n", join(&sweep.values)));
        s.push_str(&format!(
            "sweep.seeds = {}\n",
            sweep.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        ));
    }
    s
}
