//! Experiment runner: trains, probes, scores, and writes every artifact of a
//! run directory, with content-hash manifests for integrity. Re-running a
//! config snapshot reproduces every file byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::effectiveness::{effectiveness_report, EffError, EffectivenessReport};
use crate::expconfig::{
    apply_sweep_value, experiment_from_flat, experiment_to_flat, ConfigError, ExperimentConfig,
};
use crate::model::{Model, ModelError, TokenBatch};
use crate::probes::{probe_report, ProbeError, ProbeReport};
use crate::tensor::Tensor;
use crate::theory::{corrupt_for_self_test, default_verification, TheoremCheckReport, TheoryError};
use crate::train::{
    split_windows, train_run, Corpus, ProbeRow, TrainError, TrainRun, PROBE_BATCH_SEQS,
};

#[derive(Debug)]
pub enum ArtifactError {
    Config(ConfigError),
    Train(TrainError),
    Model(ModelError),
    Probe(ProbeError),
    Effectiveness(EffError),
    Theory(TheoryError),
    Io(std::io::Error),
    Integrity { file: String },
    Format { file: String, reason: String },
}

impl fmt::Display for ArtifactError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => write!(f, "{e}"),
            Self::Train(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Probe(e) => write!(f, "{e}"),
            Self::Effectiveness(e) => write!(f, "{e}"),
            Self::Theory(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Integrity { file } => write!(f, "manifest hash mismatch for {file}"),
            Self::Format { file, reason } => write!(f, "bad artifact file {file}: {reason}"),
        }
    }
}

impl std::error::Error for ArtifactError {}

macro_rules! from_err {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for ArtifactError {
            fn from(e: $ty) -> Self {
                Self::$variant(e)
            }
        }
    };
}
from_err!(Config, ConfigError);
from_err!(Train, TrainError);
from_err!(Model, ModelError);
from_err!(Probe, ProbeError);
from_err!(Effectiveness, EffError);
from_err!(Theory, TheoryError);
from_err!(Io, std::io::Error);

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const TIMELINE_CSV: &str = "timeline.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const PROBE_JSON: &str = "probe_report.json";
pub const EFFECTIVENESS_JSON: &str = "effectiveness.json";
pub const MANIFEST: &str = "manifest.json";
pub const CAUSAL_CSV: &str = "causal_matrix.csv";
pub const PERMUTATION_CSV: &str = "permutation_matrix.csv";
pub const THEORY_JSON: &str = "theorem_checks.json";
pub const THEORY_SUMMARY_CSV: &str = "theory_summary.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// Everything a finished run leaves on disk, plus in-memory copies of the
/// final metrics for downstream comparison tables.
pub struct RunArtifact {
    pub name: String,
    pub dir: PathBuf,
    pub final_row: ProbeRow,
    pub probe: ProbeReport,
    pub effectiveness: EffectivenessReport,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), ArtifactError> {
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(bytes)?;
    Ok(())
}

fn timeline_csv(timeline: &[ProbeRow], depth: usize) -> String {
    let mut out = String::from("step,lr,loss,ce,lb,z,last_layer_var");
    for l in 0..depth {
        out.push_str(&format!(",var_{l}"));
    }
    out.push_str(",grad_norm\n");
    for row in timeline {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            row.step, row.lr, row.loss, row.ce, row.lb, row.z, row.last_layer_var
        ));
        for v in &row.per_layer_var {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", row.grad_norm));
    }
    out
}

fn matrix_csv(depth: usize, cells: impl Iterator<Item = (usize, usize, f64)>) -> String {
    let mut grid = vec![vec![None; depth]; depth];
    for (i, j, v) in cells {
        grid[i][j] = Some(v);
    }
    let mut out = String::from("row");
    for j in 0..depth {
        out.push_str(&format!(",col_{j}"));
    }
    out.push('\n');
    for (i, row) in grid.iter().enumerate() {
        out.push_str(&i.to_string());
        for cell in row {
            match cell {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn attention_csv(map: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..map.rows() {
        let row: Vec<String> = map.row(i).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash every file in the run directory (except the manifest itself) and
/// write manifest.json last.
fn write_manifest(dir: &Path) -> Result<(), ArtifactError> {
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != MANIFEST {
                names.push(name);
            }
        }
    }
    names.sort();
    let mut files = BTreeMap::new();
    for name in names {
        let bytes = fs::read(dir.join(&name))?;
        files.insert(name, sha256_hex(&bytes));
    }
    let manifest = serde_json::json!({ "files": files });
    write_file(dir, MANIFEST, format!("{:#}\n", manifest).as_bytes())?;
    Ok(())
}

/// Re-hash every manifest entry; errors name the first mismatching file.
pub fn verify_manifest(dir: &Path) -> Result<(), ArtifactError> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|_| ArtifactError::Format {
        file: manifest_path.display().to_string(),
        reason: "missing manifest".into(),
    })?;
    let parsed: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ArtifactError::Format {
            file: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let files = parsed["files"].as_object().ok_or_else(|| ArtifactError::Format {
        file: manifest_path.display().to_string(),
        reason: "missing files map".into(),
    })?;
    for (name, hash) in files {
        let bytes = fs::read(dir.join(name)).map_err(|_| ArtifactError::Integrity { file: name.clone() })?;
        if sha256_hex(&bytes) != hash.as_str().unwrap_or_default() {
            return Err(ArtifactError::Integrity { file: name.clone() });
        }
    }
    Ok(())
}

/// Build the disjoint fit batch for the usefulness score from held-out
/// windows that follow the probe batch.
fn fit_batch_for(cfg: &ExperimentConfig) -> Result<TokenBatch, ArtifactError> {
    let corpus = Corpus::from_source(&cfg.train.corpus)?;
    let t = cfg.train.seq_len;
    let n_windows = corpus.n_windows(t);
    let split = split_windows(n_windows, cfg.train.batch_size)?;
    let start = split.n_train + PROBE_BATCH_SEQS;
    let available = n_windows.saturating_sub(start);
    let want = PROBE_BATCH_SEQS.min(available.max(1));
    if available == 0 {
        return Err(ArtifactError::Train(TrainError::CorpusTooSmall {
            needed: start + 1,
            got: n_windows,
        }));
    }
    let seqs = (0..want)
        .map(|i| {
            let mut w = corpus.window(t, start + i);
            w.truncate(t);
            w
        })
        .collect();
    Ok(TokenBatch::new(seqs)?)
}

/// Train, probe, score, and write the full artifact set for one config.
/// Metric values never fail a run; only hard errors do.
pub fn run(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<RunArtifact, ArtifactError> {
    let mut cfg = cfg.clone();
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    let out_root = out_override.unwrap_or(&cfg.output_dir).to_path_buf();
    let dir = out_root.join(&cfg.name);
    fs::create_dir_all(&dir)?;

    let TrainRun { model, timeline, probe_batch } = train_run(&cfg.model, &cfg.train)?;
    let probe = probe_report(&model, &probe_batch, &cfg.probes)?;
    let fit_batch = fit_batch_for(&cfg)?;
    let effectiveness = effectiveness_report(&model, &fit_batch, &probe_batch, &cfg.effectiveness)?;

    write_file(&dir, CONFIG_SNAPSHOT, experiment_to_flat(&cfg).as_bytes())?;
    write_file(&dir, TIMELINE_CSV, timeline_csv(&timeline, cfg.model.depth).as_bytes())?;
    model.save_checkpoint(&dir.join(CHECKPOINT))?;
    write_file(
        &dir,
        PROBE_JSON,
        format!("{:#}\n", serde_json::to_value(&probe).expect("serialize")).as_bytes(),
    )?;
    write_file(
        &dir,
        EFFECTIVENESS_JSON,
        format!("{:#}\n", serde_json::to_value(&effectiveness).expect("serialize")).as_bytes(),
    )?;
    write_file(
        &dir,
        CAUSAL_CSV,
        matrix_csv(
            cfg.model.depth,
            effectiveness.causal.cells.iter().map(|c| (c.skipped, c.layer, c.value)),
        )
        .as_bytes(),
    )?;
    write_file(
        &dir,
        PERMUTATION_CSV,
        matrix_csv(
            cfg.model.depth,
            effectiveness
                .permutation
                .cells
                .iter()
                .flat_map(|c| [(c.l1, c.l2, c.value), (c.l2, c.l1, c.value)]),
        )
        .as_bytes(),
    )?;
    if cfg.export_attention && cfg.probes.capture_attention {
        export_attention_maps(&dir, &model, &probe_batch)?;
    }
    write_manifest(&dir)?;

    let final_row = timeline.last().expect("timeline has the step-0 row").clone();
    Ok(RunArtifact { name: cfg.name.clone(), dir, final_row, probe, effectiveness })
}

/// Batch-mean attention map per (layer, head) as raw dense CSV grids.
fn export_attention_maps(dir: &Path, model: &Model, batch: &TokenBatch) -> Result<(), ArtifactError> {
    use crate::model::{forward, TraceOptions};
    let (_, trace) = forward(model, batch, &TraceOptions::everything())?;
    for (l, layer) in trace.layers.iter().enumerate() {
        let Some(maps) = &layer.attn_maps else { continue };
        let n_heads = maps.first().map_or(0, Vec::len);
        for h in 0..n_heads {
            let t = maps[0][h].rows();
            let mut mean = Tensor::zeros(vec![t, t]);
            for seq_maps in maps {
                mean.axpy(1.0 / maps.len() as f64, &seq_maps[h]).map_err(ModelError::from)?;
            }
            write_file(dir, &format!("attn_l{l}_h{h}.csv"), attention_csv(&mean).as_bytes())?;
        }
    }
    Ok(())
}

fn comparison_row(axis: &str, value: f64, seed: u64, art: &RunArtifact) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        art.name,
        axis,
        value,
        seed,
        art.final_row.loss,
        art.final_row.ce,
        art.final_row.last_layer_var,
        art.effectiveness.causal.global,
        art.effectiveness.permutation.global,
        art.effectiveness.usefulness.s_useful,
        format!("{}|{}", art.effectiveness.usefulness.effective, art.effectiveness.usefulness.wasted),
    )
}

pub const COMPARISON_HEADER: &str =
    "run,axis,value,seed,final_loss,final_ce,last_layer_var,s_causal,s_permutation,s_useful,effective_wasted\n";

/// One run per (sweep value, seed) under `<out>/<name>/`, plus a comparison
/// table. Any child hard-failure aborts the sweep; finished children stay on
/// disk.
pub fn sweep(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
    jobs: usize,
) -> Result<Vec<RunArtifact>, ArtifactError> {
    let Some(spec) = cfg.sweep.clone() else {
        // A config without a sweep axis degrades to a single run.
        return Ok(vec![run(cfg, out_override, seed_override)?]);
    };
    let out_root = out_override.unwrap_or(&cfg.output_dir).to_path_buf();
    let sweep_dir = out_root.join(&cfg.name);
    fs::create_dir_all(&sweep_dir)?;
    let seeds = match seed_override {
        Some(s) => vec![s],
        None => spec.seeds.clone(),
    };
    let mut points = Vec::new();
    for &value in &spec.values {
        for &seed in &seeds {
            points.push((value, seed, apply_sweep_value(cfg, spec.axis, value, seed)?));
        }
    }

    let jobs = jobs.max(1);
    let results: Vec<Result<RunArtifact, ArtifactError>> = if jobs == 1 {
        points.iter().map(|(_, _, child)| run(child, Some(&sweep_dir), None)).collect()
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in points.chunks(points.len().div_ceil(jobs)) {
                let sweep_dir = sweep_dir.clone();
                handles.push(scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|(_, _, child)| run(child, Some(&sweep_dir), None))
                        .collect::<Vec<_>>()
                }));
            }
            handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    };

    let mut artifacts = Vec::new();
    for ((value, seed, _), result) in points.iter().zip(results) {
        let art = result?;
        let mut row = String::from(COMPARISON_HEADER);
        row.truncate(0);
        row.push_str(&comparison_row(spec.axis.as_str(), *value, *seed, &art));
        artifacts.push((*value, *seed, art));
    }
    let mut table = String::from(COMPARISON_HEADER);
    for (value, seed, art) in &artifacts {
        table.push_str(&comparison_row(spec.axis.as_str(), *value, *seed, art));
    }
    write_file(&sweep_dir, COMPARISON_CSV, table.as_bytes())?;
    Ok(artifacts.into_iter().map(|(_, _, a)| a).collect())
}

/// Run the default theorem battery; returns the reports and whether all
/// verdicts passed. `self_test_corrupt` is the negative control: tolerances
/// zeroed and bounds halved, so failures are expected.
pub fn verify_theory(
    seed: u64,
    out_dir: Option<&Path>,
    self_test_corrupt: bool,
) -> Result<(Vec<TheoremCheckReport>, bool), ArtifactError> {
    let mut reports = default_verification(seed)?;
    if self_test_corrupt {
        for r in &mut reports {
            corrupt_for_self_test(r);
        }
    }
    let all_pass = reports.iter().all(TheoremCheckReport::pass);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_file(
            dir,
            THEORY_JSON,
            format!("{:#}\n", serde_json::to_value(&reports).expect("serialize")).as_bytes(),
        )?;
        write_file(dir, THEORY_SUMMARY_CSV, theory_summary_csv(&reports).as_bytes())?;
    }
    Ok((reports, all_pass))
}

pub fn theory_summary_csv(reports: &[TheoremCheckReport]) -> String {
    use crate::theory::CheckKind;
    let mut out = String::from("theorem,params,check,kind,reference,empirical,se,verdict\n");
    for r in reports {
        let params = r
            .params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        for c in &r.checks {
            let (kind, reference) = match &c.kind {
                CheckKind::Equality { target, .. } => ("equality", *target),
                CheckKind::Bound { bound } => ("bound", *bound),
                CheckKind::Condition { violations } => ("condition", *violations as f64),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.theorem,
                params,
                c.name,
                kind,
                reference,
                c.empirical,
                c.se,
                if c.pass { "pass" } else { "FAIL" }
            ));
        }
    }
    out
}

/// Merge run timelines into one long-format table (run, step, metric, value)
/// after verifying each directory's manifest.
pub fn report(run_dirs: &[PathBuf]) -> Result<String, ArtifactError> {
    let mut out = String::from("run,step,metric,value\n");
    for dir in run_dirs {
        verify_manifest(dir)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let csv_path = dir.join(TIMELINE_CSV);
        let text = fs::read_to_string(&csv_path).map_err(|_| ArtifactError::Format {
            file: csv_path.display().to_string(),
            reason: "missing timeline".into(),
        })?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ArtifactError::Format {
            file: csv_path.display().to_string(),
            reason: "empty timeline".into(),
        })?;
        let columns: Vec<&str> = header.split(',').collect();
        if columns.first() != Some(&"step") {
            return Err(ArtifactError::Format {
                file: csv_path.display().to_string(),
                reason: "timeline must start with a step column".into(),
            });
        }
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(ArtifactError::Format {
                    file: csv_path.display().to_string(),
                    reason: format!("row width {} != header width {}", fields.len(), columns.len()),
                });
            }
            let step = fields[0];
            for (col, value) in columns.iter().zip(&fields).skip(1) {
                out.push_str(&format!("{name},{step},{col},{value}\n"));
            }
        }
    }
    Ok(out)
}

/// Built-in desk-scale presets. Names mirror the experiment families.
pub fn preset(name: &str) -> Option<String> {
    let text = match name {
        "smoke" => "\
name = smoke
model.depth = 2
model.d_model = 32
model.n_query_heads = 4
model.n_kv_heads = 4
model.mlp_hidden = 64
model.max_seq_len = 40
train.steps = 30
train.batch_size = 4
train.seq_len = 32
train.lr_peak = 0.003
train.warmup_steps = 5
train.probe_every = 10
train.corpus = synthetic:300000:7
",
        "depth-sweep" => "\
name = depth-sweep
model.depth = 4
model.d_model = 128
model.n_query_heads = 4
model.n_kv_heads = 4
model.mlp_hidden = 256
model.max_seq_len = 72
train.steps = 250
train.batch_size = 8
train.seq_len = 64
train.lr_peak = 0.003
train.warmup_steps = 25
train.probe_every = 50
train.corpus = synthetic:2000000:7
probes.jacobian = true
sweep.axis = depth
sweep.values = 2,4,8
sweep.seeds = 1,2,3
",
        "wd-sweep" => "\
name = wd-sweep
model.depth = 4
model.d_model = 64
model.n_query_heads = 4
model.n_kv_heads = 4
model.mlp_hidden = 128
model.max_seq_len = 72
train.steps = 250
train.batch_size = 8
train.seq_len = 64
train.lr_peak = 0.003
train.warmup_steps = 25
train.probe_every = 50
train.corpus = synthetic:2000000:7
sweep.axis = weight_decay
sweep.values = 0,0.01,0.1,1.0,3.0
sweep.seeds = 1,2,3
",
        "seqlen-sweep" => "\
name = seqlen-sweep
model.depth = 4
model.d_model = 64
model.n_query_heads = 4
model.n_kv_heads = 4
model.mlp_hidden = 128
model.max_seq_len = 520
train.steps = 512
train.batch_size = 8
train.seq_len = 64
train.lr_peak = 0.003
train.warmup_steps = 25
train.probe_every = 64
train.corpus = synthetic:4000000:7
sweep.axis = seq_len
sweep.values = 64,128,256,512
sweep.seeds = 1,2,3
",
        "gqa-sweep" => "\
name = gqa-sweep
model.depth = 4
model.d_model = 128
model.n_query_heads = 16
model.n_kv_heads = 16
model.mlp_hidden = 256
model.max_seq_len = 72
train.steps = 250
train.batch_size = 8
train.seq_len = 64
train.lr_peak = 0.003
train.warmup_steps = 25
train.probe_every = 50
train.corpus = synthetic:2000000:7
sweep.axis = gqa_groups
sweep.values = 1,4,16
sweep.seeds = 1,2,3
",
        "moe-vs-dense" => "\
name = moe-vs-dense
model.depth = 4
model.d_model = 64
model.n_query_heads = 4
model.n_kv_heads = 4
model.mlp_hidden = 64
model.moe.n_experts = 8
model.moe.top_k = 2
model.moe.n_shared = 0
model.max_seq_len = 72
train.steps = 250
train.batch_size = 8
train.seq_len = 64
train.lr_peak = 0.003
train.warmup_steps = 25
train.probe_every = 50
train.corpus = synthetic:2000000:7
sweep.axis = moe
sweep.values = 0,8
sweep.seeds = 1,2,3
",
        "stacked" => "\
name = stacked
model.depth = 8
model.d_model = 64
model.n_query_heads = 4
model.n_kv_heads = 2
model.mlp_hidden = 64
model.moe.n_experts = 4
model.moe.top_k = 2
model.max_seq_len = 264
train.steps = 150
train.batch_size = 8
train.seq_len = 256
train.weight_decay = 0.1
train.lr_peak = 0.003
train.warmup_steps = 15
train.probe_every = 50
train.corpus = synthetic:3000000:7
",
        _ => return None,
    };
    Some(text.to_string())
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ArtifactError> {
    let text = fs::read_to_string(path)?;
    Ok(experiment_from_flat(&text)?)
}
