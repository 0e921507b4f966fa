//! Command implementations behind the `freqmoe` binary.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use freqmoe::checkpoint::Checkpoint;
use freqmoe::config::{Prepared, RunConfig, SYNTHETIC_SOURCE};
use freqmoe::data::{gen_synthetic, load_csv, write_synthetic_csv, SyntheticSpec};
use freqmoe::evaluation::{count_macs, evaluate, export_gate_trace, EfficiencyReport, GateTrace, MetricReport};
use freqmoe::model::Model;
use freqmoe::training::{fit_with, History};
use freqmoe::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SWEEP_HEADER: &str = "axis_value,mse,mae";

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Compatibility(_) => 1,
        Error::InvalidInput(_) | Error::Parse { .. } => 2,
        Error::Io { .. } => 3,
        Error::State(_) | Error::Invariant(_) => 4,
    }
}

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub allow_offgrid: bool,
}

pub fn load_config(path: &Path, overrides: Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.allow_offgrid |= overrides.allow_offgrid;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    pub prepared: Prepared,
}

/// Prepares data, builds and trains a model. Progress goes to `progress`.
pub fn train_model(cfg: &RunConfig, progress: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepared = cfg.prepare()?;
    let mut model = Model::new(cfg.model, cfg.seed)?;
    let history = fit_with(&mut model, &prepared.train, &prepared.val, &cfg.train_config(), |r| {
        let _ = writeln!(
            progress,
            "epoch {:>3}  train_mse {:.6}  val_mse {:.6}  lr {:e}",
            r.epoch, r.train_mse, r.val_mse, r.lr
        );
    })?;
    Ok(TrainOutcome {
        model,
        history,
        prepared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub best_val_mse: f64,
}

/// Trains and writes the checkpoint and history CSV.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let outcome = train_model(cfg, progress)?;
    let ck_path = checkpoint.map_or_else(|| out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let hist_path = out_dir.join(HISTORY_FILE);
    Checkpoint::new(cfg.clone(), outcome.model)?.save(&ck_path)?;
    outcome.history.write_csv(&hist_path)?;
    Ok(TrainArtifacts {
        checkpoint: ck_path,
        history: hist_path,
        best_val_mse: outcome.history.best_val_mse,
    })
}

/// Evaluates a checkpoint on the test split of its own dataset, or of
/// `dataset` if given.
pub fn cmd_eval(checkpoint: &Path, dataset: Option<&str>, horizon: Option<usize>) -> Result<MetricReport> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(h) = horizon {
        if h != ck.config.model.horizon {
            return Err(Error::Compatibility(format!(
                "checkpoint forecasts {} steps, evaluation asks for {h}",
                ck.config.model.horizon
            )));
        }
    }
    let mut cfg = ck.config.clone();
    if let Some(source) = dataset {
        cfg.data.source = source.to_string();
        cfg.data.name = None;
    }
    let prepared = cfg.prepare()?;
    if prepared.test.channels == 0 {
        return Err(Error::InvalidInput("dataset has no channels".into()));
    }
    let mut report = evaluate(&ck.model, &prepared.test)?;
    report.dataset = prepared.name;
    report.seed = cfg.seed;
    report.config_hash = ck.config.hash();
    Ok(report)
}

/// Writes the synthetic benchmark series.
pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let ds = gen_synthetic(spec)?;
    write_synthetic_csv(&ds, out)
}

/// Parameter and MAC accounting. `channels` defaults to the dataset's
/// channel count when it can be read, else 1.
pub fn cmd_report(cfg: &RunConfig, channels: Option<usize>) -> Result<EfficiencyReport> {
    let channels = match channels {
        Some(c) => c,
        None if cfg.data.source == SYNTHETIC_SOURCE => 1,
        None => load_csv(&cfg.data.source).map(|d| d.n_channels()).unwrap_or(1),
    };
    Ok(count_macs(&cfg.model, channels))
}

/// Exports the gate trace of a checkpoint over its test split.
pub fn cmd_gatetrace(checkpoint: &Path, dataset: Option<&str>, out: &Path) -> Result<GateTrace> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(source) = dataset {
        cfg.data.source = source.to_string();
        cfg.data.name = None;
    }
    let prepared = cfg.prepare()?;
    export_gate_trace(&ck.model, &prepared.test, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Experts,
    Blocks,
}

impl SweepAxis {
    pub fn values(self, cfg: &RunConfig) -> &[usize] {
        match self {
            SweepAxis::Experts => &cfg.sweep.experts,
            SweepAxis::Blocks => &cfg.sweep.blocks,
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: usize) {
        match self {
            SweepAxis::Experts => cfg.model.experts = value,
            SweepAxis::Blocks => cfg.model.blocks = value,
        }
    }

    fn field(self) -> &'static str {
        match self {
            SweepAxis::Experts => "sweep.experts",
            SweepAxis::Blocks => "sweep.blocks",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub mse: f64,
    pub mae: f64,
}

fn read_sweep_rows(path: &Path) -> Result<BTreeSet<usize>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeSet::new()),
        Err(e) => return Err(Error::Io { path: path.into(), source: e }),
    };
    let mut done = BTreeSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cell = line.split(',').next().unwrap_or("");
        let value = cell.trim().parse::<usize>().map_err(|_| Error::Parse {
            row: i + 1,
            column: 1,
            message: format!("`{cell}` is not a sweep value"),
        })?;
        done.insert(value);
    }
    Ok(done)
}

/// Trains one model per axis value with the shared seed and appends
/// `axis_value,mse,mae` rows to `out`. Values already present in `out` are
/// skipped. With `parallel`, pending values train on separate threads; rows
/// are still written in configuration order.
pub fn cmd_sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    out: &Path,
    parallel: bool,
    progress: &mut (dyn Write + Send),
) -> Result<Vec<SweepRow>> {
    let values = axis.values(cfg).to_vec();
    if values.is_empty() {
        return Err(Error::Config {
            field: axis.field().into(),
            message: "no values to sweep".into(),
        });
    }
    let done = read_sweep_rows(out)?;
    let mut pending = Vec::new();
    for &v in &values {
        if done.contains(&v) || pending.iter().any(|c: &RunConfig| axis.values_of(c) == v) {
            continue;
        }
        let mut run = cfg.clone();
        axis.apply(&mut run, v);
        run.validate()?;
        pending.push(run);
    }

    let run_one = |run: &RunConfig, progress: &mut dyn Write| -> Result<SweepRow> {
        let outcome = train_model(run, progress)?;
        let report = evaluate(&outcome.model, &outcome.prepared.test)?;
        Ok(SweepRow {
            value: axis.values_of(run),
            mse: report.mse,
            mae: report.mae,
        })
    };

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .map_err(|e| Error::Io { path: out.into(), source: e })?;
    let io = |e| Error::Io { path: out.into(), source: e };
    if done.is_empty() && file.metadata().map_err(io)?.len() == 0 {
        writeln!(file, "{SWEEP_HEADER}").map_err(io)?;
    }

    let mut rows = Vec::new();
    if parallel {
        let results: Vec<Result<SweepRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = pending
                .iter()
                .map(|run| s.spawn(move || run_one(run, &mut std::io::sink())))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invariant("sweep worker panicked".into()))))
                .collect()
        });
        for row in results {
            let row = row?;
            writeln!(file, "{},{},{}", row.value, row.mse, row.mae).map_err(io)?;
            rows.push(row);
        }
    } else {
        for run in &pending {
            let _ = writeln!(progress, "{} = {}", axis.field(), axis.values_of(run));
            let row = run_one(run, progress)?;
            writeln!(file, "{},{},{}", row.value, row.mse, row.mae).map_err(io)?;
            file.flush().map_err(io)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

impl SweepAxis {
    fn values_of(self, cfg: &RunConfig) -> usize {
        match self {
            SweepAxis::Experts => cfg.model.experts,
            SweepAxis::Blocks => cfg.model.blocks,
        }
    }
}
