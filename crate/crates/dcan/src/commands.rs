//! The four subcommands, callable as library functions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dcan_core::{
    check_cmmd, check_composite, check_mi, DomainDataset, Evaluation, GradCheckReport, KernelSpec,
    MlpModel, Mode, TrainConfig, Trainer,
};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG_ECHO: &str = "config-echo.json";
pub const METRICS: &str = "metrics.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const EMBEDDINGS: &str = "embeddings.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mode: Mode,
    pub steps_run: usize,
    /// Target rows with a known label; accuracy is 0 when there are none.
    pub labeled_count: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub pretrain_accuracy: f64,
    pub source_accuracy: f64,
    /// Fraction of target rows predicted into classes outside the kept
    /// label space, before and after adaptation. Present for partial targets.
    pub absent_fraction_pretrain: Option<f64>,
    pub absent_fraction: Option<f64>,
}

fn summarise(
    cfg: &RunConfig,
    steps_run: usize,
    pre: &Evaluation,
    last: &Evaluation,
    source: &Evaluation,
) -> Summary {
    let absent = |e: &Evaluation| {
        cfg.dataset
            .keep_classes
            .map(|k| e.fraction_predicted_at_or_above(k))
    };
    Summary {
        mode: cfg.train.mode,
        steps_run,
        labeled_count: last.labeled_count,
        accuracy: last.accuracy,
        per_class_accuracy: last.per_class_accuracy.clone(),
        confusion: last.confusion.clone(),
        pretrain_accuracy: pre.accuracy,
        source_accuracy: source.accuracy,
        absent_fraction_pretrain: absent(pre),
        absent_fraction: absent(last),
    }
}

/// Trains per `cfg`, writing every artifact of the output layout into `out`.
/// Relative dataset paths resolve against `base`.
pub fn train(cfg: &RunConfig, base: &Path, out: &Path) -> Result<Summary> {
    cfg.validate()?;
    create_dir(out)?;
    write_json(&out.join(CONFIG_ECHO), &cfg.to_json())?;
    let (source, target) = cfg.dataset.build(cfg.train.seed, base)?;
    log::info!(
        "training on {} source / {} target rows, {} classes, mode {:?}",
        source.len(),
        target.len(),
        source.class_count(),
        cfg.train.mode
    );

    let metrics_path = out.join(METRICS);
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut write_err = None;
    let outcome = Trainer::new(&source, &target, cfg.train.clone())?.run(|m| {
        log::info!(
            "step {} total {:.5} sc {:.5} cmmd {:.5} mi {:.5} pseudo {} acc {:?}",
            m.step,
            m.loss_total,
            m.loss_sc,
            m.loss_cmmd,
            m.loss_mi,
            m.pseudo_count,
            m.target_accuracy
        );
        let line = serde_json::to_string(m).expect("metrics serialise");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&metrics_path, e));
    }
    metrics
        .flush()
        .map_err(|e| CliError::io(&metrics_path, e))?;

    let summary = summarise(
        cfg,
        outcome.steps_run,
        &outcome.pretrain_eval,
        &outcome.final_eval,
        &outcome.source_eval,
    );
    write_json(&out.join(SUMMARY), &summary)?;
    checkpoint::save(&outcome.model, &out.join(CHECKPOINT))?;
    write_embeddings(&outcome.model, &source, &target, &out.join(EMBEDDINGS))?;
    log::info!(
        "target accuracy {:.4} after {} steps",
        summary.accuracy,
        summary.steps_run
    );
    Ok(summary)
}

/// Rows `feature…, domain, label, predicted`; source rows first.
pub fn write_embeddings(
    model: &MlpModel,
    source: &DomainDataset,
    target: &DomainDataset,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let to_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut header: Vec<String> = (0..model.feature_dim()).map(|j| format!("f{j}")).collect();
    header.extend(["domain", "label", "predicted"].map(String::from));
    w.write_record(&header).map_err(to_err)?;
    for (tag, ds) in [("source", source), ("target", target)] {
        let trace = model.forward(ds.x())?;
        for ((row, label), pred) in trace
            .features
            .row_iter()
            .zip(ds.labels())
            .zip(trace.predictions())
        {
            let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            fields.extend([tag.to_string(), label.to_string(), pred.to_string()]);
            w.write_record(&fields).map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Re-creates the datasets from `cfg` and dumps embeddings of a saved model.
pub fn dump_embeddings(
    cfg: &RunConfig,
    base: &Path,
    checkpoint_path: &Path,
    out: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    let model = checkpoint::load(checkpoint_path)?;
    let (source, target) = cfg.dataset.build(cfg.train.seed, base)?;
    checkpoint::check_compatible(
        &model,
        source.input_dim(),
        &cfg.train.hidden,
        source.class_count(),
    )?;
    create_dir(out)?;
    let path = out.join(EMBEDDINGS);
    write_embeddings(&model, &source, &target, &path)?;
    Ok(path)
}

/// Loss-level suites must stay below this relative error.
pub const LOSS_TOLERANCE: f64 = 1e-5;
/// The end-to-end objective through the network must stay below this.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: GradCheckReport,
    pub passed: bool,
}

/// Runs every gradient suite on seeds `seed..seed + trials`.
pub fn gradcheck(seed: u64, trials: u64) -> Result<Vec<SuiteResult>> {
    if trials == 0 {
        return Err(CliError::Usage("trials must be at least 1".into()));
    }
    let partial = TrainConfig {
        mode: Mode::Partial,
        ..TrainConfig::default()
    };
    let ablated = TrainConfig {
        ablation: dcan_core::Ablation {
            no_cmmd: false,
            no_marginal_entropy: true,
        },
        ..TrainConfig::default()
    };
    let kernel = KernelSpec::default();
    type Suite<'a> = (
        &'static str,
        f64,
        Box<dyn Fn(u64) -> dcan_core::Result<GradCheckReport> + 'a>,
    );
    let suites: Vec<Suite> = vec![
        ("cmmd", LOSS_TOLERANCE, Box::new(|s| check_cmmd(s, &kernel))),
        ("mi", LOSS_TOLERANCE, Box::new(|s| check_mi(s, None))),
        // 0.2 keeps the capped branch active; 1.5 exercises the other branch.
        (
            "partial_mi_capped",
            LOSS_TOLERANCE,
            Box::new(|s| check_mi(s, Some(0.2))),
        ),
        (
            "partial_mi_uncapped",
            LOSS_TOLERANCE,
            Box::new(|s| check_mi(s, Some(1.5))),
        ),
        (
            "composite_uda",
            COMPOSITE_TOLERANCE,
            Box::new(|s| check_composite(s, &TrainConfig::default())),
        ),
        (
            "composite_partial",
            COMPOSITE_TOLERANCE,
            Box::new(|s| check_composite(s, &partial)),
        ),
        (
            "composite_no_h2",
            COMPOSITE_TOLERANCE,
            Box::new(|s| check_composite(s, &ablated)),
        ),
    ];
    let mut results = Vec::new();
    for (suite, tolerance, run) in suites {
        let mut worst: Option<GradCheckReport> = None;
        for s in seed..seed + trials {
            let r = run(s)?;
            if worst
                .as_ref()
                .is_none_or(|w| r.max_rel_error > w.max_rel_error)
            {
                worst = Some(r);
            }
        }
        let worst = worst.expect("trials >= 1");
        results.push(SuiteResult {
            suite,
            tolerance,
            max_rel_error: worst.max_rel_error,
            passed: worst.passes(tolerance),
            worst,
        });
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchN,
    KeepClasses,
    Gamma0,
    Lambda0,
    Lambda1,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BatchN => "batch_n",
            SweepAxis::KeepClasses => "keep_classes",
            SweepAxis::Gamma0 => "gamma0",
            SweepAxis::Lambda0 => "lambda0",
            SweepAxis::Lambda1 => "lambda1",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(CliError::Usage(format!(
                    "{} takes whole numbers, got {value}",
                    self.name()
                )))
            }
        };
        let mut c = cfg.clone();
        match self {
            SweepAxis::BatchN => c.train.batch_n = count()?,
            SweepAxis::KeepClasses => c.dataset.keep_classes = Some(count()?),
            SweepAxis::Gamma0 => c.train.gamma0 = value,
            SweepAxis::Lambda0 => c.train.lambda0 = value,
            SweepAxis::Lambda1 => c.train.lambda1 = value,
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: Option<f64>,
    pub absent_fraction: Option<f64>,
    pub error: Option<String>,
}

/// One training run per value, each in its own subdirectory of `out`. A
/// failing run is recorded and the sweep continues.
pub fn sweep(
    cfg: &RunConfig,
    base: &Path,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let runs = values
        .iter()
        .map(|&v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for (&value, run_cfg) in values.iter().zip(&runs) {
        let dir = out.join(format!("{}-{value}", axis.name()));
        let row = match train(run_cfg, base, &dir) {
            Ok(s) => SweepRow {
                value,
                accuracy: Some(s.accuracy),
                absent_fraction: s.absent_fraction,
                error: None,
            },
            Err(e) => {
                log::warn!("{} = {value} failed: {e}", axis.name());
                SweepRow {
                    value,
                    accuracy: None,
                    absent_fraction: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    write_json(
        &out.join("sweep.json"),
        &serde_json::json!({ "axis": axis.name(), "runs": rows }),
    )?;
    let csv_path = out.join("sweep.csv");
    let file = File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let to_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", csv_path.display()));
    w.write_record([axis.name(), "accuracy", "absent_fraction", "error"])
        .map_err(to_err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.value.to_string(),
            opt(r.accuracy),
            opt(r.absent_fraction),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    Ok(rows)
}
