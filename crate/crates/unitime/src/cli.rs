//! Command implementations behind the `unitime` binary.
//!
//! Every command is deterministic given (config, seed, platform). Artifacts
//! carry the resolved configuration so they are self-describing: training
//! writes `checkpoint.bin`, `runlog.jsonl`, and `config.resolved.toml` into
//! the output directory; reports are emitted as one JSON record per line.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{default_suite_config, RunConfig};
use crate::data::{self, enumerate_windows, DomainSpec, DomainSplit, SplitPart};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, export_representations, select_instruction, zero_shot_report, InstructionChoice,
    MetricReport,
};
use crate::rng::{for_stream, Stream};
use crate::synth::{self, SuiteSpec};
use crate::training::{train, RunLog, TrainedModel};

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub ablation: Option<String>,
    pub tunability: Option<String>,
}

pub struct TrainOutputs {
    pub checkpoint_path: PathBuf,
    pub runlog_path: PathBuf,
    pub resolved_config_path: PathBuf,
    pub selected_epoch: usize,
    pub model: TrainedModel,
    pub log: RunLog,
}

fn load_all(domains: &[DomainSpec]) -> Result<Vec<DomainSplit>> {
    domains
        .iter()
        .enumerate()
        .map(|(i, spec)| data::load_domain(i, spec))
        .collect()
}

fn write_runlog(path: &Path, log: &RunLog) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in &log.records {
        writeln!(file, "{}", serde_json::to_string(record).expect("record serializes"))?;
    }
    let summary = |metric: &str, value: f64| {
        serde_json::json!({
            "epoch": log.mean_val_curve.len().saturating_sub(1),
            "domain": "*",
            "split": "summary",
            "metric": metric,
            "value": value,
        })
    };
    writeln!(file, "{}", summary("selected_epoch", log.selected_epoch as f64))?;
    writeln!(file, "{}", summary("wall_clock_secs", log.wall_clock_secs))?;
    Ok(())
}

/// `unitime train`: loads the config, trains, writes artifacts. On
/// divergence the artifacts still land (last good model) and the returned
/// error asks the caller for exit code 3.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutputs> {
    let mut config = RunConfig::from_path(&args.config)?;
    let seed = config.resolve_seed(args.seed);
    if let Some(flags) = &args.ablation {
        config.apply_ablation(flags)?;
    }
    if let Some(mode) = &args.tunability {
        config.apply_tunability(mode)?;
    }

    let splits = load_all(&config.domains)?;
    let (model, log) = train(&config.domains, &splits, &config.model, &config.train)?;

    // echo the fully resolved config (vocab size included) into the artifacts
    let mut resolved = config.clone();
    resolved.model = model.config.clone();
    let config_text = resolved.to_toml();

    std::fs::create_dir_all(&args.out)?;
    let resolved_config_path = args.out.join("config.resolved.toml");
    std::fs::write(&resolved_config_path, &config_text)?;

    let checkpoint = Checkpoint::from_trained(
        &model,
        config_text,
        CheckpointMeta {
            seed,
            selected_epoch: model.selected_epoch,
            epochs_run: log.mean_val_curve.len().saturating_sub(1),
            mean_val_curve: log.mean_val_curve.clone(),
            diverged_at_epoch: log.diverged_at_epoch,
        },
    );
    let checkpoint_path = args.out.join("checkpoint.bin");
    checkpoint.save(&checkpoint_path)?;

    let runlog_path = args.out.join("runlog.jsonl");
    write_runlog(&runlog_path, &log)?;

    if let Some(epoch) = log.diverged_at_epoch {
        return Err(Error::Diverged { epoch });
    }
    Ok(TrainOutputs {
        checkpoint_path,
        runlog_path,
        resolved_config_path,
        selected_epoch: model.selected_epoch,
        model,
        log,
    })
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub domain: Option<String>,
    pub horizons: Vec<usize>,
    pub split: SplitPart,
}

/// `unitime evaluate`: per-horizon prefix metrics (model and repeat
/// baseline) for one or all domains of a checkpoint.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<MetricReport>> {
    let (model, _config) = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let selected: Vec<usize> = match &args.domain {
        Some(name) => vec![model
            .domains
            .iter()
            .position(|d| &d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain {name:?}")))?],
        None => (0..model.domains.len()).collect(),
    };
    let mut reports = Vec::new();
    for idx in selected {
        let split = data::load_domain(idx, &model.domains[idx])?;
        reports.push(evaluate(&model, idx, &split, args.split, &args.horizons)?);
    }
    Ok(reports)
}

pub struct ZeroShotArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// "all" or a comma-separated list of training-domain names.
    pub candidates: String,
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
    pub stride: Option<usize>,
    pub seed: Option<u64>,
}

pub struct ZeroShotOutcome {
    pub choice: InstructionChoice,
    pub report: MetricReport,
}

/// `unitime zeroshot`: selects an instruction for unseen data via the probe
/// protocol, then reports metrics on the remaining (non-probe) test windows.
pub fn cmd_zeroshot(args: &ZeroShotArgs) -> Result<ZeroShotOutcome> {
    let (model, run_config) = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let candidates: Vec<usize> = if args.candidates.trim() == "all" {
        (0..model.domains.len()).collect()
    } else {
        args.candidates
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|name| {
                model
                    .domains
                    .iter()
                    .position(|d| d.name == name)
                    .ok_or_else(|| Error::Config(format!("unknown candidate domain {name:?}")))
            })
            .collect::<Result<_>>()?
    };
    if candidates.is_empty() {
        return Err(Error::Config("no candidate instructions selected".into()));
    }

    // window the unseen data; geometry defaults to the first candidate's
    let template = &model.domains[candidates[0]];
    let channels = data::csv_data_columns(&args.data)?;
    let unseen = DomainSpec {
        name: args
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unseen".into()),
        instruction: String::new(),
        channels,
        lookback: args.lookback.unwrap_or(template.lookback),
        horizon: args.horizon.unwrap_or(template.horizon),
        stride: args.stride.unwrap_or(template.stride),
        csv: args.data.display().to_string(),
    };
    let split = data::load_domain(0, &unseen)?;
    let windows = enumerate_windows(0, &split, SplitPart::Test);
    if windows.is_empty() {
        return Err(Error::Eval(format!(
            "unseen data {:?} yields no test windows at lookback {} + horizon {}",
            unseen.csv, unseen.lookback, unseen.horizon
        )));
    }

    let seed = args.seed.or(run_config.train.seed).unwrap_or(0);
    let mut rng = for_stream(seed, Stream::Probe);
    let choice = select_instruction(
        &model,
        &windows,
        &candidates,
        run_config.eval.probe_fraction,
        run_config.eval.split_ratio,
        &mut rng,
    )?;

    let mut is_probe = vec![false; windows.len()];
    for &i in &choice.probe_indices {
        is_probe[i] = true;
    }
    let held_out: Vec<_> = windows
        .iter()
        .enumerate()
        .filter(|(i, _)| !is_probe[*i])
        .map(|(_, w)| w.clone())
        .collect();
    let report = zero_shot_report(&model, &unseen.name, &held_out, choice.candidate, &[])?;
    Ok(ZeroShotOutcome { choice, report })
}

pub struct SynthArgs {
    /// Generate the built-in suite ("default") or from a spec file.
    pub suite: Option<String>,
    pub spec: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

/// `unitime synth`: writes generator CSVs; for the default suite it also
/// writes a ready-to-train `suite.toml` pointing at them.
pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match (&args.suite, &args.spec) {
        (Some(name), None) if name == "default" => {
            for gen in synth::default_suite(args.seed) {
                written.push(synth::write_csv(&gen, &args.out)?);
            }
            let mut config = default_suite_config(&args.out);
            config.train.seed = Some(args.seed);
            let path = args.out.join("suite.toml");
            std::fs::write(&path, config.to_toml())?;
            written.push(path);
        }
        (Some(name), None) => {
            return Err(Error::Config(format!(
                "unknown suite {name:?}; only \"default\" is built in"
            )));
        }
        (None, Some(spec_path)) => {
            let text = std::fs::read_to_string(spec_path).map_err(|e| Error::Data {
                path: spec_path.display().to_string(),
                reason: e.to_string(),
            })?;
            let suite: SuiteSpec =
                toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
            for gen in &suite.generator {
                written.push(synth::write_csv(gen, &args.out)?);
            }
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --suite default or --spec PATH".into(),
            ));
        }
    }
    Ok(written)
}

pub struct ExportReprArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub samples: usize,
    pub seed: Option<u64>,
}

/// `unitime export-repr`: writes the mean-pooled backbone representation of
/// sampled test windows (one JSON row per window) and returns the
/// separation score.
pub fn cmd_export_repr(args: &ExportReprArgs) -> Result<f64> {
    let (model, run_config) = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let splits = load_all(&model.domains)?;
    let seed = args.seed.or(run_config.train.seed).unwrap_or(0);
    let mut rng = for_stream(seed, Stream::Export);
    let (rows, score) = export_representations(&model, &splits, args.samples, &mut rng)?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for row in &rows {
        writeln!(file, "{}", serde_json::to_string(row).expect("row serializes"))?;
    }
    Ok(score)
}

/// Prints a metric report as JSON lines: one record per horizon, then an
/// average record.
pub fn print_report(report: &MetricReport) {
    for h in &report.horizons {
        println!(
            "{}",
            serde_json::json!({
                "domain": report.domain,
                "windows": report.windows,
                "horizon": h.horizon,
                "mse": h.mse,
                "mae": h.mae,
                "repeat_mse": h.repeat_mse,
                "repeat_mae": h.repeat_mae,
            })
        );
    }
    println!(
        "{}",
        serde_json::json!({
            "domain": report.domain,
            "windows": report.windows,
            "horizon": "avg",
            "mse": report.avg_mse,
            "mae": report.avg_mae,
            "repeat_mse": report.avg_repeat_mse,
            "repeat_mae": report.avg_repeat_mae,
        })
    );
}
