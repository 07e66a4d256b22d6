//! Command-line front end: synth, train, predict, evaluate, viz, report.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error. Commands
//! that own an output directory write a resolved config on entry and a
//! completion marker on success; a failure marker flags partial outputs.

mod runcfg;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ghclnet::backbone::BackboneConfig;
use ghclnet::cascade::{cascade_predict, CascadeThresholds};
use ghclnet::checkpoint::{load_checkpoint, save_checkpoint};
use ghclnet::datamodel::{load_manifest, validate_manifest, DatasetManifest, ExpertKind, Split};
use ghclnet::evaluation::{
    builtin_reference, load_reference, persist_run, render_report, run_combined_protocol,
    run_protocol, CCRReport, ProtocolSpec, ReferenceTable,
};
use ghclnet::featviz::{visualize, VizRequest, DEFAULT_UNITS};
use ghclnet::ingestion::{prepare_input_sized, synth_generate, SynthSpec};
use ghclnet::training::{train_expert, TrainConfig};

use runcfg::{begin_run, mark_complete, mark_failed, FileConfig, ProtocolConfig};

#[derive(Parser)]
#[command(
    name = "ghclnet",
    about = "Hierarchical two-expert contact-lens detection pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic three-class iris-like dataset with a manifest.
    Synth(SynthArgs),
    /// Fine-tune one expert on a manifest's TRAIN split.
    Train(TrainArgs),
    /// Run the cascade over manifest records and emit one JSON line each.
    Predict(PredictArgs),
    /// Train both experts under a protocol and report CCR.
    Evaluate(EvaluateArgs),
    /// Render feature-map grids from a checkpoint.
    Viz(VizArgs),
    /// Re-render stored run reports, optionally against reference values.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Images per class per sensor.
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    /// Number of simulated sensors.
    #[arg(long, default_value_t = 2)]
    sensors: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// Noise level in [0, 1].
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config TOML; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which expert to train: "textured" or "lens".
    #[arg(long)]
    expert: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Comma-separated trainable units, e.g. "block3,block5,head".
    #[arg(long)]
    freeze: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    /// Textured-detector checkpoint directory.
    #[arg(long)]
    textured: PathBuf,
    /// Lens-detector checkpoint directory.
    #[arg(long)]
    lens: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which split to score: train, test or all.
    #[arg(long, default_value = "all")]
    split: String,
    /// Output JSONL file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    t_textured: f64,
    #[arg(long, default_value_t = 0.5)]
    t_lens: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// intra | inter | multi | combined
    #[arg(long)]
    protocol: Option<String>,
    /// Manifest paths (repeatable).
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    sensor: Option<String>,
    #[arg(long)]
    train_sensor: Option<String>,
    #[arg(long)]
    test_sensor: Option<String>,
    /// Comma-separated sensor set for the multi protocol.
    #[arg(long)]
    sensors: Option<String>,
    /// Test manifest names for the combined protocol (default: all).
    #[arg(long)]
    test_manifests: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long)]
    t_textured: Option<f64>,
    #[arg(long)]
    t_lens: Option<f64>,
    /// Reference table for the rendered report: "builtin" or a JSON path.
    #[arg(long)]
    reference: Option<String>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated unit ids; defaults cover shallow, mid and deep units.
    #[arg(long)]
    units: Option<String>,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Output PNG path; the JSON sidecar lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories containing report.json (repeatable).
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// "builtin" or a path to a reference JSON table.
    #[arg(long)]
    reference: Option<String>,
    /// Write the rendered table here as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Usage errors exit 2, operational errors exit 1.
enum CliError {
    Usage(String),
    Operational(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Operational(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Viz(args) => cmd_viz(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Operational(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[derive(Serialize)]
struct ResolvedSynth<'a> {
    command: &'a str,
    spec: &'a SynthSpec,
    out_dir: &'a Path,
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        n_per_class: args.per_class,
        image_size: args.size,
        noise_level: args.noise,
        seed: args.seed,
        n_sensors: args.sensors,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let resolved = ResolvedSynth {
        command: "synth",
        spec: &spec,
        out_dir: &args.out,
    };
    let hash = begin_run(&args.out, &resolved)?;

    let run = || -> Result<()> {
        let manifest = synth_generate(&spec, &args.out)?;
        // Per-sensor manifests make every sensor directly usable as a
        // combined-protocol test database.
        for sensor in manifest.sensor_ids().clone() {
            let per = DatasetManifest::new(
                sensor.clone(),
                manifest
                    .records
                    .iter()
                    .filter(|r| r.sensor_id == sensor)
                    .cloned()
                    .collect(),
            )
            .map_err(|e| anyhow!("{e}"))?;
            per.save(&args.out.join(format!("{sensor}.jsonl")))
                .map_err(|e| anyhow!("{e}"))?;
        }
        let report = validate_manifest(&manifest);
        if !report.is_empty() {
            bail!("generated manifest failed validation: {:?}", report.violations);
        }
        println!(
            "wrote {} images across {} sensors to {}",
            manifest.records.len(),
            manifest.sensor_ids().len(),
            args.out.display()
        );
        Ok(())
    };
    finish(&args.out, &hash, run())
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    command: &'a str,
    expert: &'a str,
    manifest: &'a Path,
    out_dir: &'a Path,
    backbone: &'a BackboneConfig,
    train: &'a TrainConfig,
    normalization_mean: [f32; 3],
    normalization_std: [f32; 3],
}

fn parse_expert(s: &str) -> Result<ExpertKind, CliError> {
    match s {
        "textured" | "textured_detector" => Ok(ExpertKind::TexturedDetector),
        "lens" | "lens_detector" => Ok(ExpertKind::LensDetector),
        other => Err(usage(format!(
            "unknown expert {other:?}; expected \"textured\" or \"lens\""
        ))),
    }
}

fn parse_freeze(s: &str) -> ghclnet::FreezePolicy {
    ghclnet::FreezePolicy::new(s.split(',').map(str::trim).filter(|u| !u.is_empty()))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let expert_str = args
        .expert
        .or(file.expert)
        .ok_or_else(|| usage("--expert (or config `expert`) is required"))?;
    let kind = parse_expert(&expert_str)?;
    let manifest_path = args
        .manifest
        .or(file.manifest)
        .ok_or_else(|| usage("--manifest (or config `manifest`) is required"))?;
    let out_dir = args
        .out
        .or(file.out_dir)
        .ok_or_else(|| usage("--out (or config `out_dir`) is required"))?;

    let mut backbone = file.backbone.unwrap_or_default();
    if let Some(w) = args.width_scale {
        backbone.width_scale = w;
    }
    if let Some(s) = args.input_size {
        backbone.input_size = s;
    }
    let mut train = file.train.unwrap_or_default();
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(s) = args.seed {
        train.seed = s;
        backbone.init_seed = s;
    }
    if let Some(f) = &args.freeze {
        train.freeze_policy = parse_freeze(f);
    }
    train.validate().map_err(|e| usage(e.to_string()))?;
    backbone.validate().map_err(|e| usage(e.to_string()))?;
    train
        .freeze_policy
        .validate(&backbone)
        .map_err(|e| usage(e.to_string()))?;

    let resolved = ResolvedTrain {
        command: "train",
        expert: kind.as_str(),
        manifest: &manifest_path,
        out_dir: &out_dir,
        backbone: &backbone,
        train: &train,
        normalization_mean: ghclnet::ingestion::NORM_MEAN,
        normalization_std: ghclnet::ingestion::NORM_STD,
    };
    let hash = begin_run(&out_dir, &resolved)?;

    let run = || -> Result<()> {
        let manifest = load_manifest(&manifest_path).with_context(|| "cannot load manifest")?;
        let (model, history) = train_expert(kind, &manifest, &train, &backbone)?;
        save_checkpoint(&model, &out_dir.join("checkpoint"))?;
        fs::write(
            out_dir.join("history.json"),
            serde_json::to_vec_pretty(&history)?,
        )?;
        let last = history.epochs.last().expect("at least one epoch");
        println!(
            "trained {} for {} epochs: final loss {:.4}, accuracy {:.3}",
            kind, train.epochs, last.mean_loss, last.accuracy
        );
        Ok(())
    };
    finish(&out_dir, &hash, run())
}

#[derive(Serialize)]
struct PredictLine<'a> {
    sample_id: &'a str,
    label: &'a str,
    p_textured: f64,
    p_lens: f64,
    deciding_expert: &'a str,
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let thresholds = CascadeThresholds::new(args.t_textured, args.t_lens)
        .map_err(|e| usage(e.to_string()))?;
    let split = match args.split.as_str() {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        "all" => None,
        other => return Err(usage(format!("unknown split {other:?}"))),
    };

    let run = || -> Result<()> {
        let textured = load_checkpoint(&args.textured).context("textured checkpoint")?;
        let lens = load_checkpoint(&args.lens).context("lens checkpoint")?;
        let manifest = load_manifest(&args.manifest).context("manifest")?;
        let records: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| split.map_or(true, |s| r.split == s))
            .collect();

        let mut out: Box<dyn std::io::Write> = match &args.out {
            Some(path) => Box::new(fs::File::create(path).context("cannot create output")?),
            None => Box::new(std::io::stdout()),
        };
        for chunk in records.chunks(32) {
            let images = chunk
                .iter()
                .map(|r| {
                    prepare_input_sized(&r.resolved_path, textured.config.input_size)
                        .with_context(|| format!("sample {}", r.sample_id))
                })
                .collect::<Result<Vec<_>>>()?;
            let decisions = cascade_predict(&textured, &lens, &images, &thresholds)?;
            for (record, decision) in chunk.iter().zip(decisions) {
                let line = PredictLine {
                    sample_id: &record.sample_id,
                    label: decision.label.as_str(),
                    p_textured: decision.p_textured,
                    p_lens: decision.p_lens,
                    deciding_expert: decision.deciding_expert.as_str(),
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    };
    run().map_err(CliError::from)
}

#[derive(Serialize)]
struct ResolvedEvaluate<'a> {
    command: &'a str,
    protocol: &'a ProtocolConfig,
    manifests: &'a [PathBuf],
    out_dir: &'a Path,
    backbone: &'a BackboneConfig,
    train: &'a TrainConfig,
    thresholds: &'a CascadeThresholds,
    normalization_mean: [f32; 3],
    normalization_std: [f32; 3],
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut proto = file.protocol.unwrap_or_default();
    if let Some(v) = args.protocol {
        proto.variant = Some(v);
    }
    if let Some(s) = args.sensor {
        proto.sensor = Some(s);
    }
    if let Some(s) = args.train_sensor {
        proto.train_sensor = Some(s);
    }
    if let Some(s) = args.test_sensor {
        proto.test_sensor = Some(s);
    }
    if let Some(s) = args.sensors {
        proto.sensors = Some(s.split(',').map(|x| x.trim().to_string()).collect());
    }
    if let Some(s) = args.test_manifests {
        proto.test_manifests = Some(s.split(',').map(|x| x.trim().to_string()).collect());
    }

    let mut manifest_paths = file.manifests.unwrap_or_default();
    if let Some(single) = file.manifest {
        manifest_paths.push(single);
    }
    if !args.manifests.is_empty() {
        manifest_paths = args.manifests.clone();
    }
    if manifest_paths.is_empty() {
        return Err(usage("at least one --manifest is required"));
    }
    let out_dir = args
        .out
        .or(file.out_dir)
        .ok_or_else(|| usage("--out (or config `out_dir`) is required"))?;

    let mut backbone = file.backbone.unwrap_or_default();
    if let Some(w) = args.width_scale {
        backbone.width_scale = w;
    }
    if let Some(s) = args.input_size {
        backbone.input_size = s;
    }
    let mut train = file.train.unwrap_or_default();
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(s) = args.seed {
        train.seed = s;
        backbone.init_seed = s;
    }
    if let Some(f) = &args.freeze {
        train.freeze_policy = parse_freeze(f);
    }
    let mut thresholds = file.thresholds.unwrap_or_default();
    if let Some(t) = args.t_textured {
        thresholds.t_textured = t;
    }
    if let Some(t) = args.t_lens {
        thresholds.t_lens = t;
    }

    train.validate().map_err(|e| usage(e.to_string()))?;
    backbone.validate().map_err(|e| usage(e.to_string()))?;
    train
        .freeze_policy
        .validate(&backbone)
        .map_err(|e| usage(e.to_string()))?;
    thresholds.validate().map_err(|e| usage(e.to_string()))?;

    let reference = load_reference_arg(args.reference.as_deref())?;

    let manifests = manifest_paths
        .iter()
        .map(|p| load_manifest(p).map_err(|e| anyhow!("{e}")))
        .collect::<Result<Vec<_>>>()?;

    let variant = proto
        .variant
        .clone()
        .ok_or_else(|| usage("--protocol is required (intra|inter|multi|combined)"))?;
    enum Plan {
        Single(ProtocolSpec),
        Combined(Vec<String>),
    }
    let plan = match variant.as_str() {
        "intra" => Plan::Single(ProtocolSpec::Intra {
            sensor: proto
                .sensor
                .clone()
                .ok_or_else(|| usage("intra protocol needs --sensor"))?,
        }),
        "inter" => Plan::Single(ProtocolSpec::Inter {
            train_sensor: proto
                .train_sensor
                .clone()
                .ok_or_else(|| usage("inter protocol needs --train-sensor"))?,
            test_sensor: proto
                .test_sensor
                .clone()
                .ok_or_else(|| usage("inter protocol needs --test-sensor"))?,
        }),
        "multi" => Plan::Single(ProtocolSpec::Multi {
            sensors: proto
                .sensors
                .clone()
                .ok_or_else(|| usage("multi protocol needs --sensors a,b"))?,
        }),
        "combined" => {
            let tests = proto
                .test_manifests
                .clone()
                .unwrap_or_else(|| manifests.iter().map(|m| m.name.clone()).collect());
            Plan::Combined(tests)
        }
        other => return Err(usage(format!("unknown protocol {other:?}"))),
    };
    if let Plan::Single(spec) = &plan {
        spec.validate().map_err(|e| usage(e.to_string()))?;
    }

    let resolved = ResolvedEvaluate {
        command: "evaluate",
        protocol: &proto,
        manifests: &manifest_paths,
        out_dir: &out_dir,
        backbone: &backbone,
        train: &train,
        thresholds: &thresholds,
        normalization_mean: ghclnet::ingestion::NORM_MEAN,
        normalization_std: ghclnet::ingestion::NORM_STD,
    };
    let hash = begin_run(&out_dir, &resolved)?;

    let run = || -> Result<()> {
        let run = match plan {
            Plan::Single(spec) => run_protocol(&spec, &manifests, &train, &backbone, &thresholds)?,
            Plan::Combined(tests) => {
                run_combined_protocol(&manifests, &tests, &train, &backbone, &thresholds)?
            }
        };
        let echo = serde_json::json!({
            "protocol": proto,
            "backbone": backbone,
            "train": train,
            "thresholds": thresholds,
            "config_hash": hash,
        });
        persist_run(&run, &echo, reference.as_ref(), &out_dir)?;
        print!("{}", render_report(&run.reports, reference.as_ref()));
        Ok(())
    };
    finish(&out_dir, &hash, run())
}

fn cmd_viz(args: VizArgs) -> Result<(), CliError> {
    if args.channels < 1 {
        return Err(usage("--channels must be >= 1"));
    }
    let unit_ids: Vec<String> = match &args.units {
        Some(s) => s
            .split(',')
            .map(|u| u.trim().to_string())
            .filter(|u| !u.is_empty())
            .collect(),
        None => DEFAULT_UNITS.iter().map(|s| s.to_string()).collect(),
    };
    let request = VizRequest {
        checkpoint: args.checkpoint,
        image: args.image,
        unit_ids,
        channels_per_unit: args.channels,
        output: args.out,
    };
    let sidecar = visualize(&request).map_err(|e| CliError::Operational(anyhow!("{e}")))?;
    println!(
        "wrote {} ({} units x {} channels)",
        request.output.display(),
        sidecar.units.len(),
        request.channels_per_unit
    );
    Ok(())
}

#[derive(Deserialize)]
struct StoredReports {
    reports: Vec<CCRReport>,
}

fn load_reference_arg(arg: Option<&str>) -> Result<Option<ReferenceTable>, CliError> {
    match arg {
        None => Ok(None),
        Some("builtin") | Some("paper_tables") => Ok(Some(builtin_reference())),
        Some(path) => Ok(Some(
            load_reference(Path::new(path)).map_err(|e| CliError::Operational(anyhow!("{e}")))?,
        )),
    }
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let reference = load_reference_arg(args.reference.as_deref())?;
    let run = || -> Result<()> {
        let mut reports = Vec::new();
        for dir in &args.runs {
            let path = dir.join("report.json");
            let bytes =
                fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
            let stored: StoredReports = serde_json::from_slice(&bytes)
                .with_context(|| format!("cannot parse {}", path.display()))?;
            reports.extend(stored.reports);
        }
        let text = render_report(&reports, reference.as_ref());
        print!("{text}");
        if let Some(out) = &args.out {
            fs::write(out, text)?;
        }
        Ok(())
    };
    run().map_err(CliError::from)
}

/// Writes the outcome marker and maps errors to the operational exit code.
fn finish(out_dir: &Path, hash: &str, result: Result<()>) -> Result<(), CliError> {
    match result {
        Ok(()) => {
            mark_complete(out_dir, hash)?;
            Ok(())
        }
        Err(e) => {
            mark_failed(out_dir, &format!("{e:#}"));
            Err(CliError::Operational(e))
        }
    }
}
