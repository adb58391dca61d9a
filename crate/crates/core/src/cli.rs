//! Command-line entry point: `encode-layout`, `datagen`, `train`, `sample`,
//! `eval` and an end-to-end `demo`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::NoiseSchedule;
use crate::checkpoint::load_model;
use crate::datagen::{
    export_synthetic_inputs, load_training_sample, read_manifest, run_datagen, DatagenConfig, FilterRules, PortBinding,
    SourceTag,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalItem, Encoders, Excluded, MetricReport, ModelRunner};
use crate::layout::{encode_layout, LayoutSpec};
use crate::model::{Model, ModelConfig};
use crate::sampler::{sample, SampleRequest, StepTrace};
use crate::synthetic::{generate, SyntheticConfig};
use crate::trainer::{checkpoint_path, train_loop, TrainConfig, TrainingSample};

/// Relative output paths are placed under this directory when it is set.
pub const OUT_ROOT_ENV: &str = "MULTICOMP_OUT";

#[derive(Debug, Parser)]
#[command(name = "multicomp", version, about = "Layout-guided multi-object compositing")]
struct Cli {
    /// More log output; repeat for trace level.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize a layout JSON into the conditioning mask PNG.
    EncodeLayout(EncodeLayoutArgs),
    /// Build a JSONL manifest from raw inputs.
    Datagen(DatagenArgs),
    /// Train on a manifest or on generated shapes.
    Train(TrainArgs),
    /// Composite every manifest record with a trained checkpoint.
    Sample(SampleArgs),
    /// Score generated images against their manifest records.
    Eval(EvalArgs),
    /// Synthetic shapes through datagen, training, sampling and eval.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct EncodeLayoutArgs {
    #[arg(long)]
    layout: PathBuf,
    /// Square output side; `--height`/`--width` override it.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DatagenArgs {
    /// TOML or JSON `DatagenConfig`; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<SourceTag>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bind the model ports to an HTTP service instead of the mocks.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Manifest to train on.
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Train on this many generated shape scenes instead of a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
    /// TOML or JSON with optional `train` and `model` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only the first N records.
    #[arg(long)]
    limit: Option<usize>,
    /// Capture attention and write per-step leakage to `trace.jsonl`.
    #[arg(long)]
    trace: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<record id>.png` for each record.
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Average over all insertion orders, compositing one object at a time
    /// with `--checkpoint`.
    #[arg(long, requires = "checkpoint")]
    sequential: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; must be absent or empty.
    #[arg(long, default_value = "demo")]
    out: PathBuf,
    #[arg(long)]
    train_steps: Option<usize>,
}

/// Failure tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub module: &'static str,
    pub error: Error,
}

impl StageError {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "module": self.module,
                "kind": self.error.kind(),
                "message": self.error.to_string(),
            }
        })
    }
}

trait InModule<T> {
    fn in_module(self, module: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> InModule<T> for Result<T> {
    fn in_module(self, module: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { module, error })
    }
}

type CliResult<T> = std::result::Result<T, StageError>;

fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn log_resolved<T: Serialize>(command: &str, cfg: &T) {
    match serde_json::to_string(cfg) {
        Ok(s) => log::info!("{command}: resolved config {s}"),
        Err(e) => log::warn!("{command}: config not serializable: {e}"),
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training settings plus the model shape, as read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

fn manifest_root(manifest: &Path) -> &Path {
    manifest.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

/// Loads every record of a manifest as a training sample.
pub fn load_dataset(manifest: &Path) -> Result<Vec<TrainingSample>> {
    let root = manifest_root(manifest);
    read_manifest(manifest)?
        .iter()
        .map(|r| load_training_sample(r, root))
        .collect()
}

fn encode_layout_cmd(args: &EncodeLayoutArgs) -> CliResult<()> {
    let layout = LayoutSpec::load(&args.layout).in_module("layout_codec")?;
    let res = (args.height.unwrap_or(args.size), args.width.unwrap_or(args.size));
    log_resolved("encode-layout", &serde_json::json!({"layout": layout, "resolution": res}));
    let mask = encode_layout(&layout, res).in_module("layout_codec")?;
    mask.save_png(&resolve_out(&args.out)).in_module("layout_codec")
}

fn datagen_cmd(args: &DatagenArgs) -> CliResult<()> {
    let base: Option<DatagenConfig> = args.config.as_deref().map(read_config).transpose().in_module("datagen")?;
    let missing = |what: &str| Error::Config(format!("datagen needs --{what} or a config file setting it"));
    let cfg = DatagenConfig {
        source: args
            .source
            .or(base.as_ref().map(|b| b.source))
            .ok_or_else(|| missing("source"))
            .in_module("datagen")?,
        input: args
            .input
            .clone()
            .or(base.as_ref().map(|b| b.input.clone()))
            .ok_or_else(|| missing("input"))
            .in_module("datagen")?,
        manifest: resolve_out(
            &args
                .manifest
                .clone()
                .or(base.as_ref().map(|b| b.manifest.clone()))
                .ok_or_else(|| missing("manifest"))
                .in_module("datagen")?,
        ),
        seed: args.seed.or(base.as_ref().map(|b| b.seed)).unwrap_or(0),
        rules: base.as_ref().map(|b| b.rules.clone()).unwrap_or_default(),
        ports: match &args.endpoint {
            Some(e) => PortBinding::Http { endpoint: e.clone() },
            None => base.map(|b| b.ports).unwrap_or(PortBinding::Mock),
        },
    };
    log_resolved("datagen", &cfg);
    let summary = run_datagen(&cfg).in_module("datagen")?;
    log::info!("datagen: {} records, {} skipped", summary.records, summary.skipped.len());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let mut run: TrainRunConfig = match &args.config {
        Some(p) => read_config(p).in_module("trainer")?,
        None => TrainRunConfig::default(),
    };
    if let Some(s) = args.steps {
        run.train.steps = s;
    }
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    run.train.validate().in_module("trainer")?;
    let dataset = match (&args.manifest, args.synthetic) {
        (Some(m), _) => load_dataset(m).in_module("datagen")?,
        (None, Some(n)) => generate(&SyntheticConfig {
            count: n,
            image_size: run.model.backbone.latent_size,
            seed: run.train.seed,
            ..Default::default()
        })
        .in_module("datagen")?
        .iter()
        .map(|s| s.to_training_sample())
        .collect(),
        (None, None) => {
            return Err(Error::Config("train needs --manifest or --synthetic".into())).in_module("trainer");
        }
    };
    let out = resolve_out(&args.out);
    log_resolved("train", &run);
    write_json(&out.join("config.json"), &run).in_module("trainer")?;
    let model = Model::new(run.model, NoiseSchedule::default(), run.train.seed, &Device::Cpu, DType::F32)
        .in_module("trainer")?;
    let summary = train_loop(&model, &dataset, &run.train, &out, args.resume.as_deref()).in_module("trainer")?;
    if let Some(last) = summary.last {
        log::info!("train: step {} l_d={:.5} total={:.5}", last.step, last.l_d, last.total);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    steps: &'a [StepTrace],
}

/// Samples each record of `manifest` into `<out>/<id>.png`, returning the
/// ids written.
#[allow(clippy::too_many_arguments)]
fn sample_manifest(
    model: &Model,
    manifest: &Path,
    out: &Path,
    steps: usize,
    guidance: f64,
    seed: u64,
    limit: Option<usize>,
    trace: bool,
) -> Result<Vec<String>> {
    let root = manifest_root(manifest);
    let records = read_manifest(manifest)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ids = Vec::new();
    let mut traces = String::new();
    for (k, rec) in records.iter().take(limit.unwrap_or(usize::MAX)).enumerate() {
        let s = load_training_sample(rec, root)?;
        let req = SampleRequest {
            background: s.background,
            layout: s.layout,
            objects: s.object_images,
            caption: s.caption,
            steps,
            guidance,
            seed: seed.wrapping_add(k as u64),
        };
        let result = sample(model, &req, trace)?;
        result.image.save_png(&out.join(format!("{}.png", rec.id)))?;
        if trace {
            traces.push_str(&serde_json::to_string(&TraceLine {
                id: &rec.id,
                steps: &result.trace,
            })?);
            traces.push('\n');
        }
        ids.push(rec.id.clone());
    }
    if trace {
        let p = out.join("trace.jsonl");
        std::fs::write(&p, traces).map_err(|e| Error::io(&p, e))?;
    }
    Ok(ids)
}

fn sample_cmd(args: &SampleArgs) -> CliResult<()> {
    log_resolved(
        "sample",
        &serde_json::json!({
            "checkpoint": args.checkpoint, "manifest": args.manifest, "steps": args.steps,
            "guidance": args.guidance, "seed": args.seed, "limit": args.limit, "trace": args.trace,
        }),
    );
    let (model, _) = load_model(&args.checkpoint, &Device::Cpu, DType::F32).in_module("sampler")?;
    let ids = sample_manifest(
        &model,
        &args.manifest,
        &resolve_out(&args.out),
        args.steps,
        args.guidance,
        args.seed,
        args.limit,
        args.trace,
    )
    .in_module("sampler")?;
    log::info!("sample: wrote {} images", ids.len());
    Ok(())
}

/// Scores whatever records have a generated image; the rest are listed as
/// excluded.
pub fn evaluate_manifest(
    manifest: &Path,
    generated: &Path,
    encoders: &Encoders,
    runner: Option<&ModelRunner<'_>>,
) -> Result<MetricReport> {
    let root = manifest_root(manifest);
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for rec in read_manifest(manifest)? {
        if !generated.join(format!("{}.png", rec.id)).exists() {
            missing.push(Excluded {
                reason: format!("no generated image {}.png", rec.id),
                id: rec.id,
            });
            continue;
        }
        match EvalItem::from_record(&rec, root, generated) {
            Ok(item) => items.push(item),
            Err(e) => missing.push(Excluded {
                id: rec.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let runner = runner.map(|r| r as &dyn crate::eval::CompositeRunner);
    let mut report = evaluate(&items, encoders, runner);
    report.excluded.extend(missing);
    Ok(report)
}

fn eval_cmd(args: &EvalArgs) -> CliResult<()> {
    log_resolved(
        "eval",
        &serde_json::json!({
            "manifest": args.manifest, "generated": args.generated, "sequential": args.sequential,
            "checkpoint": args.checkpoint, "steps": args.steps, "seed": args.seed, "encoder_seed": args.encoder_seed,
        }),
    );
    let model = match (&args.checkpoint, args.sequential) {
        (Some(p), true) => Some(load_model(p, &Device::Cpu, DType::F32).in_module("sampler")?.0),
        _ => None,
    };
    let runner = model.as_ref().map(|m| ModelRunner {
        model: m,
        steps: args.steps,
        guidance: 1.0,
        seed: args.seed,
    });
    let report = evaluate_manifest(&args.manifest, &args.generated, &Encoders::mock(args.encoder_seed), runner.as_ref())
        .in_module("eval_harness")?;
    log::info!("eval: {} items scored, {} excluded", report.items.len(), report.excluded.len());
    write_json(&resolve_out(&args.report), &report).in_module("eval_harness")
}

/// Knobs of the bundled end-to-end run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub seed: u64,
    pub scenes: usize,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sample_steps: usize,
    pub guidance: f64,
    /// Records to sample and score; all when unset.
    pub sampled: Option<usize>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            seed: 0,
            scenes: 12,
            train: TrainConfig {
                steps: 50,
                learning_rate: 1e-3,
                ..Default::default()
            },
            model: ModelConfig::default(),
            sample_steps: 10,
            guidance: 2.0,
            sampled: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSummary {
    pub records: usize,
    pub report: MetricReport,
}

/// Writes the full pipeline under `out`: `inputs/`, `data/manifest.jsonl`
/// and its assets, `layout.png`, `train/`, `samples/` and `report.json`.
/// Every artifact is a function of `cfg` alone.
pub fn run_demo(cfg: &DemoConfig, out: &Path) -> CliResult<DemoSummary> {
    let nonempty = std::fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if nonempty {
        return Err(Error::Config(format!("{} exists and is not empty", out.display()))).in_module("demo");
    }
    let mut train = cfg.train;
    train.seed = cfg.seed;
    write_json(&out.join("config.json"), cfg).in_module("demo")?;

    let scenes = generate(&SyntheticConfig {
        count: cfg.scenes,
        image_size: cfg.model.backbone.latent_size,
        seed: cfg.seed,
        ..Default::default()
    })
    .in_module("datagen")?;
    let inputs = out.join("inputs");
    export_synthetic_inputs(&scenes, &inputs).in_module("datagen")?;
    let manifest = out.join("data").join("manifest.jsonl");
    let summary = run_datagen(&DatagenConfig {
        source: SourceTag::Bottomup,
        input: inputs,
        manifest: manifest.clone(),
        seed: cfg.seed,
        rules: FilterRules::default(),
        ports: PortBinding::Mock,
    })
    .in_module("datagen")?;
    log::info!("demo: {} records, {} skipped", summary.records, summary.skipped.len());

    let dataset = load_dataset(&manifest).in_module("datagen")?;
    if let Some(first) = dataset.first() {
        encode_layout(&first.layout, first.image.dims())
            .and_then(|m| m.save_png(&out.join("layout.png")))
            .in_module("layout_codec")?;
    }

    let train_dir = out.join("train");
    let model = Model::new(cfg.model, NoiseSchedule::default(), cfg.seed, &Device::Cpu, DType::F32).in_module("trainer")?;
    train_loop(&model, &dataset, &train, &train_dir, None).in_module("trainer")?;
    let (model, _) = load_model(&checkpoint_path(&train_dir, train.steps), &Device::Cpu, DType::F32).in_module("trainer")?;

    let samples = out.join("samples");
    sample_manifest(
        &model,
        &manifest,
        &samples,
        cfg.sample_steps,
        cfg.guidance,
        cfg.seed,
        cfg.sampled,
        true,
    )
    .in_module("sampler")?;

    let report = evaluate_manifest(&manifest, &samples, &Encoders::mock(cfg.seed), None).in_module("eval_harness")?;
    write_json(&out.join("report.json"), &report).in_module("eval_harness")?;
    Ok(DemoSummary {
        records: summary.records,
        report,
    })
}

fn demo_cmd(args: &DemoArgs) -> CliResult<()> {
    let mut cfg = DemoConfig {
        seed: args.seed,
        ..Default::default()
    };
    if let Some(s) = args.train_steps {
        cfg.train.steps = s;
    }
    log_resolved("demo", &cfg);
    let out = resolve_out(&args.out);
    let summary = run_demo(&cfg, &out)?;
    log::info!(
        "demo: {} records, {} scored, report at {}",
        summary.records,
        summary.report.items.len(),
        out.join("report.json").display()
    );
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` and runs the command. Returns the process exit status:
/// 0 on success, 1 when a command fails (a JSON error object is printed to
/// stderr), 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::EncodeLayout(a) => encode_layout_cmd(a),
        Command::Datagen(a) => datagen_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Demo(a) => demo_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}
