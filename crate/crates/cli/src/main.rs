//! `nds`: synthesize fields, train and evaluate segmentation models, predict
//! full-field stress maps and export vegetative indices.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nds_core::dataset::io::{load_manifest, write_ndsr, write_png};
use nds_core::dataset::{split_dataset, FieldSequence, SamplingStrategy, TaskKind};
use nds_core::nn::checkpoint::Checkpoint;
use nds_core::synth::generate_benchmark;
use nds_core::train::{evaluate, field_predictions, train, Tiling, BEST_CHECKPOINT};
use nds_core::zoo::{ArchitectureKind, BackboneKind, Model};
use nds_core::{compute_index, IndexKind, InputRepresentation};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use config::{RunConfig, CONFIG_ECHO, RESOLVED_CONFIG, RUN_INFO};

const METRICS_FILE: &str = "metrics.json";
const SPLIT_FILE: &str = "split.json";

#[derive(Parser, Debug)]
#[command(name = "nds", version, about = "Nutrient-deficiency stress segmentation from aerial field sequences")]
struct Cli {
    /// Seed for every random choice of the run; overrides config seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark and its manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest; writes history and the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint per output timestep on one split.
    Eval(EvalArgs),
    /// Write stitched full-field probability maps.
    Predict(PredictArgs),
    /// Export NDVI, GNDVI and NDWI rasters of one flight.
    Indices(IndicesArgs),
    /// Print checkpoint metadata.
    Info(InfoArgs),
}

/// Parses a value through its serde name, e.g. `proposed_shared` or `t1:3`.
fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    fields: usize,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    flights: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// detection, prediction13 (t1:3) or prediction24 (t2:4).
    #[arg(long, value_parser = serde_name::<TaskKind>)]
    task: Option<TaskKind>,
    #[arg(long, value_parser = serde_name::<ArchitectureKind>)]
    arch: Option<ArchitectureKind>,
    /// compact_vgg or compact_effnet.
    #[arg(long, value_parser = serde_name::<BackboneKind>)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// rgb, ndvi_only, rgb_plus_ndvi, rgb_plus_gndvi, rgb_plus_ndwi or index_triple.
    #[arg(long, value_parser = serde_name::<InputRepresentation>)]
    repr: Option<InputRepresentation>,
    /// wise_crop, random_crop or full_rescale.
    #[arg(long)]
    strategy: Option<String>,
    /// Patch side in pixels.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Training output directory; supplies the resolved config and checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Field ids to predict; all manifest fields when omitted.
    #[arg(long = "field")]
    fields: Vec<String>,
}

#[derive(Args, Debug)]
struct IndicesArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    field: String,
    /// Flight index; the target flight when omitted.
    #[arg(long)]
    flight: Option<i64>,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let loaded = config::load(cli.config.as_deref())?;
    let mut cfg = loaded.config;
    cfg.apply_seed(cli.seed);
    if let Some(out) = cli.out.clone() {
        cfg.out = Some(out);
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, a, loaded.text.as_deref()),
        Command::Train(a) => train_cmd(cfg, a, loaded.text.as_deref(), loaded.explicit_channels),
        Command::Eval(a) => eval_cmd(cfg, cli.config.is_some(), cli.seed, a),
        Command::Predict(a) => predict_cmd(cfg, cli.config.is_some(), cli.seed, a),
        Command::Indices(a) => indices_cmd(cfg, a),
        Command::Info(a) => info_cmd(a),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| anyhow!("no output directory: pass --out or set `out`"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Config echo and run identity, written before any compute.
fn write_run_header(out: &Path, cfg: &RunConfig, echo: Option<&str>, command: &str) -> Result<()> {
    if let Some(text) = echo {
        fs::write(out.join(CONFIG_ECHO), text)?;
    }
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    write_json(
        &out.join(RUN_INFO),
        &json!({
            "command": command,
            "seed": cfg.seed.unwrap_or(cfg.train.seed),
            "version": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": nds_core::nn::checkpoint::VERSION,
        }),
    )
}

fn synth(mut cfg: RunConfig, a: SynthArgs, echo: Option<&str>) -> Result<()> {
    if let Some(side) = a.side {
        cfg.synth.side = side;
    }
    if let Some(f) = a.flights {
        cfg.synth.num_flights = f;
    }
    cfg.synth.validate()?;
    let out = out_dir(&cfg)?;
    write_run_header(&out, &cfg, echo, "synth")?;
    let manifest = generate_benchmark(&cfg.synth, a.fields, &out)?;
    println!("wrote {} fields to {}", a.fields, manifest.display());
    Ok(())
}

fn load_fields(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<Vec<FieldSequence>> {
    let path = flag
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| anyhow!("no dataset: pass --manifest or set `manifest`"))?;
    Ok(load_manifest(&path)?)
}

fn parse_strategy(kind: &str, side: usize) -> Result<SamplingStrategy> {
    Ok(match kind {
        "wise_crop" | "wise" => SamplingStrategy::WiseCrop { side },
        "random_crop" | "random" => SamplingStrategy::RandomCrop { side },
        "full_rescale" | "rescale" => SamplingStrategy::FullRescale { side },
        other => bail!("unknown strategy {other:?}; use wise_crop, random_crop or full_rescale"),
    })
}

fn strategy_name(s: SamplingStrategy) -> &'static str {
    match s {
        SamplingStrategy::WiseCrop { .. } => "wise_crop",
        SamplingStrategy::RandomCrop { .. } => "random_crop",
        SamplingStrategy::FullRescale { .. } => "full_rescale",
    }
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs, echo: Option<&str>, explicit_channels: bool) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.task {
        t.task = v;
    }
    if let Some(v) = a.repr {
        t.repr = v;
    }
    if a.strategy.is_some() || a.side.is_some() {
        let kind = a.strategy.clone().unwrap_or_else(|| strategy_name(t.strategy).to_string());
        t.strategy = parse_strategy(&kind, a.side.unwrap_or(t.strategy.side()))?;
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if a.no_augment {
        t.augment = false;
    }
    if a.workers.is_some() {
        t.workers = a.workers;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.arch {
        m.arch = v;
    }
    if let Some(v) = a.backbone {
        m.backbone = v;
    }
    if let Some(v) = a.base_channels {
        m.base_channels = v;
    }
    if a.manifest.is_some() {
        cfg.manifest = a.manifest.clone();
    }
    if !explicit_channels {
        cfg.sync_channels();
    }
    cfg.validate()?;
    let out = out_dir(&cfg)?;
    write_run_header(&out, &cfg, echo, "train")?;

    let fields = load_fields(&cfg, None)?;
    let (tr, va, te) = split_dataset(&fields, cfg.split_seed())?;
    let ids = |s: &[FieldSequence]| s.iter().map(|f| f.field_id.clone()).collect::<Vec<_>>();
    write_json(
        &out.join(SPLIT_FILE),
        &json!({ "train": ids(&tr), "val": ids(&va), "test": ids(&te) }),
    )?;
    let (model, mut store) = Model::build::<f32>(&cfg.model)?;
    println!(
        "training {} ({} parameters) on {} fields, validating on {}",
        cfg.model.arch.name(),
        store.count_where(|p| p.trainable),
        tr.len(),
        va.len()
    );
    let outcome = train(&model, &mut store, &tr, &va, &cfg.train, Some(&out), |r| {
        println!(
            "epoch {:>4}  train {:.4}  val {:.4}  iou {:.4}  f1 {:.4}  lr {:.1e}",
            r.epoch, r.train_loss, r.val_loss, r.val_iou, r.val_f1, r.lr
        );
    })?;
    println!(
        "best epoch {} (val loss {:.4}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

/// Settings and checkpoint of a trained run: the run directory's resolved
/// config unless `--config` was given.
fn resolve_run(mut cfg: RunConfig, has_config: bool, seed: Option<u64>, a: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    if let (Some(run), false) = (&a.run, has_config) {
        let out = cfg.out.take();
        cfg = RunConfig::read_resolved(run)?;
        cfg.apply_seed(seed);
        cfg.out = out.or_else(|| Some(run.clone()));
    }
    if a.manifest.is_some() {
        cfg.manifest = a.manifest.clone();
    }
    let checkpoint = a
        .checkpoint
        .clone()
        .or_else(|| a.run.as_ref().map(|r| r.join(BEST_CHECKPOINT)))
        .ok_or_else(|| anyhow!("no checkpoint: pass --checkpoint or --run"))?;
    Ok((cfg, checkpoint))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<(Model, nds_core::nn::ParameterStore<f32>)> {
    let (model, store) = Model::load::<f32>(path)?;
    cfg.train.check_model(&model)?;
    Ok((model, store))
}

fn eval_cmd(cfg: RunConfig, has_config: bool, seed: Option<u64>, a: EvalArgs) -> Result<()> {
    let (cfg, checkpoint) = resolve_run(cfg, has_config, seed, &a.run)?;
    let out = out_dir(&cfg)?;
    let fields = load_fields(&cfg, None)?;
    let (model, store) = load_model(&checkpoint, &cfg)?;
    let chosen = match a.split {
        Split::All => fields,
        split => {
            let (tr, va, te) = split_dataset(&fields, cfg.split_seed())?;
            match split {
                Split::Train => tr,
                Split::Val => va,
                _ => te,
            }
        }
    };
    let t = &cfg.train;
    let tiling = Tiling::for_strategy(t.strategy);
    let ev = evaluate(&model, &store, &chosen, t.task, t.repr, tiling, &t.loss)?;
    for report in [&ev.tile, &ev.field] {
        println!("{:?} scope", report.scope);
        for row in &report.rows {
            println!("  {:<4} iou {:.4}  f1 {:.4}  loss {:.4}", row.timestep, row.iou, row.f1, row.loss);
        }
    }
    let path = out.join(METRICS_FILE);
    write_json(
        &path,
        &json!({
            "architecture": model.arch().name(),
            "task": t.task,
            "split": a.split,
            "fields": chosen.len(),
            "tiling": tiling,
            "tile": ev.tile,
            "field": ev.field,
        }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn predict_cmd(cfg: RunConfig, has_config: bool, seed: Option<u64>, a: PredictArgs) -> Result<()> {
    let (cfg, checkpoint) = resolve_run(cfg, has_config, seed, &a.run)?;
    let out = out_dir(&cfg)?;
    let mut fields = load_fields(&cfg, None)?;
    if !a.fields.is_empty() {
        for id in &a.fields {
            if !fields.iter().any(|f| &f.field_id == id) {
                bail!("field {id:?} is not in the manifest");
            }
        }
        fields.retain(|f| a.fields.contains(&f.field_id));
    }
    let (model, store) = load_model(&checkpoint, &cfg)?;
    let t = &cfg.train;
    let tiling = Tiling::for_strategy(t.strategy);
    for field in &fields {
        let p = field_predictions(&model, &store, field, t.task, t.repr, tiling, t.batch_size)?;
        let prob = p.stitched.last().ok_or_else(|| anyhow!("model produced no output"))?;
        let finite = prob.values().iter().filter(|v| v.is_finite()).count();
        let ndsr = out.join(format!("{}_prob.ndsr", field.field_id));
        write_ndsr(&ndsr, prob)?;
        write_png(&out.join(format!("{}_prob.png", field.field_id)), prob)?;
        println!(
            "{}: {}x{} probability map, {:.1}% covered, {} tiles -> {}",
            field.field_id,
            prob.height(),
            prob.width(),
            100.0 * finite as f64 / prob.values().len() as f64,
            p.tiles.len(),
            ndsr.display()
        );
    }
    Ok(())
}

fn indices_cmd(cfg: RunConfig, a: IndicesArgs) -> Result<()> {
    let out = out_dir(&cfg)?;
    let fields = load_fields(&cfg, a.manifest)?;
    let field = fields
        .iter()
        .find(|f| f.field_id == a.field)
        .ok_or_else(|| anyhow!("field {:?} is not in the manifest", a.field))?;
    let index = a.flight.unwrap_or(field.target_flight_index);
    let flight = field
        .flight(index)
        .ok_or_else(|| anyhow!("field {} has no flight {index}", field.field_id))?;
    for kind in IndexKind::ALL {
        let r = compute_index(kind, &flight.raster)?;
        let stem = format!("{}_f{index}_{}", field.field_id, kind.name());
        write_ndsr(&out.join(format!("{stem}.ndsr")), &r)?;
        // PNG previews map [-1, 1] onto [0, 1].
        write_png(&out.join(format!("{stem}.png")), &r.map(|v| 0.5 * (v + 1.0)))?;
        println!("wrote {stem}");
    }
    Ok(())
}

fn info_cmd(a: InfoArgs) -> Result<()> {
    let path = a
        .checkpoint
        .or_else(|| a.run.map(|r| r.join(BEST_CHECKPOINT)))
        .ok_or_else(|| anyhow!("no checkpoint: pass --checkpoint or --run"))?;
    let ck = Checkpoint::load(&path)?;
    let (model, store) = Model::from_checkpoint::<f32>(&ck)?;
    let config: serde_json::Value = serde_json::from_str(&ck.config_json)?;
    let info = json!({
        "path": path,
        "format_version": nds_core::nn::checkpoint::VERSION,
        "architecture": model.arch().name(),
        "outputs": model.arch().output_count(),
        "parameters": store.count(),
        "trainable_parameters": store.count_where(|p| p.trainable),
        "optimizer_step": ck.optimizer.as_ref().map(|o| o.step),
        "model": config,
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}
