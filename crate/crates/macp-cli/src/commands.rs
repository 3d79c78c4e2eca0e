//! Subcommand implementations. Every run writes a resolved-config JSON next
//! to its primary output for provenance.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use macp::autodiff::ParamStore;
use macp::comms::HEADER_BYTES;
use macp::eval::{evaluate, EvalOptions, PipelineMode};
use macp::fusion::FusionMethod;
use macp::geom::VoxelConfig;
use macp::peft::{build_variant, count_params, VariantConfig, VariantKind};
use macp::perception::{Model, ModelConfig};
use macp::scenario::{
    load_dataset, make_dataset, save_dataset, signed_range_histogram, DatasetKind, Frame,
    ScenarioConfig,
};
use macp::train::{finetune as train_finetune, pretrain as train_pretrain, TrainConfig, TrainError};

use crate::CliError;

fn io_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| io_err(&format!("writing {}", path.display()), e))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn load_frames(dir: &Path, what: &str) -> Result<(macp::scenario::DatasetManifest, Vec<Frame>), CliError> {
    require_file(&dir.join("manifest.json"), &format!("{what} manifest"))?;
    load_dataset(dir).map_err(|e| io_err(&format!("loading {what} from {}", dir.display()), e))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    require_file(path, "checkpoint")?;
    let store = ParamStore::load(path).map_err(|e| io_err("reading checkpoint", e))?;
    Model::from_store(store, VoxelConfig::desk()).map_err(|e| CliError::Config(format!("bad checkpoint: {e}")))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub kind: DatasetKind,
    pub n_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_splits")]
    pub splits: Vec<SplitSpec>,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

fn default_splits() -> Vec<SplitSpec> {
    vec![
        SplitSpec { name: "pretrain".into(), kind: DatasetKind::Single, n_frames: 160 },
        SplitSpec { name: "finetune".into(), kind: DatasetKind::Cooperative, n_frames: 96 },
        SplitSpec { name: "test".into(), kind: DatasetKind::Cooperative, n_frames: 200 },
    ]
}

pub fn gen_data(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let config_path = config.ok_or_else(|| CliError::Config("gen-data requires --config".into()))?;
    require_file(config_path, "config")?;
    let bytes = std::fs::read(config_path).map_err(|e| io_err("reading config", e))?;
    let mut cfg: GenDataConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("bad config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .or(cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory (set --out or out_dir)".into()))?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err("creating output directory", e))?;
    for (i, split) in cfg.splits.iter().enumerate() {
        let split_seed = macp::scenario::derive_seed(cfg.seed, 0xDA7A + i as u64);
        let frames = make_dataset(split.kind, split.n_frames, split_seed, &cfg.scenario)
            .map_err(|e| CliError::Config(format!("generating split '{}': {e}", split.name)))?;
        let dir = out_dir.join(&split.name);
        save_dataset(&dir, &frames, split_seed, split.kind, &cfg.scenario)
            .map_err(|e| io_err(&format!("writing split '{}'", split.name), e))?;
        println!("wrote {} frames to {}", frames.len(), dir.display());
    }
    write_json(&out_dir.join("gen-data.config.json"), &cfg)
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    command: &'a str,
    data: &'a Path,
    epochs: usize,
    lr: f64,
    seed: u64,
    model: &'a ModelConfig,
}

pub fn pretrain(data: &Path, out: &Path, epochs: usize, lr: f64, seed: u64) -> Result<(), CliError> {
    let (manifest, frames) = load_frames(data, "pretraining data")?;
    if manifest.kind != DatasetKind::Single {
        return Err(CliError::Config("pretraining expects a single-agent split".into()));
    }
    let model_cfg = ModelConfig::single_agent_desk();
    let mut model = Model::new(model_cfg.clone(), seed);
    let cfg = TrainConfig { epochs, lr0: lr, seed, augment: true, batch_size: 2, ..Default::default() };
    let logs = match train_pretrain(&mut model, &frames, &cfg) {
        Ok(l) => l,
        Err(TrainError::Diverged { step, loss }) => {
            return Err(CliError::Diverged(format!("pretraining diverged at step {step} (loss {loss})")))
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    model.store.save(out).map_err(|e| io_err("writing checkpoint", e))?;
    let mut csv = String::from("epoch,mean_loss,lr\n");
    for l in &logs {
        csv.push_str(&format!("{},{},{}\n", l.epoch, l.mean_loss, l.lr));
    }
    std::fs::write(sidecar(out, ".loss.csv"), csv).map_err(|e| io_err("writing loss log", e))?;
    write_json(
        &sidecar(out, ".config.json"),
        &ResolvedTrain { command: "pretrain", data, epochs, lr, seed, model: &model_cfg },
    )?;
    println!("pretrained {} epochs; final loss {:.4}", epochs, logs.last().map(|l| l.mean_loss).unwrap_or(f64::NAN));
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

pub struct FinetuneArgs {
    pub variant: String,
    pub pretrained: PathBuf,
    pub data: PathBuf,
    pub factor: u32,
    pub fusion: String,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub eval_data: Option<PathBuf>,
}

pub fn finetune(args: FinetuneArgs) -> Result<(), CliError> {
    let kind = VariantKind::from_str(&args.variant).map_err(|e| CliError::Config(e.to_string()))?;
    let fusion = FusionMethod::from_str(&args.fusion).map_err(|e| CliError::Config(e.to_string()))?;
    let base = load_model(&args.pretrained)?;
    let (manifest, frames) = load_frames(&args.data, "fine-tuning data")?;
    if manifest.kind != DatasetKind::Cooperative {
        return Err(CliError::Config("fine-tuning expects a cooperative split".into()));
    }
    let vcfg = VariantConfig::new(kind, base.cfg.encoder_width() / 4, args.factor);
    let mut model =
        build_variant(&vcfg, &base.store, &base.cfg, args.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr0: args.lr,
        seed: args.seed,
        fusion,
        batch_size: 2,
        ..Default::default()
    };
    match train_finetune(&mut model, &frames, &cfg) {
        Ok(_) => {}
        Err(TrainError::Diverged { step, loss }) => {
            return Err(CliError::Diverged(format!("fine-tuning diverged at step {step} (loss {loss})")))
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    }
    model.store.save(&args.out).map_err(|e| io_err("writing checkpoint", e))?;

    let eval_dir = args.eval_data.as_deref().unwrap_or(&args.data);
    let (_, eval_frames) = load_frames(eval_dir, "evaluation data")?;
    let opts = EvalOptions { fusion, ..Default::default() };
    let report = evaluate(&eval_frames, &model, PipelineMode::Cooperative, &opts)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_json(&sidecar(&args.out, ".report.json"), &report)?;
    std::fs::write(sidecar(&args.out, ".report.csv"), report.to_csv())
        .map_err(|e| io_err("writing report", e))?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a str,
        variant: &'a str,
        factor: u32,
        fusion: &'a str,
        epochs: usize,
        lr: f64,
        seed: u64,
        pretrained: &'a Path,
        data: &'a Path,
    }
    write_json(
        &sidecar(&args.out, ".config.json"),
        &Resolved {
            command: "finetune",
            variant: kind.as_str(),
            factor: args.factor,
            fusion: fusion.as_str(),
            epochs: args.epochs,
            lr: args.lr,
            seed: args.seed,
            pretrained: &args.pretrained,
            data: &args.data,
        },
    )?;
    let (total, trainable) = count_params(&model);
    println!(
        "fine-tuned variant '{}': AP@0.5 {:.3}, params {}/{} trainable",
        kind.as_str(),
        report.overall(0.5),
        trainable,
        total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn parse_mode(s: &str) -> Result<PipelineMode, CliError> {
    match s {
        "no_fusion" => Ok(PipelineMode::NoFusion),
        "late_fusion" => Ok(PipelineMode::LateFusion),
        "early_fusion" => Ok(PipelineMode::EarlyFusion),
        "cooperative" | "macp" => Ok(PipelineMode::Cooperative),
        other => Err(CliError::Config(format!(
            "unknown mode '{other}' (expected no_fusion|late_fusion|early_fusion|cooperative)"
        ))),
    }
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    mode: &str,
    fusion: &str,
    max_agents: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let mode = parse_mode(mode)?;
    let fusion = FusionMethod::from_str(fusion).map_err(|e| CliError::Config(e.to_string()))?;
    let model = load_model(checkpoint)?;
    let (_, frames) = load_frames(data, "evaluation data")?;
    let opts = EvalOptions { fusion, max_agents, ..Default::default() };
    let (report, detections) = macp::eval::evaluate_with_detections(&frames, &model, mode, &opts)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_json(out, &report)?;
    let mut jsonl = Vec::new();
    for dets in &detections {
        macp::perception::write_detections_jsonl(&mut jsonl, dets)
            .map_err(|e| io_err("serializing detections", e))?;
    }
    std::fs::write(sidecar(out, ".detections.jsonl"), jsonl)
        .map_err(|e| io_err("writing detections", e))?;
    std::fs::write(sidecar(out, ".csv"), report.to_csv()).map_err(|e| io_err("writing report csv", e))?;
    write_json(
        &sidecar(out, ".config.json"),
        &serde_json::json!({
            "command": "eval",
            "checkpoint": checkpoint,
            "data": data,
            "mode": report.mode,
            "fusion": fusion.as_str(),
            "max_agents": max_agents,
        }),
    )?;
    println!("{}: AP@0.5 {:.3} AP@0.7 {:.3} AM {:.4} MB", report.mode, report.overall(0.5), report.overall(0.7), report.am_mb);
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct SweepConfig {
    pub pretrained: PathBuf,
    #[serde(default)]
    pub finetuned: Option<PathBuf>,
    pub data: PathBuf,
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_factors")]
    pub factors: Vec<u32>,
    #[serde(default = "default_max_agents")]
    pub max_agents: Vec<usize>,
    #[serde(default = "default_mask_half")]
    pub mask_half_extent: f64,
    #[serde(default = "default_mask_positions")]
    pub mask_positions: Vec<f64>,
}

fn default_epochs() -> usize {
    3
}
fn default_lr() -> f64 {
    5e-3
}
fn default_factors() -> Vec<u32> {
    vec![1, 2, 4, 8, 16, 32]
}
fn default_max_agents() -> Vec<usize> {
    vec![1, 2, 3, 4]
}
fn default_mask_half() -> f64 {
    6.0
}
fn default_mask_positions() -> Vec<f64> {
    vec![-12.0, 0.0, 12.0]
}

fn finetune_for_sweep(
    base: &Model,
    frames: &[Frame],
    factor: u32,
    fusion: FusionMethod,
    cfg: &SweepConfig,
) -> Result<Model, CliError> {
    let vcfg = VariantConfig::new(VariantKind::Macp, base.cfg.encoder_width() / 4, factor);
    let mut model =
        build_variant(&vcfg, &base.store, &base.cfg, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        lr0: cfg.lr,
        seed: cfg.seed,
        fusion,
        batch_size: 2,
        ..Default::default()
    };
    match train_finetune(&mut model, frames, &tcfg) {
        Ok(_) => Ok(model),
        Err(TrainError::Diverged { step, loss }) => {
            Err(CliError::Diverged(format!("sweep fine-tune diverged at step {step} (loss {loss})")))
        }
        Err(e) => Err(CliError::Config(e.to_string())),
    }
}

pub fn sweep(kind: &str, config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    require_file(config, "sweep config")?;
    let bytes = std::fs::read(config).map_err(|e| io_err("reading sweep config", e))?;
    let mut cfg: SweepConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("bad sweep config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base = load_model(&cfg.pretrained)?;
    let (_, test_frames) = load_frames(&cfg.data, "sweep test data")?;

    let csv = match kind {
        "compression" => {
            let train_dir = cfg
                .train_data
                .clone()
                .ok_or_else(|| CliError::Config("compression sweep needs train_data".into()))?;
            let (_, train_frames) = load_frames(&train_dir, "sweep training data")?;
            let mut csv = String::from("factor,latent_channels,payload_bytes_per_message,ap50,ap70,am_mb\n");
            for &factor in &cfg.factors {
                let model = finetune_for_sweep(&base, &train_frames, factor, FusionMethod::WeightedSum, &cfg)?;
                let report = evaluate(&test_frames, &model, PipelineMode::Cooperative, &EvalOptions::default())
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let latent = model.cfg.latent_channels();
                let payload = model.cfg.grid.extent.0 * model.cfg.grid.extent.1 * latent * 4;
                csv.push_str(&format!(
                    "{factor},{latent},{payload},{:.6},{:.6},{:.6}\n",
                    report.overall(0.5),
                    report.overall(0.7),
                    report.am_mb
                ));
            }
            csv
        }
        "cavs" => {
            let model = load_model(
                cfg.finetuned.as_deref().ok_or_else(|| CliError::MissingArtifact("cavs sweep needs finetuned".into()))?,
            )?;
            let mut csv = String::from("max_agents,ap50,ap70,am_mb\n");
            for &n in &cfg.max_agents {
                let opts = EvalOptions { max_agents: Some(n), ..Default::default() };
                let report = evaluate(&test_frames, &model, PipelineMode::Cooperative, &opts)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                csv.push_str(&format!("{n},{:.6},{:.6},{:.6}\n", report.overall(0.5), report.overall(0.7), report.am_mb));
            }
            csv
        }
        "fusion" => {
            let train_dir =
                cfg.train_data.clone().ok_or_else(|| CliError::Config("fusion sweep needs train_data".into()))?;
            let (_, train_frames) = load_frames(&train_dir, "sweep training data")?;
            let mut csv = String::from("method,ap50,ap70,am_mb\n");
            for method in FusionMethod::ALL {
                let model = finetune_for_sweep(&base, &train_frames, 4, method, &cfg)?;
                let opts = EvalOptions { fusion: method, ..Default::default() };
                let report = evaluate(&test_frames, &model, PipelineMode::Cooperative, &opts)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6}\n",
                    method.as_str(),
                    report.overall(0.5),
                    report.overall(0.7),
                    report.am_mb
                ));
            }
            csv
        }
        "robustness" => {
            let coop = load_model(
                cfg.finetuned
                    .as_deref()
                    .ok_or_else(|| CliError::MissingArtifact("robustness sweep needs finetuned".into()))?,
            )?;
            let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
            for &mx in &cfg.mask_positions {
                for &my in &cfg.mask_positions {
                    let opts = EvalOptions { ego_mask: Some((mx, my, cfg.mask_half_extent)), ..Default::default() };
                    let single = evaluate(&test_frames, &base, PipelineMode::NoFusion, &opts)
                        .map_err(|e| CliError::Config(e.to_string()))?;
                    let fused = evaluate(&test_frames, &coop, PipelineMode::Cooperative, &opts)
                        .map_err(|e| CliError::Config(e.to_string()))?;
                    rows.push((mx, my, single.overall(0.5), fused.overall(0.5)));
                }
            }
            let stats = |sel: fn(&(f64, f64, f64, f64)) -> f64| {
                let vals: Vec<f64> = rows.iter().map(sel).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                (mean, var.sqrt())
            };
            let (mean_s, std_s) = stats(|r| r.2);
            let (mean_c, std_c) = stats(|r| r.3);
            let mut csv = String::from("mask_x,mask_y,ap50_single,ap50_cooperative\n");
            for (mx, my, s, c) in &rows {
                csv.push_str(&format!("{mx},{my},{s:.6},{c:.6}\n"));
            }
            csv.push_str(&format!("mean,,{mean_s:.6},{mean_c:.6}\n"));
            csv.push_str(&format!("std,,{std_s:.6},{std_c:.6}\n"));
            csv
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown sweep kind '{other}' (expected compression|cavs|fusion|robustness)"
            )))
        }
    };
    std::fs::write(out, &csv).map_err(|e| io_err("writing sweep csv", e))?;
    write_json(&sidecar(out, ".config.json"), &serde_json::json!({ "command": "sweep", "kind": kind, "config": cfg }))?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// diag-shift
// ---------------------------------------------------------------------------

pub fn diag_shift(data: &Path, bins: usize, out: &Path) -> Result<(), CliError> {
    if bins < 2 {
        return Err(CliError::Config("need at least 2 bins".into()));
    }
    let (manifest, frames) = load_frames(data, "diagnostic data")?;
    if manifest.kind != DatasetKind::Cooperative {
        return Err(CliError::Config("the shift diagnostic needs a cooperative split".into()));
    }
    let hist = signed_range_histogram(&frames, bins, manifest.scenario.sensor.max_range);
    let mut csv = String::from("agent_role,bin_lo,bin_hi,count\n");
    for (role, counts) in hist.counts.iter().enumerate() {
        for (b, &count) in counts.iter().enumerate() {
            csv.push_str(&format!("{role},{},{},{count}\n", hist.edges[b], hist.edges[b + 1]));
        }
    }
    std::fs::write(out, &csv).map_err(|e| io_err("writing histogram csv", e))?;
    write_json(
        &sidecar(out, ".config.json"),
        &serde_json::json!({ "command": "diag-shift", "data": data, "bins": bins }),
    )?;
    println!("wrote {} ({} roles)", out.display(), hist.counts.len());
    Ok(())
}

// Keep the header size referenced so byte accounting in reports stays in
// sync with the wire module if the layout ever changes.
const _: () = assert!(HEADER_BYTES == 52);
