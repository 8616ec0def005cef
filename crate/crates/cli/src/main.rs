//! `adp` — train, evaluate, and inspect the occlusion-robust re-ID pipeline.

use adp_cli::{checkpoint, config, ingest, metrics, report, viz};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adp_core::backbone::Backbone;
use adp_core::data::{make_synthetic_dataset, Split};
use adp_core::eval;
use adp_core::trainer::{Strategy, TrainConfig, Trainer};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use adp_cli::manifest::RunManifest;

/// Environment variable consulted when `--data` is not given.
const DATA_ROOT_VAR: &str = "ADP_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "adp",
    version,
    about = "Occlusion-robust person re-identification: synthetic data, training, retrieval evaluation, and attention visualization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic dataset as an image directory.
    PrepareSynthetic(PrepareArgs),
    /// Write a complete training config file to edit from.
    InitConfig(InitConfigArgs),
    /// Train from a config file; writes a checkpoint and a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the single-query protocol.
    Eval(EvalArgs),
    /// Export attention heatmaps and an embedding table for a checkpoint.
    Visualize(VisualizeArgs),
    /// Export the learned noise canvas as a PNG.
    ExportCanvas(ExportCanvasArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Target directory for the train/query/gallery folders.
    #[arg(long)]
    out: PathBuf,
    /// Number of identities.
    #[arg(long, default_value_t = 16)]
    ids: usize,
    /// Training images per identity.
    #[arg(long, default_value_t = 32)]
    per_id: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing non-empty target directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InitConfigArgs {
    /// Where to write the TOML file.
    #[arg(long)]
    out: PathBuf,
    /// Recipe profile: "desk" (64x32 small backbone) or "full" (256x128, 12 blocks).
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epoch count for the full profile (desk is fixed at 30).
    #[arg(long, default_value_t = 120)]
    epochs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config TOML.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root containing train/ (defaults to $ADP_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint.bin and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the occlusion strategy: adm|background|random_erase|none.
    #[arg(long)]
    strategy: Option<String>,
    /// Resume from a checkpoint written by a previous run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Allow writing into an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root containing query/ and gallery/ (defaults to $ADP_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for report.json (defaults to the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (defaults to $ADP_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which split to visualize.
    #[arg(long, default_value = "query")]
    split: String,
    /// Output directory for the PNG and embedding files.
    #[arg(long)]
    out: PathBuf,
    /// Maximum number of images to render (0 = all).
    #[arg(long, default_value_t = 8)]
    limit: usize,
}

#[derive(Args)]
struct ExportCanvasArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareSynthetic(a) => cmd_prepare_synthetic(a),
        Command::InitConfig(a) => cmd_init_config(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::ExportCanvas(a) => cmd_export_canvas(a),
    }
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var_os(DATA_ROOT_VAR) {
        Some(v) => Ok(PathBuf::from(v)),
        None => bail!("no --data given and {DATA_ROOT_VAR} is not set"),
    }
}

fn ensure_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("cannot inspect {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty (pass --force to write into it)",
                dir.display()
            );
        }
    } else {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn split_from_name(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "query" => Ok(Split::Query),
        "gallery" => Ok(Split::Gallery),
        other => bail!("unknown split '{other}' (expected train, query or gallery)"),
    }
}

fn cmd_prepare_synthetic(a: PrepareArgs) -> Result<()> {
    ensure_output_dir(&a.out, a.force)?;
    let ds = make_synthetic_dataset(a.ids, a.per_id, (a.height, a.width), a.seed)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    ingest::write_dataset(&a.out, &ds)?;
    let config = serde_json::json!({
        "ids": a.ids,
        "per_id": a.per_id,
        "height": a.height,
        "width": a.width,
    });
    let artifacts = vec!["train".to_string(), "query".to_string(), "gallery".to_string()];
    RunManifest::new("prepare-synthetic", a.seed, config, artifacts).save(&a.out)?;
    println!(
        "wrote {} train / {} query / {} gallery images to {}",
        ds.train.len(),
        ds.query.len(),
        ds.gallery.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_init_config(a: InitConfigArgs) -> Result<()> {
    let cfg = match a.profile.as_str() {
        "desk" => TrainConfig::desk(a.seed),
        "full" => TrainConfig::full(a.epochs, a.seed),
        other => bail!("unknown profile '{other}' (expected 'desk' or 'full')"),
    };
    config::save(&a.out, &cfg)?;
    println!("wrote {} profile config to {}", a.profile, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = config::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &a.strategy {
        cfg.strategy = Strategy::from_name(name).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    let data = data_root(a.data)?;
    let records = ingest::scan_reid_directory(&data, Split::Train)?;

    ensure_output_dir(&a.out, a.force || a.resume.is_some())?;
    let ckpt_path = a.out.join("checkpoint.bin");
    let metrics_path = a.out.join("metrics.jsonl");

    let (mut trainer, mut log) = match &a.resume {
        Some(path) => {
            let (saved_cfg, state) = checkpoint::load(path)?;
            if saved_cfg != cfg {
                bail!(
                    "checkpoint {} was trained with a different config; resume requires identical settings",
                    path.display()
                );
            }
            let t = Trainer::restore(cfg.clone(), records, state)
                .map_err(|e| anyhow::anyhow!("cannot resume: {e}"))?;
            (t, metrics::MetricsWriter::append(&metrics_path)?)
        }
        None => {
            let t = Trainer::new(cfg.clone(), records).map_err(|e| anyhow::anyhow!("{e}"))?;
            (t, metrics::MetricsWriter::create(&metrics_path)?)
        }
    };

    let start = Instant::now();
    while trainer.epoch() < cfg.epochs {
        let epoch_metrics = trainer.train_epoch().map_err(|e| anyhow::anyhow!("{e}"))?;
        for m in &epoch_metrics {
            log.write(m)?;
        }
        log.flush()?;
        checkpoint::save(&ckpt_path, &cfg, &trainer.state())?;
        let last = epoch_metrics.last().expect("an epoch has at least one step");
        println!(
            "epoch {:3}/{} lr {:.5} total {:.4} (id_h {:.4} tri_h {:.4} id_o {:.4}) l_adm {:.4} [{:.1}s]",
            trainer.epoch(),
            cfg.epochs,
            last.lr,
            last.losses.total,
            last.losses.id_h,
            last.losses.tri_h,
            last.losses.id_o,
            last.l_adm,
            start.elapsed().as_secs_f64(),
        );
    }

    let snapshot = serde_json::to_value(config::ConfigFile::from_train_config(&cfg))?;
    let artifacts = vec!["checkpoint.bin".to_string(), "metrics.jsonl".to_string()];
    RunManifest::new("train", cfg.seed, snapshot, artifacts).save(&a.out)?;
    println!("finished {} epochs in {:.1}s -> {}", cfg.epochs, start.elapsed().as_secs_f64(), ckpt_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (cfg, state) = checkpoint::load(&a.checkpoint)?;
    let backbone = Backbone::from_params(cfg.backbone.clone(), &state.params)
        .map_err(|e| anyhow::anyhow!("checkpoint {}: {e}", a.checkpoint.display()))?;
    let data = data_root(a.data)?;
    let query = ingest::scan_reid_directory(&data, Split::Query)?;
    let gallery = ingest::scan_reid_directory(&data, Split::Gallery)?;

    let qf = eval::extract_features(&backbone, &state.params, &query)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let gf = eval::extract_features(&backbone, &state.params, &gallery)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let dist = eval::distance_matrix(&qf, &gf).map_err(|e| anyhow::anyhow!("{e}"))?;
    let qp: Vec<usize> = query.iter().map(|r| r.pid).collect();
    let qc: Vec<usize> = query.iter().map(|r| r.camid).collect();
    let gp: Vec<usize> = gallery.iter().map(|r| r.pid).collect();
    let gc: Vec<usize> = gallery.iter().map(|r| r.camid).collect();
    let ranking = eval::cmc_map(&dist, &qp, &qc, &gp, &gc, 10).map_err(|e| anyhow::anyhow!("{e}"))?;

    let out_dir = a
        .out
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&out_dir)?;
    let rep = report::EvalReport::from_ranking(&ranking, gallery.len());
    rep.save(&out_dir.join("report.json"))?;
    let snapshot = serde_json::to_value(config::ConfigFile::from_train_config(&cfg))?;
    RunManifest::new("eval", cfg.seed, snapshot, vec!["report.json".to_string()])
        .save(&out_dir)?;
    print!("{}", rep.table());
    Ok(())
}

fn cmd_visualize(a: VisualizeArgs) -> Result<()> {
    let (cfg, state) = checkpoint::load(&a.checkpoint)?;
    let backbone = Backbone::from_params(cfg.backbone.clone(), &state.params)
        .map_err(|e| anyhow::anyhow!("checkpoint {}: {e}", a.checkpoint.display()))?;
    let data = data_root(a.data)?;
    let split = split_from_name(&a.split)?;
    let mut records = ingest::scan_reid_directory(&data, split)?;
    if a.limit > 0 && records.len() > a.limit {
        records.truncate(a.limit);
    }
    fs::create_dir_all(&a.out)?;

    let mut artifacts = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let name = format!("{i:03}_{:04}_c{}_attn.png", rec.pid, rec.camid);
        viz::write_heatmap(&a.out.join(&name), &backbone, &state.params, &rec.image)?;
        artifacts.push(name);
    }
    let feats = eval::extract_features(&backbone, &state.params, &records)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    viz::write_embeddings(&a.out.join("embeddings.tsv"), &records, &feats)?;
    artifacts.push("embeddings.tsv".to_string());

    let snapshot = serde_json::to_value(config::ConfigFile::from_train_config(&cfg))?;
    RunManifest::new("visualize", cfg.seed, snapshot, artifacts.clone()).save(&a.out)?;
    println!("wrote {} heatmaps and embeddings.tsv to {}", artifacts.len() - 1, a.out.display());
    Ok(())
}

fn cmd_export_canvas(a: ExportCanvasArgs) -> Result<()> {
    let (_, state) = checkpoint::load(&a.checkpoint)?;
    viz::write_canvas(&a.out, &state.canvas.values)?;
    println!("wrote canvas image to {}", a.out.display());
    Ok(())
}
