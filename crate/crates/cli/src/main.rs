use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use lane3d::config::RunConfig;
use lane3d::dataset::save_dataset;
use lane3d::eval::{sequence_stability, threshold};
use lane3d::plot::{plot_frame, plot_stability};
use lane3d::runner::{evaluate, image_size, load_data, PredictionsFile};
use lane3d::train::{build_model, checkpoint_config, read_manifest, Trainer};
use lane3d::Error;

#[derive(Parser)]
#[command(
    name = "lane3d",
    version,
    about = "Monocular 3D lane detection with sparse curve queries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for model initialization, data order and scene generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Config overrides such as `fusion.variant=topk_query_anchors`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model; `--checkpoint` resumes from a saved state.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write JSON and CSV reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run a checkpoint and write per-frame predictions.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Draw SVG figures from a predictions file written by `infer`.
    Plot {
        /// predictions.json
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn quoted(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

/// Resolves the configuration: file (or `base`), then flags, then dotted overrides.
fn resolve(common: &Common, base: Option<RunConfig>, mut flags: Vec<String>) -> Result<RunConfig> {
    if let Some(s) = common.seed {
        flags.push(format!("seed={s}"));
        flags.push(format!("data.scene.seed={s}"));
    }
    if let Some(o) = &common.out {
        flags.push(format!("out_dir={}", quoted(o)));
    }
    flags.extend(common.overrides.iter().cloned());
    let cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(Some(path), &flags)?,
        (None, Some(b)) => b.with_overrides(&flags)?,
        (None, None) => RunConfig::load(None, &flags)?,
    };
    Ok(cfg)
}

fn ensure_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::OutputNotEmpty(dir.to_path_buf()).into());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dataset_flag(d: &Option<PathBuf>) -> Vec<String> {
    d.iter().map(|p| format!("data.dataset={}", quoted(p))).collect()
}

fn generate(common: &Common, sequences: Option<usize>, frames: Option<usize>) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(n) = sequences {
        flags.push(format!("data.sequences={n}"));
    }
    if let Some(n) = frames {
        flags.push(format!("data.frames={n}"));
    }
    let mut cfg = resolve(common, None, flags)?;
    cfg.data.dataset = None;
    ensure_out(&cfg.out_dir, common.force)?;
    for sub in ["sequences", "images", "masks"] {
        let p = cfg.out_dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).with_context(|| format!("clearing {}", p.display()))?;
        }
    }
    let data = load_data(&cfg)?;
    let frames: Vec<_> = data.into_iter().flatten().collect();
    save_dataset(&frames, &cfg.out_dir, cfg.data.scene.seed, cfg.echo())?;
    info!("wrote {} frames to {}", frames.len(), cfg.out_dir.display());
    Ok(())
}

fn train(common: &Common, checkpoint: &Option<PathBuf>, dataset: &Option<PathBuf>) -> Result<()> {
    let base = checkpoint.as_deref().map(checkpoint_config).transpose()?;
    let cfg = resolve(common, base, dataset_flag(dataset))?;
    if checkpoint.is_none() {
        ensure_out(&cfg.out_dir, common.force)?;
    }
    let data = load_data(&cfg)?;
    let out = cfg.out_dir.clone();
    let mut trainer = match checkpoint {
        Some(dir) => Trainer::resume(cfg, data, dir)?,
        None => Trainer::new(cfg, data)?,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &trainer.cfg.echo())?;
    let total = trainer.total_steps();
    let last = trainer.run(&out, |l| {
        info!(
            "step {}/{total} loss {:.4} (curve {:.4}, query {:.4}, seg {:.4})",
            l.step, l.total_loss, l.l_curve, l.l_query, l.l_seg
        )
    })?;
    println!("{}", last.display());
    Ok(())
}

/// Configuration for running a checkpoint: `--config` if given, else the checkpoint's own.
fn checkpoint_run_config(common: &Common, checkpoint: &Path, dataset: &Option<PathBuf>) -> Result<RunConfig> {
    let base = if common.config.is_some() {
        None
    } else {
        Some(checkpoint_config(checkpoint)?)
    };
    resolve(common, base, dataset_flag(dataset))
}

fn eval(common: &Common, checkpoint: &Path, dataset: &Option<PathBuf>) -> Result<()> {
    let cfg = checkpoint_run_config(common, checkpoint, dataset)?;
    ensure_out(&cfg.out_dir, common.force)?;
    let data = load_data(&cfg)?;
    let (model, store) = build_model(&cfg, image_size(&data)?, Some(checkpoint))?;
    let (summary, _) = evaluate(&model, &store, &data, &cfg.fusion, &cfg.eval_config())?;
    let step = read_manifest(checkpoint)?.step;
    let report = serde_json::json!({
        "config": cfg.echo(),
        "checkpoint_step": step,
        "summary": summary,
    });
    write_json(&cfg.out_dir.join("report.json"), &report)?;
    fs::write(cfg.out_dir.join("report.csv"), summary.to_csv()).context("writing report.csv")?;
    if let Some(stab) = &summary.stability {
        write_json(&cfg.out_dir.join("stability.json"), stab)?;
        let mut csv = String::from("sequence_id,series_index,dist_x\n");
        for s in &stab.sequences {
            for (i, d) in s.dist_x.iter().enumerate() {
                csv.push_str(&format!("{},{i},{d}\n", s.sequence_id));
            }
        }
        fs::write(cfg.out_dir.join("stability.csv"), csv).context("writing stability.csv")?;
    }
    println!("{}", serde_json::to_string_pretty(&summary.openlane)?);
    Ok(())
}

fn infer(common: &Common, checkpoint: &Path, dataset: &Option<PathBuf>) -> Result<()> {
    let cfg = checkpoint_run_config(common, checkpoint, dataset)?;
    ensure_out(&cfg.out_dir, common.force)?;
    let data = load_data(&cfg)?;
    let (model, store) = build_model(&cfg, image_size(&data)?, Some(checkpoint))?;
    let preds = data
        .iter()
        .map(|seq| lane3d::runner::infer_sequence(&model, &store, seq, &cfg.fusion))
        .collect::<lane3d::Result<Vec<_>>>()?;
    let file = PredictionsFile::new(&cfg, &data, preds);
    let path = cfg.out_dir.join("predictions.json");
    write_json(&path, &file)?;
    println!("{}", path.display());
    Ok(())
}

fn plot(input: &Path, out: &Path, force: bool) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let file: PredictionsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
    if file.sequences.iter().all(|s| s.frames.is_empty()) {
        return Err(Error::EmptyInput(format!("{} has no frames", input.display())).into());
    }
    let cfg: RunConfig = serde_json::from_value(file.config.clone()).context("reading the config echo")?;
    let eval_cfg = cfg.eval_config();
    let world = cfg.data.scene.world;
    ensure_out(out, force)?;
    let mut written = 0;
    for seq in &file.sequences {
        let mut series = Vec::new();
        for f in &seq.frames {
            let kept: Vec<_> = f
                .predictions
                .iter()
                .filter(|p| p.lane.confidence >= eval_cfg.confidence_threshold)
                .cloned()
                .collect();
            let layers = f.predictions.iter().map(|p| p.layer_anchors.len()).max().unwrap_or(0);
            let dir = out.join(&seq.sequence_id).join(format!("frame_{:06}", f.index));
            let title = format!("{} frame {}", seq.sequence_id, f.index);
            written += plot_frame(&dir, &title, &kept, &f.ground_truth, &world, layers)?.len();
            let lanes: Vec<_> = f.predictions.iter().map(|p| p.lane.clone()).collect();
            series.push((threshold(&lanes, &eval_cfg), f.ground_truth.clone()));
        }
        if series.len() >= 2 {
            let s = sequence_stability(&seq.sequence_id, &series, &eval_cfg)?;
            plot_stability(&out.join(&seq.sequence_id).join("stability.svg"), &s, series.len())?;
            written += 1;
        }
    }
    info!("wrote {written} figures to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate {
            common,
            sequences,
            frames,
        } => generate(common, *sequences, *frames),
        Command::Train {
            common,
            checkpoint,
            dataset,
        } => train(common, checkpoint, dataset),
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => eval(common, checkpoint, dataset),
        Command::Infer {
            common,
            checkpoint,
            dataset,
        } => infer(common, checkpoint, dataset),
        Command::Plot { input, out, force } => plot(input, out, *force),
    }
}
