use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use psrp_core::checkpoint::Checkpoint;
use psrp_core::config::SEED_ENV;
use psrp_core::data::{generate_synthetic, load_coco, load_image, resize_image, rgb_to_tensor, DatasetManifest, SynthConfig};
use psrp_core::decode::DetectionSet;
use psrp_core::eval::{evaluate, load_results, Metrics, MetricsTable};
use psrp_core::model::infer_image;
use psrp_core::render::render_detections;
use psrp_core::train::{detector_from_checkpoint, run_ablation, train, FINAL_CHECKPOINT, LOG_FILE};
use psrp_core::RunConfig;

#[derive(Parser)]
#[command(name = "psrp", version, about = "Anchor-free detector with a shared encoder-decoder and semantic-revised decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and write checkpoints plus a JSONL loss log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for checkpoints and the log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its stored config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score COCO-format detections against COCO annotations.
    Eval {
        /// Ground-truth annotation JSON.
        #[arg(long)]
        annotations: PathBuf,
        /// Detections in the COCO results format.
        #[arg(long)]
        detections: PathBuf,
        /// Write the metrics table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect objects in one image with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Decode from the geometric location instead of the semantic centre.
        #[arg(long)]
        no_revise: bool,
        #[arg(long)]
        score_threshold: Option<f64>,
        /// Write the detection set as JSON (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render the detections to this PNG.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Generate a synthetic shapes dataset (PNGs plus COCO JSON).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        num_images: usize,
        #[arg(long, default_value_t = 128)]
        image_size: u32,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        /// Falls back to PSRP_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train variants A, B, C and ours and compare them with and without revision.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for per-variant runs and ablation.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a detection set onto an image.
    Render {
        #[arg(long)]
        image: PathBuf,
        /// Detection set JSON as written by `infer`.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// COCO annotation JSON.
    #[arg(long)]
    annotations: PathBuf,
    /// Image root (defaults to the annotation file's directory).
    #[arg(long)]
    images: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<DatasetManifest> {
        let root = match &self.images {
            Some(r) => r.clone(),
            None => self.annotations.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        load_coco(&self.annotations, &root).with_context(|| format!("loading {}", self.annotations.display()))
    }
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load_with_env(self.config.as_ref(), &self.overrides)?)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { run, data, out, resume } => {
            let cfg = run.load()?;
            let manifest = data.load()?;
            let outcome = train(&cfg, &manifest, Some(&out), resume.as_deref())?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "iteration {} loss {:.4} (cls {:.4} reg {:.4} ctr {:.4})",
                    last.iteration, last.total, last.cls, last.reg, last.center
                );
            }
            println!("log: {}", out.join(LOG_FILE).display());
            println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
        }
        Command::Eval {
            annotations,
            detections,
            out,
        } => {
            let root = annotations.parent().unwrap_or(Path::new(".")).to_path_buf();
            let manifest = load_coco(&annotations, &root)?;
            let sets = load_results(&detections, &manifest)?;
            let table = evaluate(&sets, &manifest)?;
            print_table(&table, &manifest);
            if let Some(p) = out {
                table.save(&p)?;
            }
        }
        Command::Infer {
            checkpoint,
            image,
            no_revise,
            score_threshold,
            out,
            render,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = RunConfig::from_toml(&ckpt.config)?;
            let model = detector_from_checkpoint(&ckpt)?;
            let mut pp = cfg.postprocess.clone();
            pp.revise = !no_revise;
            if let Some(t) = score_threshold {
                pp.score_threshold = t;
            }
            pp.validate()?;
            let rgb = load_image(&image)?;
            let (w, h) = rgb.dimensions();
            let resized = resize_image(&rgb_to_tensor(&rgb), cfg.train.input_size);
            let set = infer_image(&model, 0, &resized.pixels, &pp)?.rescaled(resized.scale, w as f64, h as f64);
            let json = serde_json::to_string_pretty(&set)?;
            match out {
                Some(p) => std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            if let Some(p) = render {
                render_detections(&rgb, &set, &p)?;
            }
            eprintln!("{} detections", set.detections.len());
        }
        Command::SynthData {
            out,
            num_images,
            image_size,
            max_objects,
            seed,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => match std::env::var(SEED_ENV) {
                    Ok(s) => s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?}"))?,
                    Err(_) => 0,
                },
            };
            let cfg = SynthConfig {
                num_images,
                image_size,
                max_objects_per_image: max_objects,
                ..Default::default()
            };
            let m = generate_synthetic(&cfg, seed, Some(&out))?;
            println!(
                "{} images, {} objects -> {}",
                m.images.len(),
                m.annotations.len(),
                out.join("annotations.json").display()
            );
        }
        Command::Ablate { run, data, out } => {
            let cfg = run.load()?;
            let manifest = data.load()?;
            let report = run_ablation(&cfg, &manifest, Some(&out))?;
            println!("{:<6} {:<7} {:>7} {:>7} {:>7} {:>9} {:>8}", "model", "revise", "AP", "AP50", "AP75", "params", "train_s");
            for r in &report.rows {
                println!(
                    "{:<6} {:<7} {:>7} {:>7} {:>7} {:>9} {:>8.1}",
                    r.variant.name(),
                    r.revise,
                    pct(r.metrics.ap),
                    pct(r.metrics.ap50),
                    pct(r.metrics.ap75),
                    r.param_count,
                    r.train_seconds
                );
            }
            let p = out.join("ablation.json");
            std::fs::write(&p, report.to_json()?).with_context(|| format!("writing {}", p.display()))?;
        }
        Command::Render { image, detections, out } => {
            let text = std::fs::read_to_string(&detections).with_context(|| format!("reading {}", detections.display()))?;
            let set: DetectionSet = serde_json::from_str(&text).with_context(|| format!("parsing {}", detections.display()))?;
            let rgb = load_image(&image)?;
            render_detections(&rgb, &set, &out)?;
        }
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

fn print_table(table: &MetricsTable, manifest: &DatasetManifest) {
    let row = |name: &str, m: &Metrics| {
        println!(
            "{name:<12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            pct(m.ap),
            pct(m.ap50),
            pct(m.ap75),
            pct(m.ap_s),
            pct(m.ap_m),
            pct(m.ap_l)
        )
    };
    println!("{:<12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "class", "AP", "AP50", "AP75", "APs", "APm", "APl");
    for (c, m) in &table.per_class {
        row(manifest.categories.get(c).map_or("?", String::as_str), m);
    }
    row("all", &table.aggregate);
}
