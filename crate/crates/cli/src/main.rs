use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fusionvit::data::write_kitti_dir;
use fusionvit::harness::{
    evaluate, render_scene, run_ablation, train, AblationKind, Checkpoint, DataSource, Pretrained, RunConfig, TrainMode,
};

#[derive(Parser)]
#[command(name = "fusionvit", version, about = "Train, evaluate and inspect the lidar-camera fusion detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete run configuration with every default spelled out.
    Config {
        /// Use the reduced desk-scale preset.
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the configured synthetic scenes and write them in KITTI layout.
    MakeSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one detector and save its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// camera2d, lidar3d, fusion or fusion_pretrained.
        #[arg(long, default_value = "fusion")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        /// Camera pretraining checkpoint (fusion_pretrained only).
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Lidar pretraining checkpoint (fusion_pretrained only).
        #[arg(long)]
        lidar: Option<PathBuf>,
        /// Per-step loss log as CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Score a checkpoint on its configured dataset, or on another config's.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the dataset and thresholds from this config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Machine-readable report.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and score every variant of an ablation.
    Ablate {
        /// fusion_strategy or component_removal.
        kind: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Draw ground truth and detections for one scene as PNG files.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the scene within the configured dataset.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn config_or(ck: &Checkpoint, path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => ck.config.clone(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { toy, out } => {
            let cfg = if toy { RunConfig::toy() } else { RunConfig::default() };
            let text = cfg.to_toml()?;
            match out {
                Some(p) => std::fs::write(&p, text)?,
                None => print!("{text}"),
            }
        }
        Command::MakeSynth { config, out } => {
            let cfg = RunConfig::load(&config)?;
            if !matches!(cfg.data.source, DataSource::Synthetic { .. }) {
                bail!("make-synth needs a synthetic data source");
            }
            let data = cfg.load_dataset()?;
            write_kitti_dir(&out, &data)?;
            let short = data.samples.iter().filter(|s| s.placement_shortfall).count();
            println!("wrote {} scenes to {} ({short} with fewer boxes than requested)", data.len(), out.display());
        }
        Command::Train {
            config,
            mode,
            out,
            camera,
            lidar,
            losses,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mode: TrainMode = mode.parse()?;
            let data = cfg.load_dataset()?;
            let cams = camera.as_deref().map(Checkpoint::load).transpose()?;
            let lids = lidar.as_deref().map(Checkpoint::load).transpose()?;
            let pretrained = match (&cams, &lids) {
                (Some(c), Some(l)) => Some(Pretrained { camera: c, lidar: l }),
                (None, None) => None,
                _ => bail!("--camera and --lidar must be given together"),
            };
            let outcome = train(&cfg, mode, &data, pretrained)?;
            outcome.checkpoint.save(&out)?;
            if let Some(p) = losses {
                let mut csv = String::from("step,total,cls,center,size,heading,corner\n");
                for (i, l) in outcome.losses.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        i + 1,
                        l.total,
                        l.cls,
                        l.center,
                        l.size,
                        l.heading,
                        l.corner
                    ));
                }
                std::fs::write(&p, csv)?;
            }
            for e in &outcome.evals {
                println!("step {:>6}  mAP_3D {:.4}", e.step, e.map_3d);
            }
            match outcome.steps_to_target {
                Some(s) => println!("target reached after {s} steps"),
                None => println!("ran {} steps", outcome.steps_run),
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { checkpoint, config, json } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config_or(&ck, config.as_deref())?;
            let model = ck.to_model()?;
            let report = evaluate(&model, &cfg.load_dataset()?, &cfg.eval)?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Command::Ablate { kind, config, json } => {
            let cfg = RunConfig::load(&config)?;
            let kind: AblationKind = kind.parse()?;
            let report = run_ablation(kind, &cfg, &cfg.load_dataset()?)?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Command::Render {
            checkpoint,
            scene,
            config,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config_or(&ck, config.as_deref())?;
            let data = cfg.load_dataset()?;
            let Some(sample) = data.samples.get(scene) else {
                bail!("scene {scene} out of range: dataset holds {}", data.len());
            };
            let r = render_scene(&ck.to_model()?, sample, &cfg.eval, &out)?;
            println!(
                "{} and {}: {} ground-truth boxes, {} detections",
                r.bev.display(),
                r.camera.display(),
                r.gt_drawn,
                r.predictions_drawn
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
