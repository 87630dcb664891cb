//! `splatgraph` command line: dataset generation, training, rendering and
//! evaluation. Exit codes: 0 success, 2 usage or data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splatgraph::losses::{write_metrics_csv, FrameMetrics};
use splatgraph::pipeline::{
    evaluate, render_frame, save_checkpoint, train, write_loss_csv, Ablation, Dataset, TrainConfig,
};
use splatgraph::synth::{generate_sequence, NoiseConfig, SynthConfig};
use splatgraph::Error;

#[derive(Parser, Debug)]
#[command(name = "splatgraph", version, about = "Mesh-driven Gaussian splat avatars")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Print the effective training config as TOML and exit.
    #[arg(long)]
    print_config: bool,
    /// Config file used with --print-config.
    #[arg(long, requires = "print_config")]
    config: Option<PathBuf>,
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tracked sequence.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        /// Square image side; must be divisible by 4.
        #[arg(long, default_value_t = 128)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        subdivisions: usize,
        /// Standard deviation of expression noise in the tracked codes.
        #[arg(long, default_value_t = 0.0)]
        expr_noise: f64,
        /// RMS camera rotation jitter in degrees.
        #[arg(long, default_value_t = 0.0)]
        rot_noise_deg: f64,
        /// Per-axis camera translation jitter.
        #[arg(long, default_value_t = 0.0)]
        trans_noise: f64,
    },
    /// Train an avatar on a dataset.
    Train {
        /// Dataset directory (overrides `data` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated components to disable: warmup, neural, ggo, enhancer.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render one frame of a trained avatar.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset to take the frame from (defaults to the training dataset).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Metrics, timing and sizes of a trained avatar.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub const CHECKPOINT_FILE: &str = "checkpoint.gava";

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

struct Paths(PathBuf);

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.0.join(p)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn usage(msg: &str) -> Error {
    Error::Config(msg.into())
}

fn run(cli: Cli) -> splatgraph::Result<()> {
    let paths = Paths(cli.workdir.clone().unwrap_or_else(|| PathBuf::from(".")));
    if cli.print_config {
        let cfg = match &cli.config {
            Some(p) => TrainConfig::load(&paths.resolve(p))?,
            None => TrainConfig::default(),
        };
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| usage("no command given (try --help)"))?;
    match command {
        Command::GenData { seed, frames, res, out, subdivisions, expr_noise, rot_noise_deg, trans_noise } => {
            let cfg = SynthConfig {
                seed,
                frames,
                resolution: res,
                subdivisions,
                noise: NoiseConfig { expr_sigma: expr_noise, rotation_deg: rot_noise_deg, translation_sigma: trans_noise },
                ..SynthConfig::default()
            };
            let out = paths.resolve(&out);
            let m = generate_sequence(&cfg, &out)?;
            log::info!("wrote {} frames at {}x{} to {}", m.frames, res, res, out.display());
        }
        Command::Train { data, out, config, ablate, iters, seed } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(&paths.resolve(p))?,
                None => TrainConfig::default(),
            };
            if let Some(a) = ablate {
                cfg.ablate = Ablation::parse_list(&a)?;
            }
            if let Some(n) = iters {
                cfg.iters = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = match data.or_else(|| cfg.data.as_ref().map(PathBuf::from)) {
                Some(d) => paths.resolve(&d),
                None => return Err(usage("no dataset: pass --data or set `data` in the config")),
            };
            cfg.data = Some(data.to_string_lossy().into_owned());
            cfg.validate()?;
            let dataset = Dataset::load(&data)?;
            let out = paths.resolve(&out);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let fail_dir = out.clone();
            let (model, report) = train(&cfg, &dataset, |m| {
                if let Err(e) = save_checkpoint(m, &fail_dir.join("last_good.gava")) {
                    log::error!("could not save last good parameters: {e}");
                }
            })?;
            write_loss_csv(&out.join("loss.csv"), &report.losses)?;
            let bytes = save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
            let summary = serde_json::json!({
                "iterations": report.losses.len(),
                "final_loss": report.losses.last().map(|r| r.total),
                "pseudo_psnr": report.pseudo.as_ref().map(|p| [p.initial_psnr, p.final_psnr]),
                "warmup_center_error": report.warmup.as_ref().map(|w| w.center_error),
                "dead_groups": report.dead_groups,
                "ckpt_bytes": bytes,
                "seconds": report.seconds,
            });
            std::fs::write(out.join("train_report.json"), serde_json::to_string_pretty(&summary)?)?;
            log::info!("saved {} ({bytes} bytes)", out.join(CHECKPOINT_FILE).display());
        }
        Command::Render { ckpt, frame, out, data } => {
            let (model, dataset) = open(&paths, &ckpt, data)?;
            let f = dataset
                .frames
                .get(frame)
                .ok_or_else(|| Error::Data(format!("frame {frame} out of range (dataset has {})", dataset.len())))?;
            let (_, test) = dataset.split(model.config.test_frames)?;
            let use_ggo = !test.contains(&frame) || model.config.ggo_at_test;
            let r = render_frame(&model, f.into(), use_ggo)?;
            let intr = f.camera.intrinsics;
            let out = paths.resolve(&out);
            r.save(&out, intr.near, intr.far)?;
            log::info!("wrote coarse, final, depth and weight images to {}", out.display());
        }
        Command::Evaluate { ckpt, data, out } => {
            let ckpt = paths.resolve(&ckpt);
            let bytes = std::fs::metadata(&ckpt)?.len();
            let (model, dataset) = open(&paths, &ckpt, data)?;
            let report = evaluate(&model, &dataset, bytes)?;
            let out = paths.resolve(&out);
            std::fs::create_dir_all(&out)?;
            let mut rows: Vec<FrameMetrics> = report.train_frames.clone();
            rows.extend(report.test_frames.iter().cloned());
            write_metrics_csv(&out.join("metrics.csv"), &rows)?;
            std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
            log::info!(
                "test PSNR {:.2} dB, SSIM {:.4}; checkpoint {} B vs raw clouds {} B",
                report.psnr,
                report.ssim,
                report.ckpt_bytes,
                report.raw_cloud_bytes
            );
        }
    }
    Ok(())
}

/// Loads a checkpoint together with its dataset (explicit or recorded at training).
fn open(paths: &Paths, ckpt: &Path, data: Option<PathBuf>) -> splatgraph::Result<(splatgraph::pipeline::Model, Dataset)> {
    let ckpt = paths.resolve(ckpt);
    let header = splatgraph::pipeline::Checkpoint::load(&ckpt)?;
    let data = match data.or_else(|| header.config.data.as_ref().map(PathBuf::from)) {
        Some(d) => paths.resolve(&d),
        None => return Err(usage("checkpoint records no dataset; pass --data")),
    };
    let dataset = Dataset::load(&data)?;
    let model = header.into_model(&dataset.template)?;
    Ok((model, dataset))
}
