use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ovr::geometry::Se3;
use ovr::pipeline::checkpoint::Checkpoint;
use ovr::pipeline::config::{SelectorMode, TrainConfig};
use ovr::pipeline::eval::{self, EvalOptions};
use ovr::pipeline::train::{self, write_loss_curve};
use ovr::renderer::RaySettings;
use ovr::scenes::{generate_scene, ImageStorage, SceneDataset, Split};
use ovr::{Error, Result};

#[derive(Parser)]
#[command(name = "ovr", version, about = "Pose-free novel view synthesis on procedural scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on one scene and write a checkpoint.
    Train {
        /// TOML or JSON training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Render one view given its pose relative to an origin view.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Target-to-origin transform as 12 row-major values of `[R | t]`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        pose: Vec<f64>,
        /// Id of the origin view.
        #[arg(long, default_value_t = 0)]
        origin: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a split and write PNGs plus `metrics.csv`.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        selector: Option<SelectorMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out metrics after perturbing stored view poses.
    Perturb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.003,0.1")]
        sigmas: Vec<f64>,
        /// Also perturb the target pose handed to the renderer.
        #[arg(long)]
        perturb_target: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with ablation flags and evaluate the test split.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated `key=value` pairs, e.g. `omniview=off,film=off`.
        #[arg(long, default_value = "")]
        flags: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a procedural scene with ground-truth renders.
    GenScene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        views: usize,
        #[arg(long, default_value = "64x64")]
        res: String,
        /// Write images as `view_NNN.png` files next to the JSON.
        #[arg(long)]
        sidecar: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("resolution {s:?} is not WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?} (expected train or test)"))),
    }
}

fn eval_options(cfg: &TrainConfig, mode: Option<SelectorMode>) -> EvalOptions {
    EvalOptions {
        mode: mode.unwrap_or(cfg.selector_mode),
        k: cfg.k_views,
        seed: cfg.seed,
        points: cfg.points_per_ray,
    }
}

fn train_and_save(cfg: &TrainConfig, ds: &SceneDataset, out: &Path, curve: &Path) -> Result<train::TrainOutcome> {
    let dump = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let outcome = train::train(cfg, ds, Some(dump))?;
    outcome.checkpoint.save(out)?;
    write_loss_curve(curve, &outcome.curve)?;
    Ok(outcome)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            scene,
            out,
            curve,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = SceneDataset::load(&scene)?;
            let curve = curve.unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", out.display())));
            let outcome = train_and_save(&cfg, &ds, &out, &curve)?;
            let last = outcome.curve.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.6}", cfg.steps);
        }
        Command::Render {
            ckpt,
            scene,
            pose,
            origin,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let ds = SceneDataset::load(&scene)?;
            let pose = Se3::from_row_major_3x4(&pose).map_err(|e| Error::Config(format!("--pose: {e}")))?;
            let o = ds.view(origin)?;
            let candidates: Vec<usize> = ds
                .ids(Split::Train)
                .into_iter()
                .filter(|&v| v != origin)
                .collect();
            let mut rng = ck.rng.restore()?;
            let sources = train::select_sources(
                &model,
                &ds,
                origin,
                &candidates,
                ck.config.k_views,
                ck.config.selector_mode,
                &mut rng,
            )?;
            let images = sources
                .iter()
                .map(|&s| Ok(&ds.view(s)?.image))
                .collect::<Result<Vec<_>>>()?;
            let ctx = model.freeze_context(&o.image, &images)?;
            let rays = RaySettings {
                near: ds.near,
                far: ds.far,
                points: ck.config.points_per_ray,
                background: ds.background,
            };
            let img = model.render_image(&ctx, &o.intrinsics, &pose, &o.intrinsics, &rays)?;
            img.save_png(&out)?;
            println!("rendered from origin {origin} with sources {sources:?}");
        }
        Command::Evaluate {
            ckpt,
            scene,
            split,
            selector,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let ds = SceneDataset::load(&scene)?;
            let opts = eval_options(&ck.config, selector);
            let report = eval::evaluate(&model, &ds, parse_split(&split)?, &opts, &out)?;
            println!(
                "{} views: PSNR {:.3} dB, SSIM {:.4}",
                report.rows.len(),
                report.mean.psnr,
                report.mean.ssim
            );
        }
        Command::Perturb {
            ckpt,
            scene,
            sigmas,
            perturb_target,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let ds = SceneDataset::load(&scene)?;
            let rows = eval::perturb_and_evaluate(&model, &ds, &sigmas, &eval_options(&ck.config, None), perturb_target)?;
            eval::write_noise_table(&out, &rows)?;
            for r in &rows {
                println!("sigma {:<8} PSNR {:.6} SSIM {:.6}", r.sigma, r.psnr, r.ssim);
            }
        }
        Command::Ablate {
            config,
            scene,
            flags,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.apply_flags(&flags)?;
            let ds = SceneDataset::load(&scene)?;
            std::fs::create_dir_all(&out)?;
            let outcome = train_and_save(&cfg, &ds, &out.join("model.ckpt"), &out.join("loss.csv"))?;
            let report = eval::evaluate(&outcome.model, &ds, Split::Test, &eval_options(&cfg, None), &out)?;
            let baseline = eval::origin_copy_report(&ds, &eval::eval_targets(&ds, Split::Test)?)?;
            println!(
                "flags [{flags}]: held-out PSNR {:.3} dB, SSIM {:.4} (origin copy {:.3} dB)",
                report.mean.psnr, report.mean.ssim, baseline.mean.psnr
            );
        }
        Command::GenScene {
            seed,
            views,
            res,
            sidecar,
            out,
        } => {
            let (w, h) = parse_res(&res)?;
            let ds = generate_scene(seed, views, w, h)?;
            let storage = if sidecar {
                ImageStorage::Sidecar
            } else {
                ImageStorage::Embedded
            };
            ds.save(&out, storage)?;
            println!("wrote {} views at {w}x{h} to {}", ds.views.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::NonFinite(_) => 3,
                _ => 1,
            })
        }
    }
}
