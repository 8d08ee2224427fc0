use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::SelectorMode;
use super::metrics::{psnr, ssim};
use super::train::select_sources;
use crate::error::{ensure, Result};
use crate::geometry::{perturb_pose, RelativePose};
use crate::image::Image;
use crate::model::Model;
use crate::renderer::RaySettings;
use crate::scenes::{SceneDataset, Split};
use crate::selector::selection_accuracy;

/// A held-out view together with the origin it is rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTarget {
    pub target: usize,
    /// Nearest training view by ground-truth key.
    pub origin: usize,
    /// Target → origin.
    pub pose: RelativePose,
    /// Training views other than the origin.
    pub candidates: Vec<usize>,
    /// `candidates` ordered nearest-first relative to the origin.
    pub gt_ranking: Vec<usize>,
}

pub fn eval_targets(ds: &SceneDataset, split: Split) -> Result<Vec<EvalTarget>> {
    let ids = ds.ids(split);
    ensure!(!ids.is_empty(), "dataset has no {split:?} views");
    let train = ds.ids(Split::Train);
    ids.into_iter()
        .map(|target| {
            let pool: Vec<usize> = train.iter().copied().filter(|&v| v != target).collect();
            ensure!(!pool.is_empty(), "no training view available as origin for view {target}");
            let origin = ds.gt_ranking(target, &pool)?[0];
            let candidates: Vec<usize> = pool.into_iter().filter(|&v| v != origin).collect();
            Ok(EvalTarget {
                target,
                origin,
                pose: ds.relative(target, origin)?,
                gt_ranking: ds.gt_ranking(origin, &candidates)?,
                candidates,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mode: SelectorMode,
    pub k: usize,
    /// Seeds random selection, one stream per target.
    pub seed: u64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    pub selection_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = MetricRow {
            view: "mean".into(),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            selection_accuracy: avg(|r| r.selection_accuracy),
        };
        Self { rows, mean }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Renders every target with sources chosen by `opts.mode`.
///
/// `ds` supplies images and, for oracle selection, poses; `targets` fixes
/// origins and relative target poses.
pub fn evaluate_model(
    model: &Model<f32>,
    ds: &SceneDataset,
    targets: &[EvalTarget],
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Image>)> {
    let rays = RaySettings {
        near: ds.near,
        far: ds.far,
        points: opts.points,
        background: ds.background,
    };
    let mut rows = Vec::with_capacity(targets.len());
    let mut renders = Vec::with_capacity(targets.len());
    for t in targets {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (t.target as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let sources = select_sources(model, ds, t.origin, &t.candidates, opts.k, opts.mode, &mut rng)?;
        let origin = ds.view(t.origin)?;
        let target = ds.view(t.target)?;
        let images = sources
            .iter()
            .map(|&s| Ok(&ds.view(s)?.image))
            .collect::<Result<Vec<_>>>()?;
        let ctx = model.freeze_context(&origin.image, &images)?;
        let img = model.render_image(&ctx, &target.intrinsics, &t.pose, &origin.intrinsics, &rays)?;
        let truth = &t.gt_ranking[..sources.len().min(t.gt_ranking.len())];
        rows.push(MetricRow {
            view: t.target.to_string(),
            psnr: psnr(&img, &target.image)?,
            ssim: ssim(&img, &target.image)?,
            selection_accuracy: selection_accuracy(&sources, truth),
        });
        renders.push(img);
    }
    Ok((EvalReport::from_rows(rows), renders))
}

/// Scores each target against its origin image, unchanged.
pub fn origin_copy_report(ds: &SceneDataset, targets: &[EvalTarget]) -> Result<EvalReport> {
    let rows = targets
        .iter()
        .map(|t| {
            let (o, v) = (&ds.view(t.origin)?.image, &ds.view(t.target)?.image);
            Ok(MetricRow {
                view: t.target.to_string(),
                psnr: psnr(o, v)?,
                ssim: ssim(o, v)?,
                selection_accuracy: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// Evaluates `split`, writing `view_NNN.png` renders and `metrics.csv` to `out`.
pub fn evaluate(
    model: &Model<f32>,
    ds: &SceneDataset,
    split: Split,
    opts: &EvalOptions,
    out: &Path,
) -> Result<EvalReport> {
    let targets = eval_targets(ds, split)?;
    let (report, renders) = evaluate_model(model, ds, &targets, opts)?;
    std::fs::create_dir_all(out)?;
    for (t, img) in targets.iter().zip(&renders) {
        img.save_png(&out.join(format!("view_{:03}.png", t.target)))?;
    }
    report.write_csv(&out.join("metrics.csv"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub selection_accuracy: f64,
}

/// Re-evaluates the test split after perturbing every stored view pose by
/// `sigma`. Origins and target poses stay fixed unless `perturb_target` is
/// set, in which case each relative target pose is perturbed as well.
pub fn perturb_and_evaluate(
    model: &Model<f32>,
    ds: &SceneDataset,
    sigmas: &[f64],
    opts: &EvalOptions,
    perturb_target: bool,
) -> Result<Vec<NoiseRow>> {
    let clean = eval_targets(ds, Split::Test)?;
    sigmas
        .iter()
        .map(|&sigma| {
            ensure!(sigma >= 0.0 && sigma.is_finite(), "invalid noise level {sigma}");
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ sigma.to_bits());
            let mut noisy = ds.clone();
            for v in &mut noisy.views {
                v.pose = perturb_pose(&v.pose, sigma, &mut rng)?;
            }
            let mut targets = clean.clone();
            if perturb_target {
                for t in &mut targets {
                    t.pose = perturb_pose(&t.pose, sigma, &mut rng)?;
                }
            }
            let (report, _) = evaluate_model(model, &noisy, &targets, opts)?;
            Ok(NoiseRow {
                sigma,
                psnr: report.mean.psnr,
                ssim: report.mean.ssim,
                selection_accuracy: report.mean.selection_accuracy,
            })
        })
        .collect()
}

pub fn write_noise_table(path: &Path, rows: &[NoiseRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
