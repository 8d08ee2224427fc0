use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{SelectorMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, StepInputs};
use crate::numeric::{AdamState, Graph};
use crate::renderer::RaySettings;
use crate::scenes::{make_training_example, SceneDataset, Split, TrainingExample};
use crate::selector::select_top_k;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub photometric: f64,
    pub selector: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
}

pub fn ray_settings(config: &TrainConfig, ds: &SceneDataset) -> RaySettings {
    RaySettings {
        near: ds.near,
        far: ds.far,
        points: config.points_per_ray,
        background: ds.background,
    }
}

/// Orders up to `k` of `candidates` as sources for `origin`.
pub fn select_sources(
    model: &Model<f32>,
    ds: &SceneDataset,
    origin: usize,
    candidates: &[usize],
    k: usize,
    mode: SelectorMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    match mode {
        SelectorMode::Random => Ok(candidates.choose_multiple(rng, k).copied().collect()),
        SelectorMode::Oracle => {
            let mut r = ds.gt_ranking(origin, candidates)?;
            r.truncate(k);
            Ok(r)
        }
        SelectorMode::Learned => {
            let views = candidates
                .iter()
                .map(|&c| Ok((c, &ds.view(c)?.image)))
                .collect::<Result<Vec<_>>>()?;
            let scores = model
                .selector
                .score_views(&model.params, &ds.view(origin)?.image, &views)?;
            select_top_k(&scores, k)
        }
    }
}

fn step_inputs<'a>(
    config: &TrainConfig,
    ds: &'a SceneDataset,
    ex: &TrainingExample,
    sources: &[usize],
) -> Result<StepInputs<'a>> {
    let origin = ds.view(ex.origin)?;
    let target = ds.view(ex.target)?;
    let train = ds.ids(Split::Train);
    let with_selector = config.selector_weight > 0.0;
    Ok(StepInputs {
        origin: &origin.image,
        origin_intrinsics: origin.intrinsics,
        sources: sources
            .iter()
            .map(|&s| Ok(&ds.view(s)?.image))
            .collect::<Result<_>>()?,
        target_intrinsics: target.intrinsics,
        pose: ex.pose,
        pixels: ex.pixels.clone(),
        colors: ex.colors.clone(),
        rays: ray_settings(config, ds),
        selector_views: if with_selector {
            train
                .iter()
                .map(|&v| Ok(&ds.view(v)?.image))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        },
        selector_targets: if with_selector {
            ex.selector_targets.clone()
        } else {
            Vec::new()
        },
        selector_weight: config.selector_weight,
    })
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: u64,
    origin: usize,
    target: usize,
    sources: &'a [usize],
    pixels: &'a [(f64, f64)],
    total: f64,
    photometric: f64,
    selector: f64,
    first_non_finite_node: Option<&'a str>,
}

/// Runs `config.steps` optimisation steps from a fresh initialisation.
///
/// On a non-finite loss the offending batch is described in
/// `non_finite_batch.json` under `dump_dir` and training stops.
pub fn train(config: &TrainConfig, ds: &SceneDataset, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    ds.validate()?;
    let mut model: Model<f32> = Model::new(config.model.clone(), config.seed)?;
    let mut adam_cfg = config.adam.clone();
    adam_cfg.decay_steps = config.steps;
    let mut adam = AdamState::new(adam_cfg, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.steps as usize);
    let started = std::time::Instant::now();
    for step in 0..config.steps {
        let ex = make_training_example(ds, &mut rng, config.rays_per_iter, config.target_neighbors)?;
        let sources = select_sources(
            &model,
            ds,
            ex.origin,
            &ex.candidates,
            config.k_views,
            config.selector_mode,
            &mut rng,
        )?;
        let inputs = step_inputs(config, ds, &ex, &sources)?;
        let mut g = Graph::new();
        g.set_check_finite(true);
        let losses = model.step_losses(&mut g, &inputs)?;
        let val = |v| g.value(v).item() as f64;
        let record = LossRecord {
            step,
            total: val(losses.total),
            photometric: val(losses.photometric),
            selector: losses.selector.map(val).unwrap_or(0.0),
            lr: adam.current_lr(),
        };
        if !record.total.is_finite() {
            let dump = FailureDump {
                step,
                origin: ex.origin,
                target: ex.target,
                sources: &sources,
                pixels: &ex.pixels,
                total: record.total,
                photometric: record.photometric,
                selector: record.selector,
                first_non_finite_node: g.non_finite(),
            };
            let mut msg = format!(
                "loss {} at step {step} (origin {}, target {}, first non-finite node {:?})",
                record.total,
                ex.origin,
                ex.target,
                g.non_finite()
            );
            if let Some(dir) = dump_dir {
                let path = dir.join("non_finite_batch.json");
                std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
                msg.push_str(&format!("; batch written to {}", path.display()));
            }
            return Err(Error::NonFinite(msg));
        }
        let grads = g.backward(losses.total)?;
        drop(g);
        adam.step(&mut model.params, &grads)?;
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            eprintln!(
                "step {:>6}  loss {:.5}  photo {:.5}  sel {:.5}  lr {:.2e}  {:.0}s",
                step,
                record.total,
                record.photometric,
                record.selector,
                record.lr,
                started.elapsed().as_secs_f64()
            );
        }
        curve.push(record);
    }
    let checkpoint = Checkpoint {
        step: config.steps,
        config: config.clone(),
        params: model.params.clone(),
        adam,
        rng: RngState::capture(&rng),
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        curve,
    })
}

pub fn write_loss_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
