use ovr::image::Image;
use ovr::model::{photometric_loss, Model, ModelConfig, StepInputs};
use ovr::numeric::{gradcheck, Graph, Tensor};
use ovr::pipeline::checkpoint::{Checkpoint, MAGIC};
use ovr::pipeline::eval::{
    eval_targets, evaluate, evaluate_model, origin_copy_report, perturb_and_evaluate, EvalOptions,
};
use ovr::pipeline::metrics::{mse, psnr, psnr_from_mse, ssim, PSNR_CAP};
use ovr::pipeline::{train, SelectorMode, TrainConfig};
use ovr::renderer::RaySettings;
use ovr::scenes::{generate_scene, make_training_example, SceneDataset, Split};
use ovr::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        rays_per_iter: 16,
        points_per_ray: 4,
        k_views: 2,
        model: ModelConfig::micro(),
        ..TrainConfig::default()
    }
}

fn scene() -> SceneDataset {
    generate_scene(1, 8, 32, 32).unwrap()
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn options() -> EvalOptions {
    EvalOptions {
        mode: SelectorMode::Learned,
        k: 2,
        seed: 0,
        points: 4,
    }
}

fn step_inputs<'a>(ds: &'a SceneDataset, rng: &mut ChaCha8Rng, rays: usize, points: usize) -> StepInputs<'a> {
    let ex = make_training_example(ds, rng, rays, None).unwrap();
    let train = ds.ids(Split::Train);
    StepInputs {
        origin: &ds.view(ex.origin).unwrap().image,
        origin_intrinsics: ds.view(ex.origin).unwrap().intrinsics,
        sources: ex.candidates[..2].iter().map(|&s| &ds.view(s).unwrap().image).collect(),
        target_intrinsics: ds.view(ex.target).unwrap().intrinsics,
        pose: ex.pose,
        pixels: ex.pixels.clone(),
        colors: ex.colors.clone(),
        rays: RaySettings {
            near: ds.near,
            far: ds.far,
            points,
            background: ds.background,
        },
        selector_views: train.iter().map(|&v| &ds.view(v).unwrap().image).collect(),
        selector_targets: ex.selector_targets.clone(),
        selector_weight: 1.0,
    }
}

#[test]
fn photometric_loss_fixture() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(&[2, 3], vec![0.0, 0.5, 1.0, 0.2, 0.2, 0.2]).unwrap());
    let b = g.constant(Tensor::new(&[2, 3], vec![0.1, 0.5, 0.7, 0.2, 0.0, 0.2]).unwrap());
    let l = photometric_loss(&mut g, a, b).unwrap();
    assert!((g.value(l).item() - (0.01 + 0.09 + 0.04) / 6.0).abs() < 1e-12);
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(photometric_loss(&mut g, a, c).is_err());
}

#[test]
fn psnr_fixtures() {
    let a = noise_image(16, 16, 0);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = Image::filled(16, 16, [0.5; 3]);
    let c = Image::filled(16, 16, [0.625; 3]);
    assert_eq!(mse(&b, &c).unwrap(), 0.015625);
    assert_eq!(psnr_from_mse(0.01), 20.0);
    assert_eq!(psnr_from_mse(1e-12), PSNR_CAP);
    assert_eq!(psnr(&b, &c).unwrap(), psnr(&c, &b).unwrap());
    assert!(psnr(&b, &Image::filled(8, 16, [0.5; 3])).is_err());
}

#[test]
fn ssim_fixtures() {
    let a = noise_image(24, 20, 1);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let mut checker = Image::filled(32, 32, [0.0; 3]);
    for y in 0..32 {
        for x in 0..32 {
            if (x + y) % 2 == 0 {
                checker.set_pixel(x, y, [1.0; 3]);
            }
        }
    }
    let negative = Image::new(32, 32, checker.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(ssim(&checker, &negative).unwrap() < 0.1);
    let b = noise_image(24, 20, 2);
    assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!(ssim(&a, &b).unwrap() < 0.2);
    assert!(ssim(&Image::filled(8, 8, [0.0; 3]), &Image::filled(8, 8, [0.0; 3])).is_err());
}

#[test]
fn config_parsing() {
    let cfg = TrainConfig::from_str_with_ext("steps = 7\nk_views = 3\n[model]\nchannels = 16\n", "toml").unwrap();
    assert_eq!((cfg.steps, cfg.k_views, cfg.model.channels), (7, 3, 16));
    assert_eq!(cfg.rays_per_iter, TrainConfig::default().rays_per_iter);
    let json = TrainConfig::from_str_with_ext(r#"{"steps": 9, "selector_mode": "oracle"}"#, "json").unwrap();
    assert_eq!((json.steps, json.selector_mode), (9, SelectorMode::Oracle));
    assert!(matches!(TrainConfig::from_str_with_ext("stepz = 1", "toml"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_str_with_ext("steps = 0", "toml"), Err(Error::Config(_))));
    assert!(matches!(
        TrainConfig::from_str_with_ext("[model]\nchannels = 10\n", "toml"),
        Err(Error::Config(_))
    ));
}

#[test]
fn flags_and_seed_override() {
    let mut cfg = TrainConfig::default();
    cfg.apply_flags("omniview=off, film=off,selector=random").unwrap();
    assert!(!cfg.model.omniview && !cfg.model.film);
    assert_eq!(cfg.selector_mode, SelectorMode::Random);
    assert!(cfg.apply_flags("bogus=on").is_err());
    assert!(cfg.apply_flags("film=maybe").is_err());
    assert!(cfg.apply_flags("film").is_err());
    cfg.apply_seed_override(Some(" 42 ")).unwrap();
    assert_eq!(cfg.seed, 42);
    cfg.apply_seed_override(None).unwrap();
    assert_eq!(cfg.seed, 42);
    assert!(matches!(cfg.apply_seed_override(Some("-1")), Err(Error::Config(_))));
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let ds = scene();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = step_inputs(&ds, &mut rng, 4, 8);
    let model: Model<f64> = Model::new(ModelConfig::micro(), 5).unwrap();
    let mut params = model.params.clone();
    let report = gradcheck::check_params(&mut params, 1e-4, 1e-6, |ps| {
        let mut m = model.clone();
        m.params = ps.clone();
        let mut g = Graph::new();
        let l = m.step_losses(&mut g, &inputs)?;
        Ok((g, l.total))
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst_tensor());
}

#[test]
fn selector_and_renderer_gradients_are_separate() {
    let ds = scene();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = step_inputs(&ds, &mut rng, 8, 4);
    let model: Model<f64> = Model::new(ModelConfig::micro(), 1).unwrap();
    let mut g = Graph::new();
    let l = model.step_losses(&mut g, &inputs).unwrap();
    let zero = |grads: &ovr::numeric::Gradients<f64>, selector: bool| {
        model
            .params
            .ids()
            .filter(|&id| Model::<f64>::is_selector_param(model.params.name(id)) == selector)
            .all(|id| grads.param(id).is_none_or(|d| d.iter().all(|&v| v == 0.0)))
    };
    let photo = g.backward(l.photometric).unwrap();
    assert!(zero(&photo, true));
    assert!(!zero(&photo, false));
    let sel = g.backward(l.selector.unwrap()).unwrap();
    assert!(zero(&sel, false));
    assert!(!zero(&sel, true));
}

#[test]
fn training_is_deterministic() {
    let ds = scene();
    let a = train(&micro_config(6), &ds, None).unwrap();
    let b = train(&micro_config(6), &ds, None).unwrap();
    assert_eq!(a.curve.len(), 6);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let mut other = micro_config(6);
    other.seed = 1;
    assert_ne!(train(&other, &ds, None).unwrap().curve, a.curve);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene();
    let out = train(&micro_config(3), &ds, None).unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.config, micro_config(3));

    let targets = eval_targets(&ds, Split::Test).unwrap();
    let (_, before) = evaluate_model(&out.model, &ds, &targets, &options()).unwrap();
    let (_, after) = evaluate_model(&loaded.model().unwrap(), &ds, &targets, &options()).unwrap();
    for (x, y) in before.iter().zip(&after) {
        assert!(x.data.iter().zip(&y.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let rng = loaded.rng.restore().unwrap();
    assert_eq!(ovr::pipeline::checkpoint::RngState::capture(&rng), loaded.rng);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ds = scene();
    let bytes = train(&micro_config(1), &ds, None).unwrap().checkpoint.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(&[]).is_err());
}

#[test]
fn non_finite_loss_stops_training_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = scene();
    for v in &mut ds.views {
        v.image.data.iter_mut().for_each(|x| *x = f32::NAN);
    }
    let err = train(&micro_config(3), &ds, Some(dir.path())).err().unwrap();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("non_finite_batch.json")).unwrap()).unwrap();
    assert_eq!(dump["step"], 0);
    assert!(dump["pixels"].as_array().unwrap().len() == 16);
}

#[test]
fn evaluation_writes_renders_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene();
    let model = train(&micro_config(2), &ds, None).unwrap().model;
    let report = evaluate(&model, &ds, Split::Test, &options(), dir.path()).unwrap();
    let tests = ds.ids(Split::Test);
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "view,psnr,ssim,selection_accuracy");
    assert_eq!(lines.len(), tests.len() + 2);
    assert!(lines.last().unwrap().starts_with("mean,"));
    for t in &tests {
        assert!(dir.path().join(format!("view_{t:03}.png")).exists());
    }
    let again = evaluate(&model, &ds, Split::Test, &options(), dir.path()).unwrap();
    assert_eq!(report, again);
    let mean = report.rows.iter().map(|r| r.psnr).sum::<f64>() / report.rows.len() as f64;
    assert_eq!(report.mean.psnr, mean);
}

#[test]
fn eval_targets_use_the_nearest_training_origin() {
    let ds = generate_scene(1, 12, 32, 32).unwrap();
    let train_ids = ds.ids(Split::Train);
    for t in eval_targets(&ds, Split::Test).unwrap() {
        assert!(train_ids.contains(&t.origin));
        let c = ds.view(t.target).unwrap().pose.center();
        let d = |v: usize| (ds.view(v).unwrap().pose.center() - c).norm();
        assert!(train_ids.iter().all(|&v| d(v) >= d(t.origin)));
        assert_eq!(t.candidates.len(), train_ids.len() - 1);
        assert!(!t.candidates.contains(&t.origin));
    }
    // Scoring ground truth against itself hits the metric ceilings.
    let mut same = eval_targets(&ds, Split::Test).unwrap();
    for t in &mut same {
        t.origin = t.target;
    }
    let r = origin_copy_report(&ds, &same).unwrap();
    assert_eq!((r.mean.psnr, r.mean.ssim), (PSNR_CAP, 1.0));
}

#[test]
fn source_pose_noise_leaves_metrics_unchanged() {
    let ds = scene();
    let model = train(&micro_config(2), &ds, None).unwrap().model;
    let rows = perturb_and_evaluate(&model, &ds, &[0.0, 0.003, 0.1], &options(), false).unwrap();
    for r in &rows[1..] {
        assert_eq!(r.psnr.to_bits(), rows[0].psnr.to_bits());
        assert_eq!(r.ssim.to_bits(), rows[0].ssim.to_bits());
        assert_eq!(r.selection_accuracy.to_bits(), rows[0].selection_accuracy.to_bits());
    }
    let moved = perturb_and_evaluate(&model, &ds, &[0.0, 0.1], &options(), true).unwrap();
    assert_eq!(moved[0].psnr, rows[0].psnr);
    assert_ne!(moved[1].psnr, rows[0].psnr);
}
