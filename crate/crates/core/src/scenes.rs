//! Procedural Lambertian scenes, their analytic ray tracer, and the view
//! dataset used for training and evaluation.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{relative_pose, Intrinsics, RelativePose, Se3};
use crate::image::Image;
use crate::selector::{ground_truth_score, ViewScore};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f32; 3],
    },
    /// Axis-aligned box; `checker` alternates with `albedo` in cubes of side
    /// `1 / checker_freq`.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f32; 3],
        checker: Option<[f32; 3]>,
        checker_freq: f64,
    },
}

impl Primitive {
    /// Bounding sphere `(centre, radius)`.
    pub fn bounds(&self) -> (Vector3<f64>, f64) {
        match self {
            Primitive::Sphere { center, radius, .. } => (Vector3::from(*center), *radius),
            Primitive::Box { min, max, .. } => {
                let (a, b) = (Vector3::from(*min), Vector3::from(*max));
                ((a + b) / 2.0, (b - a).norm() / 2.0)
            }
        }
    }

    /// Closest hit distance along a unit ray and the outward normal there.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = o - Vector3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > EPS { -b - s } else { -b + s };
                (t > EPS).then(|| (t, (o + d * t - Vector3::from(*center)) / *radius))
            }
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis_in = (0, 0.0);
                let mut axis_out = (0, 0.0);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    let mut sign = -1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        sign = 1.0;
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis_in = (a, sign);
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis_out = (a, -sign);
                    }
                }
                if t0 > t1 || t1 <= EPS {
                    return None;
                }
                let (t, (a, s)) = if t0 > EPS { (t0, axis_in) } else { (t1, axis_out) };
                let mut n = Vector3::zeros();
                n[a] = s;
                Some((t, n))
            }
        }
    }

    pub fn albedo_at(&self, p: &Vector3<f64>) -> [f32; 3] {
        match self {
            Primitive::Sphere { albedo, .. } => *albedo,
            Primitive::Box {
                albedo,
                checker,
                checker_freq,
                ..
            } => match checker {
                Some(alt) => {
                    let cell = |v: f64| (v * checker_freq).floor() as i64;
                    if (cell(p.x) + cell(p.y) + cell(p.z)).rem_euclid(2) == 0 {
                        *albedo
                    } else {
                        *alt
                    }
                }
                None => *albedo,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector pointing towards the light.
    pub direction: [f64; 3],
    pub intensity: f32,
    pub ambient: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f32; 3],
    pub light: Light,
    pub near: f64,
    pub far: f64,
}

impl SyntheticScene {
    pub fn empty(background: [f32; 3]) -> Self {
        Self {
            primitives: Vec::new(),
            background,
            light: Light {
                direction: [0.0, 0.0, 1.0],
                intensity: 0.8,
                ambient: 0.2,
            },
            near: 1.0,
            far: 6.0,
        }
    }

    /// Colour seen along a world-space ray.
    pub fn shade(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> [f32; 3] {
        let hit = self
            .primitives
            .iter()
            .filter_map(|p| p.intersect(o, d).map(|(t, n)| (t, n, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((t, n, prim)) = hit else {
            return self.background;
        };
        let p = o + d * t;
        let l = Vector3::from(self.light.direction).normalize();
        let lambert = n.dot(&l).max(0.0) as f32;
        let k = self.light.ambient + self.light.intensity * lambert;
        let a = prim.albedo_at(&p);
        [(a[0] * k).min(1.0), (a[1] * k).min(1.0), (a[2] * k).min(1.0)]
    }
}

/// Closest-hit render of `scene` from a camera-to-world `pose`, one ray per
/// pixel centre.
pub fn trace_ground_truth(scene: &SyntheticScene, intrinsics: &Intrinsics, pose: &Se3) -> Result<Image> {
    pose.validate(1e-6)?;
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut img = Image::filled(w, h, scene.background);
    for y in 0..h {
        for x in 0..w {
            let d = (pose.rotation * intrinsics.back_project(x as f64, y as f64)).normalize();
            img.set_pixel(x, y, scene.shade(&pose.translation, &d));
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: usize,
    pub split: Split,
    pub image: Image,
    pub intrinsics: Intrinsics,
    /// Camera-to-world.
    pub pose: Se3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub near: f64,
    pub far: f64,
    pub background: [f32; 3],
    /// Generating scene, when known.
    pub scene: Option<SyntheticScene>,
}

/// Layout of generated camera rigs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub radius: f64,
    pub elevation_deg: f64,
    /// Cameras span `[-azimuth_span_deg, azimuth_span_deg]`.
    pub azimuth_span_deg: f64,
    /// `fx = fy = focal_factor · width`.
    pub focal_factor: f64,
    /// Views with `id % test_every == test_offset` are held out.
    pub test_every: usize,
    pub test_offset: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            radius: 4.0,
            elevation_deg: 20.0,
            azimuth_span_deg: 40.0,
            focal_factor: 1.2,
            test_every: 5,
            test_offset: 2,
        }
    }
}

/// Camera-to-world poses on a horizontal arc around the world origin,
/// world `+z` up.
pub fn arc_poses(n: usize, rig: &RigConfig) -> Vec<Se3> {
    let el = rig.elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let az = (2.0 * f - 1.0) * rig.azimuth_span_deg.to_radians();
            let eye = Vector3::new(az.sin() * el.cos(), -az.cos() * el.cos(), el.sin()) * rig.radius;
            Se3::look_at(eye, Vector3::zeros(), Vector3::z())
        })
        .collect()
}

pub fn rig_intrinsics(width: usize, height: usize, rig: &RigConfig) -> Intrinsics {
    let f = rig.focal_factor * width as f64;
    Intrinsics {
        fx: f,
        fy: f,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)]
}

/// Three to six non-overlapping spheres and boxes near the world origin.
pub fn random_scene(rng: &mut ChaCha8Rng) -> SyntheticScene {
    let count = rng.gen_range(3..=6);
    let mut primitives: Vec<Primitive> = Vec::new();
    let mut attempts = 0;
    while primitives.len() < count && attempts < 1000 {
        attempts += 1;
        let c = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5));
        let p = if rng.gen_bool(0.5) {
            Primitive::Sphere {
                center: c.into(),
                radius: rng.gen_range(0.25..0.55),
                albedo: random_color(rng),
            }
        } else {
            let half = Vector3::new(rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45));
            Primitive::Box {
                min: (c - half).into(),
                max: (c + half).into(),
                albedo: random_color(rng),
                checker: Some(random_color(rng)),
                checker_freq: 3.0,
            }
        };
        let (pc, pr) = p.bounds();
        let clear = primitives.iter().all(|q| {
            let (qc, qr) = q.bounds();
            (pc - qc).norm() > pr + qr + 0.05
        });
        if clear {
            primitives.push(p);
        }
    }
    let dir = Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.9..-0.3), 1.0).normalize();
    SyntheticScene {
        primitives,
        background: [rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25), rng.gen_range(0.05..0.35)],
        light: Light {
            direction: dir.into(),
            intensity: 0.75,
            ambient: 0.25,
        },
        near: 1.0,
        far: 6.0,
    }
}

/// Traces every view of `scene` on an arc rig; images are quantised to 8 bits.
pub fn render_dataset(
    scene: &SyntheticScene,
    n_views: usize,
    width: usize,
    height: usize,
    rig: &RigConfig,
) -> Result<SceneDataset> {
    ensure!(n_views >= 2, "need at least 2 views, got {n_views}");
    let k = rig_intrinsics(width, height, rig);
    k.validate()?;
    let mut views = Vec::with_capacity(n_views);
    for (id, pose) in arc_poses(n_views, rig).into_iter().enumerate() {
        for p in &scene.primitives {
            let (c, r) = p.bounds();
            let dist = (c - pose.translation).norm();
            ensure!(
                dist - r >= scene.near && dist + r <= scene.far,
                "primitive at distance {dist:.3} (radius {r:.3}) outside [{}, {}] of view {id}",
                scene.near,
                scene.far
            );
        }
        let image = trace_ground_truth(scene, &k, &pose)?.quantized();
        let split = if rig.test_every > 0 && id % rig.test_every == rig.test_offset {
            Split::Test
        } else {
            Split::Train
        };
        views.push(View {
            id,
            split,
            image,
            intrinsics: k,
            pose,
        });
    }
    Ok(SceneDataset {
        views,
        near: scene.near,
        far: scene.far,
        background: scene.background,
        scene: Some(scene.clone()),
    })
}

/// Deterministic random scene and views.
pub fn generate_scene(seed: u64, n_views: usize, width: usize, height: usize) -> Result<SceneDataset> {
    ensure!(n_views >= 2, "need at least 2 views, got {n_views}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = RigConfig::default();
    for _ in 0..100 {
        let scene = random_scene(&mut rng);
        let ds = render_dataset(&scene, n_views, width, height, &rig)?;
        if ds.views.iter().all(|v| covers_primitive(&v.image, scene.background)) {
            return Ok(ds);
        }
    }
    Err(Error::Contract(format!(
        "seed {seed}: no scene visible from every view"
    )))
}

fn covers_primitive(img: &Image, bg: [f32; 3]) -> bool {
    let bg = Image::filled(1, 1, bg).quantized().data;
    img.data.chunks(3).any(|p| p != bg.as_slice())
}

impl SceneDataset {
    pub fn view(&self, id: usize) -> Result<&View> {
        self.views
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::Contract(format!("no view with id {id}")))
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.views.iter().filter(|v| v.split == split).map(|v| v.id).collect()
    }

    /// Largest distance between two camera centres.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.views {
            for b in &self.views {
                d = d.max((a.pose.center() - b.pose.center()).norm());
            }
        }
        if d > 0.0 {
            d
        } else {
            1.0
        }
    }

    /// Ground-truth selector score of `candidate` relative to `origin`.
    pub fn gt_score(&self, origin: usize, candidate: usize) -> Result<ViewScore> {
        let (o, c) = (self.view(origin)?, self.view(candidate)?);
        ground_truth_score(candidate, &o.pose, &c.pose, self.diameter())
    }

    /// `candidates` ordered nearest-first by ground-truth key.
    pub fn gt_ranking(&self, origin: usize, candidates: &[usize]) -> Result<Vec<usize>> {
        let scores = candidates
            .iter()
            .map(|&c| self.gt_score(origin, c))
            .collect::<Result<Vec<_>>>()?;
        crate::selector::select_top_k(&scores, scores.len())
    }

    /// Target → origin transform between two views.
    pub fn relative(&self, target: usize, origin: usize) -> Result<RelativePose> {
        relative_pose(&self.view(target)?.pose, &self.view(origin)?.pose)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.views.is_empty(), "dataset has no views");
        ensure!(
            self.near > 0.0 && self.near < self.far,
            "invalid depth bounds [{}, {}]",
            self.near,
            self.far
        );
        let (w, h) = (self.views[0].intrinsics.width, self.views[0].intrinsics.height);
        for v in &self.views {
            v.intrinsics.validate()?;
            v.pose.validate(1e-6)?;
            ensure!(
                v.intrinsics.width == w && v.intrinsics.height == h,
                "view {} is {}x{}, expected {w}x{h}",
                v.id,
                v.intrinsics.width,
                v.intrinsics.height
            );
            ensure!(
                v.image.width == w && v.image.height == h,
                "view {} image does not match its intrinsics",
                v.id
            );
        }
        Ok(())
    }
}

/// One optimisation sample drawn from the training split.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub origin: usize,
    pub target: usize,
    /// Target → origin.
    pub pose: RelativePose,
    pub pixels: Vec<(f64, f64)>,
    /// `[R, 3]`.
    pub colors: Vec<f32>,
    /// Train views other than origin and target, available as sources.
    pub candidates: Vec<usize>,
    /// Ground truth of the origin against every training view, itself included.
    pub selector_targets: Vec<ViewScore>,
}

/// Random origin, random target among the origin's `neighbors` nearest
/// training views (all of them when `None`), and `rays` distinct pixels.
pub fn make_training_example(
    ds: &SceneDataset,
    rng: &mut ChaCha8Rng,
    rays: usize,
    neighbors: Option<usize>,
) -> Result<TrainingExample> {
    let train = ds.ids(Split::Train);
    ensure!(train.len() >= 3, "need at least 3 training views, got {}", train.len());
    let origin = train[rng.gen_range(0..train.len())];
    let others: Vec<usize> = train.iter().copied().filter(|&v| v != origin).collect();
    let mut ranked = ds.gt_ranking(origin, &others)?;
    if let Some(n) = neighbors {
        ranked.truncate(n.max(1));
    }
    let target = ranked[rng.gen_range(0..ranked.len())];
    let view = ds.view(target)?;
    let (w, h) = (view.image.width, view.image.height);
    let n = rays.min(w * h);
    ensure!(n > 0, "need at least one ray");
    let mut pixels = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    for i in index::sample(rng, w * h, n) {
        let (x, y) = (i % w, i / w);
        pixels.push((x as f64, y as f64));
        colors.extend(view.image.pixel(x, y));
    }
    let selector_targets = train
        .iter()
        .map(|&c| ds.gt_score(origin, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingExample {
        origin,
        target,
        pose: ds.relative(target, origin)?,
        pixels,
        colors,
        candidates: others.into_iter().filter(|&v| v != target).collect(),
        selector_targets,
    })
}

// ------------------------------------------------------------------ files

#[derive(Serialize, Deserialize)]
struct ViewFile {
    id: usize,
    split: Split,
    intrinsics: Intrinsics,
    pose: Se3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_png_base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u32,
    near: f64,
    far: f64,
    background: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SyntheticScene>,
    views: Vec<ViewFile>,
}

/// How images are stored alongside the JSON document.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageStorage {
    Embedded,
    /// `view_NNN.png` next to the JSON file.
    Sidecar,
}

impl SceneDataset {
    pub fn to_json(&self, storage: ImageStorage, dir: Option<&Path>) -> Result<String> {
        let mut views = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let png = v.image.encode_png()?;
            let (embedded, file) = match storage {
                ImageStorage::Embedded => (Some(BASE64.encode(&png)), None),
                ImageStorage::Sidecar => {
                    let name = format!("view_{:03}.png", v.id);
                    let dir = dir.ok_or_else(|| Error::Config("sidecar images need a directory".into()))?;
                    std::fs::write(dir.join(&name), &png)?;
                    (None, Some(name))
                }
            };
            views.push(ViewFile {
                id: v.id,
                split: v.split,
                intrinsics: v.intrinsics,
                pose: v.pose,
                image_png_base64: embedded,
                image_file: file,
            });
        }
        let doc = DatasetFile {
            schema_version: SCHEMA_VERSION,
            near: self.near,
            far: self.far,
            background: self.background,
            scene: self.scene.clone(),
            views,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str, dir: Option<&Path>) -> Result<Self> {
        let doc: DatasetFile = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported scene schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let mut views = Vec::with_capacity(doc.views.len());
        for v in doc.views {
            let image = match (&v.image_png_base64, &v.image_file) {
                (Some(b64), _) => {
                    let bytes = BASE64
                        .decode(b64)
                        .map_err(|e| Error::Config(format!("view {}: bad base64 image: {e}", v.id)))?;
                    Image::decode_png(&bytes)?
                }
                (None, Some(name)) => {
                    let path: PathBuf = dir.map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name));
                    Image::load_png(&path)?
                }
                (None, None) => return Err(Error::Config(format!("view {} has no image", v.id))),
            };
            views.push(View {
                id: v.id,
                split: v.split,
                image,
                intrinsics: v.intrinsics,
                pose: v.pose,
            });
        }
        let ds = Self {
            views,
            near: doc.near,
            far: doc.far,
            background: doc.background,
            scene: doc.scene,
        };
        ds.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path, storage: ImageStorage) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::write(path, self.to_json(storage, Some(dir))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_json(&text, Some(dir))
    }
}
