//! Target-ray rendering against the origin view: point projection and
//! interpolation, origin-conditioned FiLM, and per-ray attention decoding.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{bilinear_taps, generate_ray, project, sample_depths, Intrinsics, Ray, RelativePose};
use crate::nn::{AttentionBlock, Init, LayerNorm, Mlp};
use crate::numeric::{Graph, ParamStore, RowMixing, Scalar, Tensor, Var};

/// Depth range and sampling density of target rays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaySettings {
    pub near: f64,
    pub far: f64,
    pub points: usize,
    pub background: [f32; 3],
}

/// Maps continuous image pixels onto texels of a feature grid, per axis
/// `texel = pixel · scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSampling {
    pub height: usize,
    pub width: usize,
    pub scale: (f64, f64),
    pub offset: (f64, f64),
}

impl FeatureSampling {
    /// Strided map whose texel `i` is centred on image pixel `stride · i`.
    pub fn strided(height: usize, width: usize, stride: usize) -> Self {
        let s = 1.0 / stride as f64;
        Self {
            height,
            width,
            scale: (s, s),
            offset: (0.0, 0.0),
        }
    }

    /// Coarse `m × m` grid of equal cells covering an `image_w × image_h` image.
    pub fn grid(m: usize, image_w: usize, image_h: usize) -> Self {
        let (sx, sy) = (m as f64 / image_w as f64, m as f64 / image_h as f64);
        Self {
            height: m,
            width: m,
            scale: (sx, sy),
            offset: (0.5 * sx - 0.5, 0.5 * sy - 0.5),
        }
    }

    /// Identity mapping onto the image itself.
    pub fn pixels(height: usize, width: usize) -> Self {
        Self::strided(height, width, 1)
    }

    pub fn texel(&self, u: f64, v: f64) -> (f64, f64) {
        (u * self.scale.0 + self.offset.0, v * self.scale.1 + self.offset.1)
    }
}

/// Sinusoidal encoding `[sin(2^k π x), cos(2^k π x)]` for `k < freqs`.
pub fn positional_encoding(x: f64, freqs: usize, out: &mut Vec<f64>) {
    for k in 0..freqs {
        let a = (1u64 << k) as f64 * PI * x;
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Rays of one target view, their sampled points and everything needed to
/// gather point features from the origin view.
#[derive(Clone, Debug)]
pub struct RayBatch<T> {
    pub rays: Vec<Ray>,
    pub points: usize,
    /// Per point: projects in front of the origin camera and inside its image.
    pub keep: Rc<Vec<bool>>,
    /// Per ray: at least one kept point.
    pub ray_valid: Rc<Vec<bool>>,
    /// `R·P` rows of bilinear taps into the feature grid.
    pub feature_mix: Rc<RowMixing<T>>,
    /// `R·P` rows of bilinear taps into the origin image.
    pub rgb_mix: Rc<RowMixing<T>>,
    /// `R` rows averaging each ray's kept points.
    pub mean_mix: Rc<RowMixing<T>>,
    /// `[R·P, 4·freqs]` depth encodings, absent when `freqs == 0`.
    pub depth_pe: Option<Tensor<T>>,
}

impl<T: Scalar> RayBatch<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        pixels: &[(f64, f64)],
        target: &Intrinsics,
        pose: &RelativePose,
        origin: &Intrinsics,
        settings: &RaySettings,
        sampling: FeatureSampling,
        pe_freqs: usize,
    ) -> Result<Self> {
        ensure!(!pixels.is_empty(), "ray batch needs at least one pixel");
        let p = settings.points;
        let depths = sample_depths(settings.near, settings.far, p)?;
        let span = settings.far - settings.near;
        let rgb_sampling = FeatureSampling::pixels(origin.height, origin.width);
        let mut rays = Vec::with_capacity(pixels.len());
        let mut keep = Vec::with_capacity(pixels.len() * p);
        let mut ray_valid = Vec::with_capacity(pixels.len());
        let mut feature_mix = RowMixing::new();
        let mut rgb_mix = RowMixing::new();
        let mut mean_mix = RowMixing::new();
        let mut pe = Vec::with_capacity(if pe_freqs > 0 { pixels.len() * p * 4 * pe_freqs } else { 0 });
        let identity = RelativePose::identity();
        for &px in pixels {
            let ray = generate_ray(px, target, pose, settings.near, settings.far)?;
            let mut valid = Vec::with_capacity(p);
            for &t in &depths {
                let proj = project(&ray.at(t), origin, &identity);
                let ok = !proj.behind && origin.contains(proj.u, proj.v);
                let (u, v) = if proj.behind { (0.0, 0.0) } else { (proj.u, proj.v) };
                feature_mix.push_row(taps(&sampling, u, v));
                rgb_mix.push_row(taps(&rgb_sampling, u, v));
                keep.push(ok);
                if ok {
                    valid.push(keep.len() - 1);
                }
                if pe_freqs > 0 {
                    positional_encoding((t - settings.near) / span, pe_freqs, &mut pe);
                    let z = if proj.behind { 0.0 } else { (proj.depth - settings.near) / span };
                    positional_encoding(z, pe_freqs, &mut pe);
                }
            }
            let w = if valid.is_empty() { 0.0 } else { 1.0 / valid.len() as f64 };
            mean_mix.push_row(valid.iter().map(|&i| (i, T::c(w))));
            ray_valid.push(!valid.is_empty());
            rays.push(ray);
        }
        let depth_pe = if pe_freqs > 0 {
            Some(Tensor::new(
                &[pixels.len() * p, 4 * pe_freqs],
                pe.into_iter().map(T::c).collect(),
            )?)
        } else {
            None
        };
        Ok(Self {
            rays,
            points: p,
            keep: Rc::new(keep),
            ray_valid: Rc::new(ray_valid),
            feature_mix: Rc::new(feature_mix),
            rgb_mix: Rc::new(rgb_mix),
            mean_mix: Rc::new(mean_mix),
            depth_pe,
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

fn taps<T: Scalar>(s: &FeatureSampling, u: f64, v: f64) -> Vec<(usize, T)> {
    let (x, y) = s.texel(u, v);
    let (taps, _) = bilinear_taps(s.height, s.width, x, y);
    taps.into_iter()
        .filter(|&(_, w)| w != 0.0)
        .map(|(i, w)| (i, T::c(w)))
        .collect()
}

/// Per-channel scale and shift predicted from the origin feature map.
#[derive(Clone, Debug)]
pub struct Film {
    pub gamma: Mlp,
    pub beta: Mlp,
}

impl Film {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize) -> Self {
        let gamma = Mlp::new(init, &format!("{name}.gamma"), [channels, channels, channels]);
        let beta = Mlp::new(init, &format!("{name}.beta"), [channels, channels, channels]);
        init.store
            .value_mut(gamma.fc2.b)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::one());
        Self { gamma, beta }
    }

    /// `(γ, β)`, each `[1, c]`, from the global average of `map` (`[n, c]`).
    pub fn modulation<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, map: Var) -> Result<(Var, Var)> {
        let gap = global_average(g, map)?;
        Ok((self.gamma.forward(g, ps, gap)?, self.beta.forward(g, ps, gap)?))
    }
}

/// Mean over all rows of a `[n, c]` tensor, as `[1, c]`.
pub fn global_average<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.value(x).rows();
    let w = T::c(1.0 / n as f64);
    let mut mix = RowMixing::new();
    mix.push_row((0..n).map(|i| (i, w)));
    g.row_mix(x, Rc::new(mix))
}

/// `γ ⊙ x + β`, broadcast over rows.
pub fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let y = g.mul_row(x, gamma)?;
    g.add_row(y, beta)
}

/// Point embedding MLP, attention over each ray's points, a final layer
/// norm, masked mean over points, then an output MLP with sigmoid.
#[derive(Clone, Debug)]
pub struct RayDecoder {
    pub input_dim: usize,
    pub embed: Mlp,
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
    pub head: Mlp,
}

impl RayDecoder {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        input_dim: usize,
        dim: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        Ok(Self {
            input_dim,
            embed: Mlp::new(init, &format!("{name}.embed"), [input_dim, dim, dim]),
            blocks: (0..layers)
                .map(|l| AttentionBlock::new(init, &format!("{name}.block{l}"), dim, heads, 2, false))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            head: Mlp::new(init, &format!("{name}.head"), [dim, dim, 3]),
        })
    }

    /// Decodes `[R·P, input_dim]` point tokens into `[R, 3]` colours.
    /// Rays without a kept point receive `background`.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        tokens: Var,
        batch: &RayBatch<T>,
        background: [f32; 3],
    ) -> Result<Var> {
        ensure!(
            g.value(tokens).cols() == self.input_dim,
            "ray decoder expects {} input channels, got {}",
            self.input_dim,
            g.value(tokens).cols()
        );
        let mut x = self.embed.forward(g, ps, tokens)?;
        for b in &self.blocks {
            x = b.self_attend(g, ps, x, batch.len(), Some(batch.keep.clone()))?;
        }
        let x = self.norm.forward(g, ps, x)?;
        let pooled = g.row_mix(x, batch.mean_mix.clone())?;
        let h = self.head.forward(g, ps, pooled)?;
        let rgb = g.sigmoid(h);
        let fill: Vec<T> = background.iter().map(|&c| T::c(c as f64)).collect();
        g.mask_rows(rgb, batch.ray_valid.clone(), &fill)
    }
}

/// Builds `[R·P, c (+3) (+pe)]` point tokens from the feature grid and origin
/// image, applying FiLM to the feature part when given.
pub fn point_tokens<T: Scalar>(
    g: &mut Graph<T>,
    batch: &RayBatch<T>,
    features: Var,
    origin_rgb: Option<Var>,
    film: Option<(Var, Var)>,
) -> Result<Var> {
    let mut f = g.row_mix(features, batch.feature_mix.clone())?;
    if let Some((gamma, beta)) = film {
        f = modulate(g, f, gamma, beta)?;
    }
    let mut parts = vec![f];
    if let Some(rgb) = origin_rgb {
        parts.push(g.row_mix(rgb, batch.rgb_mix.clone())?);
    }
    if let Some(pe) = &batch.depth_pe {
        parts.push(g.constant(pe.clone()));
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts)
    }
}

/// Row-major pixel centres of a `w × h` image.
pub fn all_pixels(width: usize, height: usize) -> Vec<(f64, f64)> {
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as f64, y as f64)))
        .collect()
}
