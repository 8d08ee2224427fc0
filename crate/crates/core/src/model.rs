//! The assembled renderer and view selector with their parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, Encoder};
use crate::error::{ensure, Result};
use crate::geometry::{Intrinsics, RelativePose};
use crate::image::Image;
use crate::nn::Init;
use crate::numeric::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::omniview::OmniView;
use crate::renderer::{self, all_pixels, FeatureSampling, Film, RayBatch, RayDecoder, RaySettings};
use crate::selector::{selector_loss_graph, Selector, ViewScore};

/// Rays decoded per graph at inference.
pub const RENDER_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder output channels, also the OmniView width.
    pub channels: usize,
    /// Token grid side.
    pub grid: usize,
    pub omniview_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ray_dim: usize,
    pub ray_heads: usize,
    pub ray_layers: usize,
    /// Frequencies of the depth encoding; 0 disables it.
    pub pe_freqs: usize,
    /// Feed the origin image colour at each projected point to the decoder.
    pub color_skip: bool,
    pub selector_channels: usize,
    pub selector_hidden: usize,
    /// Sample point features from the 8× map rather than the token grid.
    pub pixel_aligned: bool,
    pub omniview: bool,
    pub film: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            grid: 7,
            omniview_layers: 2,
            heads: 4,
            ffn_mult: 2,
            ray_dim: 32,
            ray_heads: 4,
            ray_layers: 1,
            pe_freqs: 4,
            color_skip: true,
            selector_channels: 32,
            selector_hidden: 32,
            pixel_aligned: true,
            omniview: true,
            film: true,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration exercising every component.
    pub fn micro() -> Self {
        Self {
            channels: 8,
            grid: 3,
            omniview_layers: 1,
            heads: 2,
            ffn_mult: 2,
            ray_dim: 8,
            ray_heads: 2,
            ray_layers: 1,
            pe_freqs: 2,
            color_skip: true,
            selector_channels: 4,
            selector_hidden: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.grid >= 1, "grid must be at least 1");
        ensure!(
            self.heads > 0 && self.channels.is_multiple_of(self.heads),
            "channels {} not divisible by {} heads",
            self.channels,
            self.heads
        );
        ensure!(
            self.ray_heads > 0 && self.ray_dim.is_multiple_of(self.ray_heads),
            "ray_dim {} not divisible by {} heads",
            self.ray_dim,
            self.ray_heads
        );
        ensure!(self.ffn_mult >= 1, "ffn_mult must be at least 1");
        Ok(())
    }

    pub fn decoder_input(&self) -> usize {
        self.channels + if self.color_skip { 3 } else { 0 } + 4 * self.pe_freqs
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub omniview: OmniView,
    pub film: Film,
    pub decoder: RayDecoder,
    pub selector: Selector,
}

/// Per-origin state shared by every ray rendered against it.
#[derive(Clone, Copy, Debug)]
pub struct OriginContext {
    /// `[n, c]` features points are sampled from.
    pub features: Var,
    pub sampling: FeatureSampling,
    /// `[h·w, 3]` origin image.
    pub rgb: Option<Var>,
    pub film: Option<(Var, Var)>,
}

/// Detached [`OriginContext`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenContext<T> {
    pub features: Tensor<T>,
    pub sampling: FeatureSampling,
    pub rgb: Option<Tensor<T>>,
    pub film: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> FrozenContext<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> OriginContext {
        OriginContext {
            features: g.constant(self.features.clone()),
            sampling: self.sampling,
            rgb: self.rgb.clone().map(|t| g.constant(t)),
            film: self.film.clone().map(|(a, b)| (g.constant(a), g.constant(b))),
        }
    }
}

/// Inputs of one optimisation step.
#[derive(Clone, Debug)]
pub struct StepInputs<'a> {
    pub origin: &'a Image,
    pub origin_intrinsics: Intrinsics,
    /// Source images in aggregation order.
    pub sources: Vec<&'a Image>,
    pub target_intrinsics: Intrinsics,
    /// Target → origin.
    pub pose: RelativePose,
    pub pixels: Vec<(f64, f64)>,
    /// `[R, 3]` ground-truth colours.
    pub colors: Vec<f32>,
    pub rays: RaySettings,
    /// Candidates scored against the origin, with their targets.
    pub selector_views: Vec<&'a Image>,
    pub selector_targets: Vec<ViewScore>,
    pub selector_weight: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: Var,
    pub photometric: Var,
    pub selector: Option<Var>,
    pub prediction: Var,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let c = config.channels;
        let encoder = Encoder::new(&mut init, "encoder", c)?;
        let omniview = OmniView::new(
            &mut init,
            "omniview",
            config.grid,
            c,
            config.heads,
            config.omniview_layers,
            config.ffn_mult,
        )?;
        let film = Film::new(&mut init, "film", c);
        let decoder = RayDecoder::new(
            &mut init,
            "decoder",
            config.decoder_input(),
            config.ray_dim,
            config.ray_heads,
            config.ray_layers,
        )?;
        let selector = Selector::new(&mut init, "selector", config.selector_channels, config.selector_hidden)?;
        Ok(Self {
            config,
            params,
            encoder,
            omniview,
            film,
            decoder,
            selector,
        })
    }

    /// Same architecture and weights at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            omniview: self.omniview.clone(),
            film: self.film.clone(),
            decoder: self.decoder.clone(),
            selector: self.selector.clone(),
        }
    }

    /// Whether a parameter belongs to the selector rather than the renderer.
    pub fn is_selector_param(name: &str) -> bool {
        name.starts_with("selector.")
    }

    /// Encodes the origin and sources, aggregates and computes FiLM terms.
    pub fn origin_context(&self, g: &mut Graph<T>, origin: &Image, sources: &[&Image]) -> Result<OriginContext> {
        for s in sources {
            ensure!(
                s.same_shape(origin),
                "source {}x{} differs from origin {}x{}",
                s.width,
                s.height,
                origin.width,
                origin.height
            );
        }
        let ps = &self.params;
        let cfg = &self.config;
        let map = self.encoder.forward(g, ps, origin)?;
        let shape = g.shape(map).to_vec();
        let tokens = encoder::tokenize(g, map, cfg.grid)?;
        let (flat, tokens) = if cfg.omniview {
            let src = sources
                .iter()
                .map(|s| {
                    let m = self.encoder.forward(g, ps, s)?;
                    encoder::tokenize(g, m, cfg.grid)
                })
                .collect::<Result<Vec<_>>>()?;
            self.omniview.aggregate(g, ps, map, tokens, &src)?
        } else {
            (g.reshape(map, &[shape[0] * shape[1], shape[2]])?, tokens)
        };
        let film = if cfg.film {
            Some(self.film.modulation(g, ps, flat)?)
        } else {
            None
        };
        let (features, sampling) = if cfg.pixel_aligned {
            (
                flat,
                FeatureSampling::strided(shape[0], shape[1], encoder::STRIDE),
            )
        } else {
            (tokens, FeatureSampling::grid(cfg.grid, origin.width, origin.height))
        };
        let rgb = cfg.color_skip.then(|| {
            let t = origin.to_tensor::<T>().reshape(&[origin.width * origin.height, 3]);
            g.constant(t.expect("image tensor"))
        });
        Ok(OriginContext {
            features,
            sampling,
            rgb,
            film,
        })
    }

    pub fn freeze_context(&self, origin: &Image, sources: &[&Image]) -> Result<FrozenContext<T>> {
        let mut g = Graph::new();
        let ctx = self.origin_context(&mut g, origin, sources)?;
        Ok(FrozenContext {
            features: g.value(ctx.features).clone(),
            sampling: ctx.sampling,
            rgb: ctx.rgb.map(|v| g.value(v).clone()),
            film: ctx.film.map(|(a, b)| (g.value(a).clone(), g.value(b).clone())),
        })
    }

    pub fn ray_batch(
        &self,
        ctx: &OriginContext,
        pixels: &[(f64, f64)],
        target: &Intrinsics,
        pose: &RelativePose,
        origin: &Intrinsics,
        rays: &RaySettings,
    ) -> Result<RayBatch<T>> {
        RayBatch::build(pixels, target, pose, origin, rays, ctx.sampling, self.config.pe_freqs)
    }

    /// `[R, 3]` colours of a ray batch.
    pub fn render_rays(
        &self,
        g: &mut Graph<T>,
        ctx: &OriginContext,
        batch: &RayBatch<T>,
        background: [f32; 3],
    ) -> Result<Var> {
        let tokens = renderer::point_tokens(g, batch, ctx.features, ctx.rgb, ctx.film)?;
        self.decoder.decode(g, &self.params, tokens, batch, background)
    }

    /// Renders a full target view, decoding [`RENDER_CHUNK`] rays per graph.
    pub fn render_image(
        &self,
        ctx: &FrozenContext<T>,
        target: &Intrinsics,
        pose: &RelativePose,
        origin: &Intrinsics,
        rays: &RaySettings,
    ) -> Result<Image> {
        let pixels = all_pixels(target.width, target.height);
        let mut data = Vec::with_capacity(pixels.len() * 3);
        for chunk in pixels.chunks(RENDER_CHUNK) {
            let mut g = Graph::new();
            g.set_check_finite(false);
            let bound = ctx.bind(&mut g);
            let batch = self.ray_batch(&bound, chunk, target, pose, origin, rays)?;
            let out = self.render_rays(&mut g, &bound, &batch, rays.background)?;
            data.extend(g.value(out).data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
        Image::new(target.width, target.height, data)
    }

    /// Builds the joint loss: photometric MSE plus the selector regression
    /// loss. The two share no parameters, so neither gradient reaches the
    /// other network.
    pub fn step_losses(&self, g: &mut Graph<T>, inputs: &StepInputs) -> Result<StepLosses> {
        ensure!(
            inputs.colors.len() == inputs.pixels.len() * 3,
            "{} colours for {} pixels",
            inputs.colors.len(),
            inputs.pixels.len()
        );
        let ctx = self.origin_context(g, inputs.origin, &inputs.sources)?;
        let batch = self.ray_batch(
            &ctx,
            &inputs.pixels,
            &inputs.target_intrinsics,
            &inputs.pose,
            &inputs.origin_intrinsics,
            &inputs.rays,
        )?;
        let pred = self.render_rays(g, &ctx, &batch, inputs.rays.background)?;
        let gt = Tensor::from_fn(&[inputs.pixels.len(), 3], |i| T::c(inputs.colors[i] as f64));
        let gt = g.constant(gt);
        let photometric = photometric_loss(g, pred, gt)?;
        let selector = if inputs.selector_views.is_empty() {
            None
        } else {
            let scores = self
                .selector
                .score(g, &self.params, inputs.origin, &inputs.selector_views)?;
            Some(selector_loss_graph(g, scores, &inputs.selector_targets)?)
        };
        let total = match selector {
            Some(s) => {
                let s = g.scale(s, T::c(inputs.selector_weight));
                g.add(photometric, s)?
            }
            None => photometric,
        };
        Ok(StepLosses {
            total,
            photometric,
            selector,
            prediction: pred,
        })
    }
}

/// Mean squared error over rays and channels.
pub fn photometric_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    ensure!(
        g.shape(pred) == g.shape(gt),
        "prediction {:?} and target {:?} differ in shape",
        g.shape(pred),
        g.shape(gt)
    );
    let d = g.sub(pred, gt)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}
