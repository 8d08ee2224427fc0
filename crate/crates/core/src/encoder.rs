//! Shared convolutional feature extractor and patch-grid tokenisation.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::nn::{adaptive_pool, Conv, Init, ResBlock};
use crate::numeric::{Graph, ParamStore, Scalar, Tensor, Var};

/// Total spatial downsampling of the encoder.
pub const STRIDE: usize = 8;
/// Smallest accepted input side.
pub const MIN_SIDE: usize = 32;

/// Output side length for an input side of `n` pixels.
pub fn feature_side(n: usize) -> usize {
    n.div_ceil(STRIDE)
}

/// Encoded view: patch tokens plus the full 8× map used for interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub view_id: usize,
    /// `[m², c]`, cells in row-major order.
    pub tokens: Tensor<T>,
    /// `[h', w', c]`.
    pub full_map: Tensor<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn grid(&self) -> usize {
        (self.tokens.rows() as f64).sqrt().round() as usize
    }
}

/// Stem conv at stride 2, then three stages of two residual blocks with
/// `c/4`, `c/2` and `c` channels; stages two and three halve the resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub channels: usize,
    pub stem: Conv,
    pub blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize) -> Result<Self> {
        ensure!(
            channels >= 4 && channels.is_multiple_of(4),
            "encoder channels must be a positive multiple of 4, got {channels}"
        );
        let widths = [channels / 4, channels / 2, channels];
        let stem = Conv::new(init, &format!("{name}.stem"), 3, widths[0], 3, 2);
        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (s, &cout) in widths.iter().enumerate() {
            for b in 0..2 {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(
                    init,
                    &format!("{name}.stage{s}.block{b}"),
                    cin,
                    cout,
                    stride,
                ));
                cin = cout;
            }
        }
        Ok(Self {
            channels,
            stem,
            blocks,
        })
    }

    /// Encodes an `[h, w, 3]` image into an `[⌈h/8⌉, ⌈w/8⌉, c]` map.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: &Image) -> Result<Var> {
        ensure!(
            image.width >= MIN_SIDE && image.height >= MIN_SIDE,
            "image {}x{} smaller than {MIN_SIDE}x{MIN_SIDE}",
            image.width,
            image.height
        );
        let x = Tensor::from_fn(&[image.height, image.width, 3], |i| {
            T::c(2.0 * image.data[i] as f64 - 1.0)
        });
        let x = g.constant(x);
        let x = self.stem.forward(g, ps, x)?;
        let mut x = g.gelu(x);
        for b in &self.blocks {
            x = b.forward(g, ps, x)?;
        }
        Ok(x)
    }

    /// Detached encoding of a single view.
    pub fn encode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        image: &Image,
        grid: usize,
        view_id: usize,
    ) -> Result<FeatureGrid<T>> {
        let mut g = Graph::new();
        let map = self.forward(&mut g, ps, image)?;
        let tokens = tokenize(&mut g, map, grid)?;
        Ok(FeatureGrid {
            view_id,
            tokens: g.value(tokens).clone(),
            full_map: g.value(map).clone(),
        })
    }
}

/// Adaptive average pooling of an `[h', w', c]` map into `m²` tokens `[m², c]`.
pub fn tokenize<T: Scalar>(g: &mut Graph<T>, map: Var, grid: usize) -> Result<Var> {
    let shape = g.shape(map).to_vec();
    ensure!(shape.len() == 3, "feature map must be [h, w, c], got {shape:?}");
    let (h, w) = (shape[0], shape[1]);
    ensure!(
        grid >= 1 && h >= grid && w >= grid,
        "feature map {h}x{w} smaller than a {grid}x{grid} grid"
    );
    g.row_mix(map, Rc::new(adaptive_pool(h, w, grid)))
}
