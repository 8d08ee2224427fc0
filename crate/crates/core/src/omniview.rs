//! OmniView transformer: per-view self-attention over patch tokens, then
//! sequential cross-attention from the origin view into every source view.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::nn::{AttentionBlock, Init, LayerNorm};
use crate::numeric::{Graph, ParamId, ParamStore, RowMixing, Scalar, Var};

#[derive(Clone, Debug)]
pub struct OmniLayer {
    /// Unposed view fusion, shared by all views.
    pub uvf: AttentionBlock,
    /// Origin-centric aggregation, origin queries a source.
    pub oca: AttentionBlock,
}

#[derive(Clone, Debug)]
pub struct OmniView {
    pub grid: usize,
    pub dim: usize,
    /// `[m², dim]` learned positional embedding.
    pub pos_embed: ParamId,
    pub layers: Vec<OmniLayer>,
    /// Applied to both ends of the stack before taking the token update.
    pub norm: LayerNorm,
}

impl OmniView {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        grid: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        let n = grid * grid;
        let pos_embed = init.xavier(&format!("{name}.pos_embed"), &[n, dim], n, dim);
        let layers = (0..layers)
            .map(|l| {
                Ok(OmniLayer {
                    uvf: AttentionBlock::new(init, &format!("{name}.layer{l}.uvf"), dim, heads, ffn_mult, false)?,
                    oca: AttentionBlock::new(init, &format!("{name}.layer{l}.oca"), dim, heads, ffn_mult, true)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grid,
            dim,
            pos_embed,
            layers,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
        })
    }

    pub fn add_positions<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let p = g.param(ps, self.pos_embed);
        g.add(tokens, p)
    }

    pub fn unposed_view_fusion<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        layer: usize,
        tokens: Var,
    ) -> Result<Var> {
        self.layers[layer].uvf.self_attend(g, ps, tokens, 1, None)
    }

    pub fn origin_centric_aggregation<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        layer: usize,
        origin: Var,
        source: Var,
    ) -> Result<Var> {
        ensure!(
            g.value(origin).cols() == g.value(source).cols(),
            "origin has {} channels, source has {}",
            g.value(origin).cols(),
            g.value(source).cols()
        );
        self.layers[layer].oca.cross_attend(g, ps, origin, source)
    }

    /// Runs every layer on position-embedded tokens. `sources` must already be
    /// in selection order; the returned origin tokens keep their shape.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        origin: Var,
        sources: &[Var],
    ) -> Result<Var> {
        let mut origin = origin;
        let mut sources = sources.to_vec();
        for l in 0..self.layers.len() {
            origin = self.unposed_view_fusion(g, ps, l, origin)?;
            for s in sources.iter_mut() {
                *s = self.unposed_view_fusion(g, ps, l, *s)?;
            }
            for &s in &sources {
                origin = self.origin_centric_aggregation(g, ps, l, origin, s)?;
            }
        }
        Ok(origin)
    }

    /// Embeds and aggregates, then adds the normalised origin token update
    /// `norm(end) − norm(start)` back onto every texel of the origin map that
    /// falls in the token's cell. The update is zero when the stack is an
    /// identity and does not grow with the number of sources.
    ///
    /// Returns `(updated map [h'·w', c], final origin tokens [m², c])`.
    pub fn aggregate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        origin_map: Var,
        origin_tokens: Var,
        source_tokens: &[Var],
    ) -> Result<(Var, Var)> {
        let shape = g.shape(origin_map).to_vec();
        ensure!(shape.len() == 3, "origin map must be [h, w, c], got {shape:?}");
        let start = self.add_positions(g, ps, origin_tokens)?;
        let sources = source_tokens
            .iter()
            .map(|&s| self.add_positions(g, ps, s))
            .collect::<Result<Vec<_>>>()?;
        let end = self.run(g, ps, start, &sources)?;
        let a = self.norm.forward(g, ps, end)?;
        let b = self.norm.forward(g, ps, start)?;
        let delta = g.sub(a, b)?;
        let spread = g.row_mix(delta, Rc::new(cell_broadcast(shape[0], shape[1], self.grid)))?;
        let flat = g.reshape(origin_map, &[shape[0] * shape[1], shape[2]])?;
        Ok((g.add(flat, spread)?, end))
    }
}

/// Gathers, for every texel of an `h × w` map, the token of the `m × m` cell
/// that contains it.
pub fn cell_broadcast<T: Scalar>(h: usize, w: usize, m: usize) -> RowMixing<T> {
    let mut mix = RowMixing::new();
    for y in 0..h {
        let cy = y * m / h;
        for x in 0..w {
            mix.push_row([(cy * m + x * m / w, T::one())]);
        }
    }
    mix
}
