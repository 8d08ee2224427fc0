//! Parameterised layers shared by the encoder, OmniView and decoders.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::{AttnShape, Graph, ParamId, ParamStore, Scalar, Var};

/// Registers parameters under a dotted name prefix.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        self.store.xavier(name, shape, fan_in, fan_out, self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = init.xavier(&format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out);
        let b = init.store.zeros(format!("{name}.b"), &[fan_out]);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: init.store.filled(format!("{name}.gain"), &[dim], 1.0),
            bias: init.store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(ps, self.gain), g.param(ps, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dims: [usize; 3]) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dims[0], dims[1]),
            fc2: Linear::new(init, &format!("{name}.fc2"), dims[1], dims[2]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// Pre-norm residual transformer block: attention followed by a GELU FFN.
///
/// Used both for self-attention (keys from the queries' own token set) and
/// cross-attention (keys from a separate context, normalised by `norm_ctx`).
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub dim: usize,
    pub norm_q: LayerNorm,
    pub norm_ctx: Option<LayerNorm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        cross: bool,
    ) -> Result<Self> {
        crate::error::ensure!(
            heads > 0 && dim.is_multiple_of(heads),
            "model dim {dim} not divisible by {heads} heads"
        );
        Ok(Self {
            heads,
            dim,
            norm_q: LayerNorm::new(init, &format!("{name}.norm_q"), dim),
            norm_ctx: cross.then(|| LayerNorm::new(init, &format!("{name}.norm_ctx"), dim)),
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), dim),
            ffn: Mlp::new(init, &format!("{name}.ffn"), [dim, dim * ffn_mult, dim]),
        })
    }

    /// Self-attention over `batch` independent groups of `n` tokens each.
    pub fn self_attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        batch: usize,
        keep: Option<Rc<Vec<bool>>>,
    ) -> Result<Var> {
        let n = g.value(x).rows() / batch.max(1);
        let h = self.norm_q.forward(g, ps, x)?;
        let shape = AttnShape {
            batch,
            nq: n,
            nk: n,
            heads: self.heads,
        };
        let a = self.attend(g, ps, h, h, shape, keep)?;
        self.finish(g, ps, x, a)
    }

    /// Queries from `x` (`[nq, dim]`), keys and values from `ctx` (`[nk, dim]`).
    pub fn cross_attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        ctx: Var,
    ) -> Result<Var> {
        let shape = AttnShape {
            batch: 1,
            nq: g.value(x).rows(),
            nk: g.value(ctx).rows(),
            heads: self.heads,
        };
        let h = self.norm_q.forward(g, ps, x)?;
        let c = match &self.norm_ctx {
            Some(n) => n.forward(g, ps, ctx)?,
            None => self.norm_q.forward(g, ps, ctx)?,
        };
        let a = self.attend(g, ps, h, c, shape, None)?;
        self.finish(g, ps, x, a)
    }

    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        h: Var,
        c: Var,
        shape: AttnShape,
        keep: Option<Rc<Vec<bool>>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, ps, h)?;
        let k = self.k.forward(g, ps, c)?;
        let v = self.v.forward(g, ps, c)?;
        g.attention(q, k, v, shape, keep)
    }

    fn finish<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, a: Var) -> Result<Var> {
        let o = self.out.forward(g, ps, a)?;
        let x = g.add(x, o)?;
        let h = self.norm_ffn.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, h)?;
        g.add(x, f)
    }
}

/// Residual conv block: `gelu(shortcut(x) + conv2(gelu(conv1(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = k * k * cin;
        let w = init.xavier(&format!("{name}.w"), &[fan_in, cout], fan_in, k * k * cout);
        let b = init.store.zeros(format!("{name}.b"), &[cout]);
        Self { w, b, k, stride }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        g.conv2d(x, w, b, self.k, self.stride)
    }
}

impl ResBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (cin != cout || stride != 1)
            .then(|| Conv::new(init, &format!("{name}.shortcut"), cin, cout, 1, stride));
        Self {
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, 3, stride),
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, 3, 1),
            shortcut,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, ps, x)?;
        let h = g.gelu(h);
        let h = self.conv2.forward(g, ps, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        let y = g.add(s, h)?;
        Ok(g.gelu(y))
    }
}

/// Adaptive average pooling of an `[h, w, c]` map to `m × m` cells, as a
/// row mixing from the `h·w` texels to the `m²` cells (row-major).
///
/// Cell `i` along an axis of length `n` covers `[⌊i·n/m⌋, ⌈(i+1)·n/m⌉)`.
pub fn adaptive_pool<T: Scalar>(h: usize, w: usize, m: usize) -> crate::numeric::RowMixing<T> {
    let span = |i: usize, n: usize| (i * n / m, ((i + 1) * n).div_ceil(m));
    let mut mix = crate::numeric::RowMixing::new();
    for cy in 0..m {
        let (y0, y1) = span(cy, h);
        for cx in 0..m {
            let (x0, x1) = span(cx, w);
            let wt = T::c(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
            mix.push_row((y0..y1).flat_map(|y| (x0..x1).map(move |x| (y * w + x, wt))));
        }
    }
    mix
}
