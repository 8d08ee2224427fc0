//! Learned view selection: regresses normalised relative rotation angles and
//! camera distance between the origin and each candidate view.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{euler_xyz, relative_pose, Se3};
use crate::image::Image;
use crate::nn::{adaptive_pool, Conv, Init, Mlp};
use crate::numeric::{Graph, ParamStore, Scalar, Tensor, Var};

/// Predicted or ground-truth closeness of a candidate view to the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view_id: usize,
    /// `|angle| / π` of the intrinsic XYZ Euler decomposition.
    pub angles: [f64; 3],
    /// Camera-centre distance over the scene diameter.
    pub distance: f64,
}

impl ViewScore {
    /// Ranking key: mean angle score plus distance score.
    pub fn key(&self) -> f64 {
        (self.angles[0] + self.angles[1] + self.angles[2]) / 3.0 + self.distance
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.angles[0], self.angles[1], self.angles[2], self.distance]
    }
}

/// Ground truth between camera-to-world poses `origin` and `source`.
pub fn ground_truth_score(view_id: usize, origin: &Se3, source: &Se3, diameter: f64) -> Result<ViewScore> {
    ensure!(diameter > 0.0, "scene diameter must be positive");
    let rel = relative_pose(source, origin)?;
    let e = euler_xyz(&rel.rotation);
    Ok(ViewScore {
        view_id,
        angles: [e[0].abs() / PI, e[1].abs() / PI, e[2].abs() / PI],
        distance: (origin.center() - source.center()).norm() / diameter,
    })
}

/// Ids ordered by ascending key, ties broken by id, truncated to `k`.
pub fn select_top_k(scores: &[ViewScore], k: usize) -> Result<Vec<usize>> {
    ensure!(
        k >= 1 && k <= scores.len(),
        "cannot select {k} of {} views",
        scores.len()
    );
    let mut ranked: Vec<&ViewScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.key()
            .partial_cmp(&b.key())
            .unwrap_or(Ordering::Equal)
            .then(a.view_id.cmp(&b.view_id))
    });
    Ok(ranked.iter().take(k).map(|s| s.view_id).collect())
}

/// `|selected ∩ truth| / |truth|`.
pub fn selection_accuracy(selected: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let t: HashSet<_> = truth.iter().collect();
    selected.iter().filter(|s| t.contains(s)).count() as f64 / truth.len() as f64
}

/// Squared error summed over the three angles and the distance.
pub fn selector_loss(pred: &ViewScore, gt: &ViewScore) -> f64 {
    pred.as_array()
        .iter()
        .zip(gt.as_array())
        .map(|(p, g)| (p - g) * (p - g))
        .sum()
}

/// Four stride-2 convs; the last two stages are pooled to 2×2 and 4×4
/// and concatenated into one descriptor per image.
#[derive(Clone, Debug)]
pub struct Selector {
    pub channels: usize,
    pub convs: Vec<Conv>,
    pub heads: Vec<Mlp>,
}

impl Selector {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        ensure!(
            channels >= 4 && channels.is_multiple_of(4),
            "selector channels must be a positive multiple of 4, got {channels}"
        );
        let widths = [3, channels / 4, channels / 2, channels, channels];
        let convs = (0..4)
            .map(|i| Conv::new(init, &format!("{name}.conv{i}"), widths[i], widths[i + 1], 3, 2))
            .collect();
        let d = 2 * Self::descriptor_len(channels);
        let heads = ["angle_x", "angle_y", "angle_z", "distance"]
            .iter()
            .map(|h| Mlp::new(init, &format!("{name}.head_{h}"), [d, hidden, 1]))
            .collect();
        Ok(Self {
            channels,
            convs,
            heads,
        })
    }

    pub fn descriptor_len(channels: usize) -> usize {
        (4 + 16) * channels
    }

    /// `[1, descriptor_len]` image descriptor.
    pub fn describe<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: &Image) -> Result<Var> {
        let x = Tensor::from_fn(&[image.height, image.width, 3], |i| {
            T::c(2.0 * image.data[i] as f64 - 1.0)
        });
        let mut x = g.constant(x);
        let mut pooled = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let y = c.forward(g, ps, x)?;
            x = g.gelu(y);
            if i >= 2 {
                let m = if i == 2 { 2 } else { 4 };
                let s = g.shape(x).to_vec();
                let p = g.row_mix(x, Rc::new(adaptive_pool(s[0], s[1], m)))?;
                pooled.push(g.reshape(p, &[1, m * m * self.channels])?);
            }
        }
        g.concat(&pooled)
    }

    /// Scores every candidate against the origin; rows follow `candidates`.
    ///
    /// Returns `[n, 4]` sigmoid outputs `(angle_x, angle_y, angle_z, distance)`.
    pub fn score<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        origin: &Image,
        candidates: &[&Image],
    ) -> Result<Var> {
        ensure!(!candidates.is_empty(), "no candidate views to score");
        let f0 = self.describe(g, ps, origin)?;
        let mut parts = Vec::with_capacity(2 * candidates.len());
        for img in candidates {
            let fi = if std::ptr::eq(*img, origin) {
                f0
            } else {
                self.describe(g, ps, img)?
            };
            parts.push(f0);
            parts.push(fi);
        }
        let row = g.concat(&parts)?;
        let d = 2 * Self::descriptor_len(self.channels);
        let pairs = g.reshape(row, &[candidates.len(), d])?;
        let outs = self
            .heads
            .iter()
            .map(|h| {
                let y = h.forward(g, ps, pairs)?;
                Ok(g.sigmoid(y))
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&outs)
    }

    /// Detached scores as [`ViewScore`]s.
    pub fn score_views<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        origin: &Image,
        candidates: &[(usize, &Image)],
    ) -> Result<Vec<ViewScore>> {
        let mut g = Graph::new();
        let imgs: Vec<&Image> = candidates.iter().map(|c| c.1).collect();
        let out = self.score(&mut g, ps, origin, &imgs)?;
        Ok(scores_from_rows(g.value(out), candidates.iter().map(|c| c.0)))
    }
}

pub fn scores_from_rows<T: Scalar>(t: &Tensor<T>, ids: impl Iterator<Item = usize>) -> Vec<ViewScore> {
    t.data()
        .chunks(4)
        .zip(ids)
        .map(|(r, view_id)| {
            let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
            ViewScore {
                view_id,
                angles: [f(r[0]), f(r[1]), f(r[2])],
                distance: f(r[3]),
            }
        })
        .collect()
}

/// Differentiable mean over pairs of [`selector_loss`] for `[n, 4]` predictions.
pub fn selector_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[ViewScore]) -> Result<Var> {
    ensure!(
        g.value(pred).rows() == gt.len() && g.value(pred).cols() == 4,
        "selector predictions {:?} do not match {} targets",
        g.shape(pred),
        gt.len()
    );
    let target = Tensor::from_fn(&[gt.len(), 4], |i| T::c(gt[i / 4].as_array()[i % 4]));
    let target = g.constant(target);
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, T::c(1.0 / gt.len() as f64)))
}
