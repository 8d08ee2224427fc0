//! Central finite-difference oracle for verifying analytic gradients.
//!
//! Only forward evaluations are used here, so the oracle is independent of
//! the backward implementation it checks.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst single coordinate, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Per-tensor comparison: `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`.
#[derive(Clone, Debug)]
pub struct TensorError {
    pub name: String,
    pub numel: usize,
    pub grad_norm: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Number of scalar coordinates compared.
    pub checked: usize,
    /// Coordinate with the largest elementwise relative error.
    pub worst: Option<Mismatch>,
    pub per_tensor: Vec<TensorError>,
}

impl GradCheckReport {
    /// Largest per-tensor relative error.
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst_tensor(&self) -> Option<&TensorError> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64], floor: f64) {
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for (j, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            let rel = relative_error(a, n, floor);
            if self.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                self.worst = Some(Mismatch {
                    name: name.to_string(),
                    index: j,
                    analytic: a,
                    numeric: n,
                    rel_error: rel,
                });
            }
        }
        self.checked += analytic.len();
        let (na, nn) = (na.sqrt(), nn.sqrt());
        self.per_tensor.push(TensorError {
            name: name.to_string(),
            numel: analytic.len(),
            grad_norm: na,
            rel_error: diff.sqrt() / na.max(nn).max(floor),
        });
    }
}

/// Compares the gradient of every parameter coordinate in `store` against
/// central differences with step `h`.
///
/// `build` must construct the scalar loss from the given parameters
/// deterministically.
pub fn check_params(
    store: &mut ParamStore<f64>,
    h: f64,
    floor: f64,
    mut build: impl FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
) -> Result<GradCheckReport> {
    let (g, loss) = build(store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| {
            grads
                .param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.value(id).numel()])
        })
        .collect();
    drop(g);

    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let (g, l) = build(s)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let mut numeric = Vec::with_capacity(store.value(id).numel());
        for j in 0..store.value(id).numel() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        report.record(&name, &analytic[id.index()], &numeric, floor);
    }
    Ok(report)
}

/// Same check for free input tensors of a single expression.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    h: f64,
    floor: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let run = |xs: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| {
                if track {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = run(inputs, true)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; xs[i].numel()]);
        let mut numeric = Vec::with_capacity(xs[i].numel());
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let (gp, _, op) = run(&xs, false)?;
            xs[i].data_mut()[j] = orig - h;
            let (gm, _, om) = run(&xs, false)?;
            xs[i].data_mut()[j] = orig;
            numeric.push((gp.value(op).item() - gm.value(om).item()) / (2.0 * h));
        }
        report.record(&format!("input{i}"), &analytic, &numeric, floor);
    }
    Ok(report)
}
