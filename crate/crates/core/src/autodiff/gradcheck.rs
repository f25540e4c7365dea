//! Central-difference verification of analytic gradients.
//!
//! The checker rebuilds the objective graph from scratch for every probe, so
//! the supplied builder must be deterministic: any randomness (noise draws,
//! batch composition) has to be fixed before calling in.

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::Result;

/// Knobs for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step size.
    pub step: f64,
    /// Multiplier applied to the analytic gradient before comparison. Keep
    /// at 1.0 for a real check; a deliberate mismatch (say 2.0) turns the
    /// checker into a negative control that must report large errors.
    pub grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            grad_scale: 1.0,
        }
    }
}

/// The single worst coordinate found by a check.
#[derive(Clone, Debug)]
pub struct CoordReport {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Outcome of a finite-difference sweep over every trainable coordinate.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<CoordReport>,
    /// Per-parameter maxima, in store order: (name, max relative error).
    pub per_param: Vec<(String, f64)>,
}

/// Compare the analytic gradient of `build`'s scalar output against central
/// differences, coordinate by coordinate, over every trainable parameter in
/// `store`. Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Parameter values are restored bit-for-bit before returning; gradient
/// accumulators are left cleared.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.clear_grads();
    {
        let mut graph = Graph::new();
        let loss = build(&mut graph, store)?;
        graph.backward(loss, store)?;
    }
    let trainable: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.param(id).trainable)
        .collect();
    let analytic: Vec<Vec<f64>> = trainable
        .iter()
        .map(|&id| {
            let len = store.value(id).len();
            let mut g = store
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; len]);
            for v in &mut g {
                *v *= opts.grad_scale;
            }
            g
        })
        .collect();
    store.clear_grads();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        per_param: Vec::new(),
    };

    for (slot, &id) in trainable.iter().enumerate() {
        let name = store.param(id).name.clone();
        let len = store.value(id).len();
        let mut param_max = 0.0_f64;
        for coord in 0..len {
            let original = store.value(id).data()[coord];

            store.value_mut(id).data_mut()[coord] = original + opts.step;
            let plus = eval(&build, store)?;
            store.value_mut(id).data_mut()[coord] = original - opts.step;
            let minus = eval(&build, store)?;
            store.value_mut(id).data_mut()[coord] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[slot][coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);

            report.coords_checked += 1;
            param_max = param_max.max(rel);
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CoordReport {
                    param: name.clone(),
                    coord,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_param.push((name, param_max));
    }
    Ok(report)
}

fn eval<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.scalar(loss)
}
