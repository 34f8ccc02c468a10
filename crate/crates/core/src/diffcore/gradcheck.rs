//! Central finite-difference gradient checks.
//!
//! The oracle only evaluates forward values, so it stays independent of the
//! backward rules it is used to verify.

use rand::Rng;

use super::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Step used by every central difference in this crate's tests.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// `(analytic, numeric)` at the worst probe.
    pub worst: (f64, f64),
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.probes += 1;
        if self.probes == 1 || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = (analytic, numeric);
        }
    }
}

/// Check gradients of a scalar function of differentiable inputs.
/// `probes` random (input, element) pairs are compared.
pub fn check_inputs<F, R>(inputs: &[Tensor], probes: usize, rng: &mut R, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    R: Rng,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let grads: Vec<Tensor> = ids.iter().map(|id| g.grad(*id)).collect();

    let mut report = GradCheckReport::default();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[flat] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[flat] -= FD_STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        report.record(grads[which].data()[flat], numeric);
    }
    Ok(report)
}

/// Check gradients with respect to stored parameters.
pub fn check_params<F, R>(
    store: &ParamStore,
    params: &[ParamId],
    probes: usize,
    rng: &mut R,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
    R: Rng,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    g.backward(out)?;
    let grads: Vec<Tensor> = params
        .iter()
        .map(|p| {
            let node = g.param(store, *p);
            g.grad(node)
        })
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let sizes: Vec<usize> = params.iter().map(|p| store.value(*p).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = params[which];
        let orig = store.value(id).data()[flat];
        work.value_mut(id).data_mut()[flat] = orig + FD_STEP;
        let fp = eval(&work)?;
        work.value_mut(id).data_mut()[flat] = orig - FD_STEP;
        let fm = eval(&work)?;
        work.value_mut(id).data_mut()[flat] = orig;
        report.record(grads[which].data()[flat], (fp - fm) / (2.0 * FD_STEP));
    }
    Ok(report)
}
