//! Central finite-difference checks of analytic gradients.
//!
//! The numerical side only ever runs forward passes, so it is independent of
//! every backward rule it verifies.

use super::{AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub checked: usize,
    /// (input label, flat index, analytic, numeric) at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn new(floor: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            floor,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error_floor(analytic, numeric, self.floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }

    pub fn merge(mut self, other: GradCheck) -> GradCheck {
        if other.max_rel_error > self.max_rel_error {
            self.worst = other.worst;
            self.max_rel_error = other.max_rel_error;
        }
        self.checked += other.checked;
        self
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps exact zeros from
/// turning rounding noise into a large ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, DEFAULT_FLOOR)
}

pub const DEFAULT_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks gradients with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |ins: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut report = GradCheck::new(DEFAULT_FLOOR);
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.record(&format!("input{k}"), i, analytic[k].data()[i], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to stored parameters. At most
/// `max_per_param` elements of each parameter are probed (evenly strided).
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    max_per_param: usize,
    f: F,
) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Graph) -> Result<Var, AutodiffError>,
{
    check_params_floor(store, ids, step, max_per_param, DEFAULT_FLOOR, f)
}

/// [`check_params`] with an explicit relative-error floor, for losses whose
/// magnitude limits the finite-difference resolution.
pub fn check_params_floor<F>(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    max_per_param: usize,
    floor: f64,
    f: F,
) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Graph) -> Result<Var, AutodiffError>,
{
    let analytic: Vec<(ParamId, Tensor)> = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        g.into_param_grads()
    };
    let lookup = |id: ParamId| analytic.iter().find(|(p, _)| *p == id).map(|(_, t)| t);
    let mut work = store.clone();
    let mut report = GradCheck::new(floor);
    for &id in ids {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let plus = {
                let mut g = Graph::with_params(&work);
                let l = f(&mut g)?;
                g.value(l).item()
            };
            work.value_mut(id).data_mut()[i] = orig - step;
            let minus = {
                let mut g = Graph::with_params(&work);
                let l = f(&mut g)?;
                g.value(l).item()
            };
            work.value_mut(id).data_mut()[i] = orig;
            let a = lookup(id).map_or(0.0, |t| t.data()[i]);
            report.record(store.name(id), i, a, (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
