//! Central finite-difference gradient checking.

use super::{Graph, ParamStore, Var};
use crate::Result;

/// Denominator floor of the relative error, so gradients that are zero
/// up to rounding compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, element, analytic, numeric)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences with step `h`, over every element of every parameter.
pub fn check_gradients<F>(store: &ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        for e in 0..store.get(id).numel() {
            let orig = store.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[e]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), e, analytic, numeric));
            }
        }
    }
    Ok(report)
}
