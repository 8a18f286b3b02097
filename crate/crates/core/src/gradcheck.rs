//! Central finite differences against the tape's gradients.

use crate::error::Result;
use crate::tape::{Graph, ParamId, ParamSet, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of `loss` with central differences of step `h`
/// for every element of the parameters in `ids`.
pub fn check_gradients(
    params: &ParamSet<f64>,
    ids: &[ParamId],
    h: f64,
    floor: f64,
    loss: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
) -> Result<GradCheck> {
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, &analytic)?;
    g.backward(l, &mut analytic)?;

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, p)?;
        Ok(g.value(l).item())
    };
    let mut probe = params.clone();
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &id in ids {
        let grads: Vec<f64> = analytic
            .get(id)
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; analytic.get(id).len()]);
        for (k, &a) in grads.iter().enumerate() {
            let x = probe.get(id).values()[k];
            probe.get_mut(id).values_mut()[k] = x + h;
            let up = eval(&probe)?;
            probe.get_mut(id).values_mut()[k] = x - h;
            let down = eval(&probe)?;
            probe.get_mut(id).values_mut()[k] = x;
            let n = (up - down) / (2.0 * h);
            let e = relative_error(a, n, floor);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((params.name(id).to_string(), k));
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
    }
    Ok(report)
}
