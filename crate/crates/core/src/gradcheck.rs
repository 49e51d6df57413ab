//! Central finite-difference checks of analytic gradients.

use crate::tape::{Graph, ParamGrads, Parameterized, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and element of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of `loss` with central differences of step `h`.
///
/// Only parameters accepted by `select` are probed, at most `per_param`
/// evenly spaced elements of each.
pub fn check_gradients<M, F, S>(model: &mut M, h: f64, per_param: usize, select: S, loss: F) -> GradCheckReport
where
    M: Parameterized,
    F: Fn(&M, &mut Graph) -> Var,
    S: Fn(&str) -> bool,
{
    let analytic: ParamGrads = {
        let mut g = Graph::new();
        let l = loss(model, &mut g);
        let grads = g.backward(l);
        g.param_grads(&grads)
    };
    let eval = |m: &M| {
        let mut g = Graph::new();
        let l = loss(m, &mut g);
        g.scalar(l)
    };
    let targets: Vec<(usize, String, usize)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| select(&p.name))
        .map(|(i, p)| (i, p.name.clone(), p.len()))
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, name, len) in targets {
        let stride = (len / per_param.max(1)).max(1);
        for e in (0..len).step_by(stride).take(per_param.max(1)) {
            let orig = model.params()[pi].data[e];
            model.params_mut()[pi].data[e] = orig + h;
            let up = eval(model);
            model.params_mut()[pi].data[e] = orig - h;
            let down = eval(model);
            model.params_mut()[pi].data[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |g| g[e]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), e));
            }
        }
    }
    report
}
