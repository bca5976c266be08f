use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::{DfmedError, Result};

/// Worst-case disagreement found by [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares autodiff gradients of a scalar function of `params` against
/// central differences `(f(θ+ε) - f(θ-ε)) / 2ε`, elementwise, with relative
/// error `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `max_per_param` caps how many entries of each tensor are probed (spread
/// evenly); `None` probes everything.
pub fn grad_check<Fun>(
    params: &mut ParamStore<f64>,
    eps: f64,
    max_per_param: Option<usize>,
    f: Fun,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_floor(params, eps, max_per_param, 1e-8, f)
}

/// [`grad_check`] with a configurable denominator floor, i.e. relative error
/// `|a - n| / max(|a|, |n|, floor)`. Entries with gradients near the
/// finite-difference noise level of the objective need a floor above `1e-8`.
pub fn grad_check_floor<Fun>(
    params: &mut ParamStore<f64>,
    eps: f64,
    max_per_param: Option<usize>,
    floor: f64,
    f: Fun,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = f(&mut g)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(DfmedError::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new(&*params);
        let l = f(&mut g)?;
        g.backward(l)?.params
    };
    let mut by_id: Vec<Option<Vec<f64>>> = vec![None; params.len()];
    for (id, gr) in analytic {
        by_id[id.0] = Some(gr);
    }

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0, worst_analytic: 0.0, worst_numeric: 0.0, checked: 0 };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let stride = match max_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data[i];
            params.get_mut(id).data[i] = orig + eps;
            let fp = eval(params)?;
            params.get_mut(id).data[i] = orig - eps;
            let fm = eval(params)?;
            params.get_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = by_id[id.0].as_ref().map_or(0.0, |g| g[i]);
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
