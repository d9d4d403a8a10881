use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index, autodiff gradient, finite-difference gradient)`
    /// at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients against central finite differences for
/// every element of every parameter and returns the largest
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
///
/// `loss_fn` builds a scalar loss on the given graph; it must be
/// deterministic in the parameters.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_report(loss_fn, params, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(loss);
    let mut analytic = ParamStore::new();
    for (name, t) in params.iter() {
        analytic.insert(name, t.clone())?;
    }
    g.accumulate_param_grads(&grads, &mut analytic, 1.0)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = loss_fn(&mut g, p)?;
        let v = g.value(loss).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic.grad(&name).unwrap().data()[i];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i, ad, fd));
            }
        }
    }
    Ok(report)
}
