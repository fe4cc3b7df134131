use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Result, StatError};

/// Worst coordinate found by a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if err > self.max_relative_error || self.checked == 0 {
            self.max_relative_error = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }
}

fn check_eps(epsilon: f32) -> Result<()> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(StatError::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-5, 1e-2]"
        )));
    }
    Ok(())
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(StatError::shape("grad_check", t.shape(), &[]));
    }
    let y = t.item() as f64;
    if !y.is_finite() {
        return Err(StatError::NonFinite("grad_check objective".into()));
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Error per coordinate is `|analytic - numeric| / max(1, |numeric|)`; the
/// step actually taken in `f32` is measured and divided out in `f64`.
pub fn grad_check<F>(mut f: F, x: &Tensor, epsilon: f32) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    check_eps(epsilon)?;
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&mut g, leaf)?;
    scalar_of(&g, out)?;
    let analytic = g.backward(out)?.wrt(&g, leaf);

    let eval = |f: &mut F, t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(t);
        let out = f(&mut g, leaf)?;
        scalar_of(&g, out)
    };

    let mut report = GradCheckReport::new();
    for i in 0..x.numel() {
        let base = x.data()[i];
        let (hi, lo) = (base + epsilon, base - epsilon);
        let mut xp = x.clone();
        xp.data_mut()[i] = hi;
        let mut xm = x.clone();
        xm.data_mut()[i] = lo;
        let numeric = (eval(&mut f, xp)? - eval(&mut f, xm)?) / (hi as f64 - lo as f64);
        report.record(i, analytic.data()[i] as f64, numeric);
    }
    Ok(report)
}

/// Finite-difference check of `f` against every parameter in `store`.
///
/// At most `max_per_param` evenly spaced coordinates are probed in each
/// parameter; `worst_index` is a flat index over the probed coordinates.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    epsilon: f32,
    max_per_param: usize,
) -> Result<(GradCheckReport, Vec<(String, f64)>)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_params(store, f, epsilon, max_per_param, false)
}

/// Like [`grad_check_params`] but with the five-point central stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose truncation error
/// is O(h^4). Deep f32 models need a step large enough to sit above rounding
/// noise, where the two-point stencil's O(h^2) bias is already visible.
pub fn grad_check_params_five_point<F>(
    store: &ParamStore,
    f: F,
    epsilon: f32,
    max_per_param: usize,
) -> Result<(GradCheckReport, Vec<(String, f64)>)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_params(store, f, epsilon, max_per_param, true)
}

fn check_params<F>(
    store: &ParamStore,
    mut f: F,
    epsilon: f32,
    max_per_param: usize,
    five_point: bool,
) -> Result<(GradCheckReport, Vec<(String, f64)>)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_eps(epsilon)?;
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let vars: std::collections::HashMap<ParamId, Var> = g.param_vars().into_iter().collect();

    let mut work = store.clone();
    let mut report = GradCheckReport::new();
    let mut per_param = Vec::new();
    let mut flat = 0;
    for (id, p) in store.iter() {
        let n = p.tensor.numel();
        let analytic = match vars.get(&id) {
            Some(&v) => grads.wrt(&g, v).into_data(),
            None => vec![0.0; n],
        };
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let mut worst = 0.0f64;
        for i in (0..n).step_by(stride) {
            let base = p.tensor.data()[i];
            let mut at = |x: f32| -> Result<f64> {
                work.tensor_mut(id).data_mut()[i] = x;
                let mut g = Graph::new();
                let o = f(&mut g, &work)?;
                scalar_of(&g, o)
            };
            let (hi, lo) = (base + epsilon, base - epsilon);
            let d1 = (at(hi)? - at(lo)?) / (hi as f64 - lo as f64);
            let numeric = if five_point {
                let (hi2, lo2) = (base + 2.0 * epsilon, base - 2.0 * epsilon);
                let d2 = (at(hi2)? - at(lo2)?) / (hi2 as f64 - lo2 as f64);
                (4.0 * d1 - d2) / 3.0
            } else {
                d1
            };
            work.tensor_mut(id).data_mut()[i] = base;
            let a = analytic[i] as f64;
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
            report.record(flat, a, numeric);
            flat += 1;
        }
        per_param.push((p.name.clone(), worst));
    }
    Ok((report, per_param))
}
