use super::graph::{Graph, Var};
use super::params::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / (abs_tol + rel_tol * |numeric|)`; above 1 fails.
    pub excess: f64,
}

impl Offender {
    pub fn ratio(&self) -> f64 {
        self.analytic / self.numeric
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub passed: bool,
    pub checked: usize,
    pub failures: usize,
    pub worst: Option<Offender>,
}

/// Central differences of `f` with respect to every parameter coordinate.
pub fn finite_diff_gradients<F>(params: &ParamStore<f64>, f: &F, step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(p);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let mut grad = Vec::with_capacity(n);
        for k in 0..n {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            grad.push((up - down) / (2.0 * step));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Checks `|g_ad - g_fd| <= abs_tol + rel_tol * |g_fd|` coordinate-wise.
pub fn compare_gradients(
    params: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    numeric: &[Vec<f64>],
    opts: FdOptions,
) -> FdReport {
    let mut checked = 0;
    let mut failures = 0;
    let mut worst: Option<Offender> = None;
    for (id, name, t) in params.iter() {
        let ad = analytic.dense(id, t.len());
        for (k, (&a, &n)) in ad.iter().zip(&numeric[id.index()]).enumerate() {
            checked += 1;
            let excess = (a - n).abs() / (opts.abs_tol + opts.rel_tol * n.abs());
            if excess > 1.0 || !excess.is_finite() {
                failures += 1;
            }
            if worst.as_ref().is_none_or(|w| excess > w.excess || !excess.is_finite()) {
                worst = Some(Offender {
                    param: name.to_string(),
                    index: k,
                    analytic: a,
                    numeric: n,
                    excess,
                });
            }
        }
    }
    FdReport {
        passed: failures == 0,
        checked,
        failures,
        worst,
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
pub fn finite_diff_check<F>(params: &ParamStore<f64>, f: F, opts: FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let numeric = finite_diff_gradients(params, &f, opts.step)?;
    Ok(compare_gradients(params, &analytic, &numeric, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_at_three() {
        let mut p = ParamStore::new();
        let x = p.add("x", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let f = |g: &mut Graph<f64>| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        };
        let numeric = finite_diff_gradients(&p, &f, 1e-4).unwrap();
        assert!((numeric[0][0] - 6.0).abs() < 1e-8);
        let report = finite_diff_check(&p, f, FdOptions::default()).unwrap();
        assert!(report.passed);
        assert!((report.worst.unwrap().analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut p = ParamStore::new();
        let w = p
            .add(
                "w",
                Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            )
            .unwrap();
        let f = |g: &mut Graph<f64>| {
            let x = g.constant(Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.3, -0.7])?);
            let wv = g.param(w);
            let logits = g.matmul(x, wv)?;
            let lp = g.log_softmax(logits);
            let picked = g.pick(lp, &[(0, 1), (1, 3)])?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0))
        };
        let report = finite_diff_check(&p, f, FdOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn injected_fault_detected() {
        let mut p = ParamStore::new();
        let w = p
            .add("w", Tensor::new(vec![1, 3], vec![0.5, -0.3, 0.9]).unwrap())
            .unwrap();
        let f = |g: &mut Graph<f64>| {
            let v = g.param(w);
            let t = g.tanh(v);
            Ok(g.sum(t))
        };
        let mut analytic = {
            let mut g = Graph::with_params(&p);
            let loss = f(&mut g).unwrap();
            g.backward(loss).unwrap()
        };
        analytic.scale(2.0);
        let numeric = finite_diff_gradients(&p, &f, 1e-4).unwrap();
        let report = compare_gradients(&p, &analytic, &numeric, FdOptions::default());
        assert!(!report.passed);
        let worst = report.worst.unwrap();
        assert!((worst.ratio() - 2.0).abs() < 1e-6, "{worst:?}");
    }
}
