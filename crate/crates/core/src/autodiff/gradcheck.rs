//! Central finite-difference checks of backward-pass gradients.
//!
//! Errors are reported per entry as `|a - n| / max(|a|, |n|, 1)`: relative for
//! entries of magnitude above one, absolute below, so that entries that are
//! zero up to rounding do not dominate.

use crate::error::Result;
use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (tensor, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Entries visited for a tensor of `n` elements.
pub fn sample_indices(n: usize, max_entries: usize) -> Vec<usize> {
    if n <= max_entries {
        (0..n).collect()
    } else {
        (0..max_entries).map(|i| i * n / max_entries).collect()
    }
}

fn evaluate<S: Scalar, F>(params: &[Tensor<S>], f: &F) -> Result<S>
where
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.item(out)
}

/// Backward-pass gradients of `f` at `params`.
pub fn analytic_gradient<S: Scalar, F>(params: &[Tensor<S>], f: &F) -> Result<Vec<Tensor<S>>>
where
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect())
}

/// Central differences `(f(p+h) - f(p-h)) / 2h` at the sampled entries; the
/// remaining entries are left at zero.
pub fn numeric_gradient<S: Scalar, F>(
    params: &[Tensor<S>],
    opts: GradCheckOptions,
    f: &F,
) -> Result<Vec<Tensor<S>>>
where
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let h = S::lit(opts.h);
    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape().to_vec());
        for i in sample_indices(params[p].len(), opts.max_entries) {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = evaluate(&work, f)?;
            work[p].data_mut()[i] = orig - h;
            let down = evaluate(&work, f)?;
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (h + h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares two gradient sets at the sampled entries.
pub fn compare<S: Scalar>(
    analytic: &[Tensor<S>],
    numeric: &[Tensor<S>],
    max_entries: usize,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for i in sample_indices(a.len(), max_entries) {
            let (av, nv) = (a.data()[i].to_f64_lossy(), n.data()[i].to_f64_lossy());
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(1.0);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((p, i, av, nv));
            }
        }
    }
    report
}

/// Checks backward-pass gradients of the scalar graph built by `f` against
/// central finite differences.
pub fn grad_check<S: Scalar, F>(
    params: &[Tensor<S>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(params, &f)?;
    let numeric = numeric_gradient(params, opts, &f)?;
    Ok(compare(&analytic, &numeric, opts.max_entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn linear_function_is_exact() {
        let p = vec![Tensor::<f64>::scalar(0.7)];
        let r = grad_check(&p, GradCheckOptions::default(), |g, v| {
            g.scale(v[0], 3.0)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let p = vec![Tensor::<f64>::zeros(vec![2])];
        let r = grad_check(&p, GradCheckOptions::default(), |_, v| Ok(v[0]));
        assert!(matches!(r, Err(Error::NotScalar(_))));
    }

    #[test]
    fn stop_gradient_discrepancy_is_visible() {
        // f(x) = stop(x) * x: backward reports x, differences report 2x
        let p = vec![Tensor::<f64>::scalar(3.0)];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.stop_gradient(v[0])?;
            g.mul(s, v[0])
        };
        let a = analytic_gradient(&p, &f).unwrap();
        let n = numeric_gradient(&p, GradCheckOptions::default(), &f).unwrap();
        assert!((a[0].data()[0] - 3.0).abs() < 1e-12);
        assert!((n[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_is_even_and_bounded() {
        assert_eq!(sample_indices(4, 10), vec![0, 1, 2, 3]);
        assert_eq!(sample_indices(10, 5), vec![0, 2, 4, 6, 8]);
    }
}
