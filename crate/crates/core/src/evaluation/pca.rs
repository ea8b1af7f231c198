//! Two-component principal component projection by power iteration.

use crate::error::{Error, Result};

const MAX_ITERS: usize = 20_000;
const TOL: f64 = 1e-26;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Per-row coordinates on the first two components.
    pub coords: Vec<[f64; 2]>,
    /// Unit component vectors; the largest-magnitude entry of each is positive.
    pub components: [Vec<f64>; 2],
    /// Fraction of total variance along each component.
    pub explained: [f64; 2],
    pub mean: Vec<f64>,
    /// Set when the data has rank below two.
    pub warning: Option<String>,
}

fn mat_vec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| c[i * d + j] * v[j]).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Leading eigenpair of the symmetric matrix `c` (`d x d`).
fn power_iteration(c: &[f64], d: usize) -> (f64, Vec<f64>) {
    // Fixed start with distinct entries so it is not orthogonal to common
    // structured eigenvectors.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 0.1).collect();
    normalize(&mut v);
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(c, d, &v);
        let n = normalize(&mut w);
        if n == 0.0 {
            return (0.0, v);
        }
        let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
        v = w;
        if diff < TOL {
            break;
        }
    }
    let cv = mat_vec(c, d, &v);
    let rq: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
    (rq.max(0.0), v)
}

/// Projects rows of `data` onto their first two principal components.
pub fn pca_project(data: &[Vec<f64>]) -> Result<Projection> {
    let n = data.len();
    if n < 3 {
        return Err(Error::Domain {
            op: "pca_project",
            detail: format!("need at least 3 samples, got {n}"),
        });
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca_project", "rows must share a nonzero length"));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in data {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += a * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let (l1, mut v1) = power_iteration(&cov, d);
    fix_sign(&mut v1);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut l2, mut v2) = power_iteration(&deflated, d);
    let mut warning = None;
    if d < 2 || l2 <= 1e-12 * l1.max(f64::MIN_POSITIVE) {
        warning = Some("data has rank below 2; second component set to zero".to_string());
        l2 = 0.0;
        v2 = vec![0.0; d];
    } else {
        // Remove any drift back toward the first component.
        let dot: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
        v2.iter_mut().zip(&v1).for_each(|(b, a)| *b -= dot * a);
        normalize(&mut v2);
        fix_sign(&mut v2);
    }
    let coords = data
        .iter()
        .map(|r| {
            let c = |v: &[f64]| r.iter().zip(&mean).zip(v).map(|((x, m), w)| (x - m) * w).sum();
            [c(&v1), c(&v2)]
        })
        .collect();
    let frac = |l: f64| if trace > 0.0 { l / trace } else { 0.0 };
    Ok(Projection {
        coords,
        components: [v1, v2],
        explained: [frac(l1), frac(l2)],
        mean,
        warning,
    })
}
