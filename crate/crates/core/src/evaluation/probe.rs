//! Linear read-out of ground-truth object factors from slot latents.

use sceneslots_data::ObjectFactors;

use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 100;
pub const PROBE_STEPS: usize = 2000;
pub const PROBE_LR: f64 = 0.1;

/// Per-feature standardization fitted on training inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let n = x.len().max(1) as f64;
        let d = x.first().map_or(0, Vec::len);
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    /// Standardized features with a trailing constant 1 for the bias.
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = row
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect();
        out.push(1.0);
        out
    }
}

/// Linear map `[d + 1, out]` applied to standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub scaler: Standardizer,
    pub weights: Vec<f64>,
    pub outputs: usize,
}

impl LinearModel {
    fn raw(&self, xs: &[f64]) -> Vec<f64> {
        let o = self.outputs;
        let mut y = vec![0.0; o];
        for (i, &x) in xs.iter().enumerate() {
            for (k, yk) in y.iter_mut().enumerate() {
                *yk += x * self.weights[i * o + k];
            }
        }
        y
    }

    pub fn predict(&self, row: &[f64]) -> Vec<f64> {
        self.raw(&self.scaler.apply(row))
    }

    pub fn classify(&self, row: &[f64]) -> usize {
        let y = self.predict(row);
        let mut best = 0;
        for k in 1..y.len() {
            if y[k] > y[best] {
                best = k;
            }
        }
        best
    }
}

fn check(x: &[Vec<f64>], n: usize) -> Result<usize> {
    if x.len() != n || x.is_empty() {
        return Err(Error::shape("probe", format!("{} inputs vs {n} targets", x.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("probe", "ragged inputs"));
    }
    Ok(d)
}

/// Softmax-linear classifier trained by full-batch gradient descent on the
/// mean cross-entropy.
pub fn fit_classifier(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<LinearModel> {
    let d = check(x, y.len())? + 1;
    let scaler = Standardizer::fit(x);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| scaler.apply(r)).collect();
    let mut model = LinearModel {
        scaler,
        weights: vec![0.0; d * classes],
        outputs: classes,
    };
    let n = xs.len() as f64;
    let mut grad = vec![0.0; d * classes];
    for _ in 0..PROBE_STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, &label) in xs.iter().zip(y) {
            let logits = model.raw(row);
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (i, &xi) in row.iter().enumerate() {
                for k in 0..classes {
                    let p = e[k] / z - if k == label { 1.0 } else { 0.0 };
                    grad[i * classes + k] += xi * p;
                }
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= PROBE_LR * g / n;
        }
    }
    Ok(model)
}

/// Least-squares linear regression trained by full-batch gradient descent.
/// Targets are standardized during fitting and mapped back afterwards.
pub fn fit_regression(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<LinearModel> {
    let d = check(x, y.len())? + 1;
    let o = y[0].len();
    let scaler = Standardizer::fit(x);
    let target = Standardizer::fit(y);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| scaler.apply(r)).collect();
    let ys: Vec<Vec<f64>> = y.iter().map(|r| target.apply(r)).collect();
    let mut model = LinearModel {
        scaler,
        weights: vec![0.0; d * o],
        outputs: o,
    };
    let n = xs.len() as f64;
    let mut grad = vec![0.0; d * o];
    for _ in 0..PROBE_STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, t) in xs.iter().zip(&ys) {
            let p = model.raw(row);
            for (i, &xi) in row.iter().enumerate() {
                for k in 0..o {
                    grad[i * o + k] += xi * (p[k] - t[k]);
                }
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= PROBE_LR * g / n;
        }
    }
    // Fold the target standardization into the weights.
    for i in 0..d {
        for k in 0..o {
            model.weights[i * o + k] *= target.std[k];
        }
    }
    for k in 0..o {
        model.weights[(d - 1) * o + k] += target.mean[k];
    }
    Ok(model)
}

pub fn accuracy(model: &LinearModel, x: &[Vec<f64>], y: &[usize]) -> f64 {
    let hits = x.iter().zip(y).filter(|(r, &l)| model.classify(r) == l).count();
    hits as f64 / x.len().max(1) as f64
}

/// Coefficient of determination pooled over all outputs.
pub fn r_squared(model: &LinearModel, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let o = model.outputs;
    let n = y.len().max(1) as f64;
    let mean: Vec<f64> = (0..o).map(|k| y.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let (mut res, mut tot) = (0.0, 0.0);
    for (r, t) in x.iter().zip(y) {
        let p = model.predict(r);
        for k in 0..o {
            res += (t[k] - p[k]).powi(2);
            tot += (t[k] - mean[k]).powi(2);
        }
    }
    if tot > 0.0 {
        1.0 - res / tot
    } else {
        0.0
    }
}

/// A slot latent paired with the factors of the object it was matched to.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub latent: Vec<f64>,
    pub factors: ObjectFactors,
}

/// Held-out probe scores. Scale is reported only when it varies.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub color_accuracy: f64,
    pub shape_accuracy: f64,
    pub scale_accuracy: Option<f64>,
    pub position_r2: f64,
}

fn categorical(train: &[ProbeSample], test: &[ProbeSample], f: impl Fn(&ObjectFactors) -> u16) -> Result<f64> {
    let classes = train.iter().chain(test).map(|s| usize::from(f(&s.factors))).max().unwrap_or(0) + 1;
    let x: Vec<Vec<f64>> = train.iter().map(|s| s.latent.clone()).collect();
    let y: Vec<usize> = train.iter().map(|s| usize::from(f(&s.factors))).collect();
    let model = fit_classifier(&x, &y, classes)?;
    let tx: Vec<Vec<f64>> = test.iter().map(|s| s.latent.clone()).collect();
    let ty: Vec<usize> = test.iter().map(|s| usize::from(f(&s.factors))).collect();
    Ok(accuracy(&model, &tx, &ty))
}

/// Trains one linear read-out per factor on `train` and scores it on `test`.
pub fn factor_probe(train: &[ProbeSample], test: &[ProbeSample]) -> Result<ProbeResult> {
    if train.len() < MIN_SAMPLES {
        return Err(Error::Domain {
            op: "factor_probe",
            detail: format!("need at least {MIN_SAMPLES} training samples, got {}", train.len()),
        });
    }
    if test.is_empty() {
        return Err(Error::Domain {
            op: "factor_probe",
            detail: "empty test split".into(),
        });
    }
    let color_accuracy = categorical(train, test, |f| f.color_id)?;
    let shape_accuracy = categorical(train, test, |f| f.shape_id)?;
    let first_scale = train[0].factors.scale;
    let scale_accuracy = if train.iter().any(|s| s.factors.scale != first_scale) {
        Some(categorical(train, test, |f| f.scale)?)
    } else {
        None
    };
    let pos = |s: &[ProbeSample]| -> Vec<Vec<f64>> {
        s.iter()
            .map(|p| vec![f64::from(p.factors.x), f64::from(p.factors.y)])
            .collect()
    };
    let x: Vec<Vec<f64>> = train.iter().map(|s| s.latent.clone()).collect();
    let model = fit_regression(&x, &pos(train))?;
    let tx: Vec<Vec<f64>> = test.iter().map(|s| s.latent.clone()).collect();
    let position_r2 = r_squared(&model, &tx, &pos(test));
    Ok(ProbeResult {
        color_accuracy,
        shape_accuracy,
        scale_accuracy,
        position_r2,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn separable_labels_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let m = fit_classifier(&x, &y, 2).unwrap();
        assert!(accuracy(&m, &x, &y) > 0.95);
    }

    #[test]
    fn linear_targets_have_unit_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..150)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![3.0 * r[1] + 5.0, -r[2] + 0.5 * r[0]]).collect();
        let m = fit_regression(&x, &y).unwrap();
        assert!(r_squared(&m, &x, &y) > 0.999);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let s = ProbeSample {
            latent: vec![0.0],
            factors: ObjectFactors::default(),
        };
        assert!(factor_probe(&vec![s.clone(); 99], &[s]).is_err());
    }
}
