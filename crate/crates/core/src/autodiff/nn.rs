//! Layer helpers composed from graph ops.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Weights of a single LSTM layer. Gate blocks along the last axis are
/// ordered input, forget, cell candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[in, 4H]`
    pub input: Var,
    /// `[H, 4H]`
    pub recurrent: Var,
    /// `[4H]`
    pub bias: Var,
}

/// One LSTM step over a batch: returns `(h', c')`. The output equals `h'`.
pub fn lstm_cell<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    (h, c): (Var, Var),
    w: &LstmWeights,
) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[g.shape(h).len() - 1];
    if g.shape(h) != g.shape(c) || g.shape(w.recurrent) != [hidden, 4 * hidden] {
        return Err(Error::shape(
            "lstm_cell",
            format!(
                "state {:?}/{:?} vs recurrent weights {:?}",
                g.shape(h),
                g.shape(c),
                g.shape(w.recurrent)
            ),
        ));
    }
    let xi = g.matmul(x, w.input)?;
    let hh = g.matmul(h, w.recurrent)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add(pre, w.bias)?;
    let gate = |g: &mut Graph<S>, k: usize| g.narrow(pre, 1, k * hidden, hidden);
    let (i, f, cand, o) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cand = g.tanh(cand)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Tensor of independent standard normal draws.
pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        S::lit(v)
    })
}

/// `mean + sigma * eps` with `eps ~ N(0, 1)` drawn from `rng` and held
/// constant, so gradients reach `mean` and `sigma` only.
pub fn reparam_sample<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    mean: Var,
    sigma: Var,
    rng: &mut R,
) -> Result<Var> {
    let eps = standard_normal(g.shape(mean).to_vec(), rng);
    reparam_with_noise(g, mean, sigma, eps)
}

/// Reparameterized sample with caller-provided noise.
pub fn reparam_with_noise<S: Scalar>(
    g: &mut Graph<S>,
    mean: Var,
    sigma: Var,
    eps: Tensor<S>,
) -> Result<Var> {
    let e = g.constant(eps);
    let scaled = g.mul(sigma, e)?;
    g.add(mean, scaled)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_lstm_gives_zero_state() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.0));
        let h = g.constant(Tensor::zeros(vec![2, 4]));
        let c = g.constant(Tensor::zeros(vec![2, 4]));
        let w = LstmWeights {
            input: g.constant(Tensor::zeros(vec![3, 16])),
            recurrent: g.constant(Tensor::zeros(vec![4, 16])),
            bias: g.constant(Tensor::zeros(vec![16])),
        };
        let (h1, c1) = lstm_cell(&mut g, x, (h, c), &w).unwrap();
        assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(h1), &[2, 4]);
        let (h2, c2) = lstm_cell(&mut g, x, (h1, c1), &w).unwrap();
        assert_eq!(g.shape(h2), g.shape(c2));
    }

    #[test]
    fn lstm_rejects_bad_state() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        let h = g.constant(Tensor::zeros(vec![1, 4]));
        let c = g.constant(Tensor::zeros(vec![1, 5]));
        let w = LstmWeights {
            input: g.constant(Tensor::zeros(vec![3, 16])),
            recurrent: g.constant(Tensor::zeros(vec![4, 16])),
            bias: g.constant(Tensor::zeros(vec![16])),
        };
        assert!(lstm_cell(&mut g, x, (h, c), &w).is_err());
    }

    #[test]
    fn zero_sigma_returns_mean() {
        let mut g = Graph::<f32>::new();
        let m = g.constant(Tensor::from_fn(vec![4], |i| i as f32 * 0.3));
        let s = g.constant(Tensor::zeros(vec![4]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = reparam_sample(&mut g, m, s, &mut rng).unwrap();
        assert_eq!(g.value(z).data(), g.value(m).data());
    }

    #[test]
    fn sample_mean_within_standard_error() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::full(vec![n], 1.5));
        let s = g.constant(Tensor::full(vec![n], 2.0));
        let z = reparam_sample(&mut g, m, s, &mut rng).unwrap();
        let mean = g.value(z).sum() / n as f64;
        assert!((mean - 1.5).abs() < 3.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            standard_normal::<f32, _>(vec![16], &mut rng)
        };
        assert_eq!(draw(), draw());
    }
}
