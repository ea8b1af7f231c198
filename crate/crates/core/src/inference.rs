//! Iterative amortized inference.
//!
//! Each iteration samples slot latents from the current posterior, decodes
//! them, scores the image under the mixture, and hands a refinement network
//! the decoded state plus gradient information about the current loss. The
//! network predicts an additive update to the posterior parameters of every
//! slot. Slots share all weights and only interact through the inputs.

use std::fmt;

use rand::Rng;

use crate::autodiff::conv::coordinate_planes;
use crate::autodiff::nn::{self, LstmWeights};
use crate::autodiff::params::{conv_kernel, dense, Bindings};
use crate::autodiff::{ops, Graph, Padding, ParamStore, Tensor, Var};
use crate::config::{ModelConfig, RefineConfig};
use crate::decoder::{self, Mixture, SlotDecode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound added to the softplus posterior scale.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Leave-one-out log-likelihood reported when no other slot remains.
pub const LOO_FLOOR: f64 = -1e3;

/// One row of the refinement network's input table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AuxInput {
    Image,
    Means,
    Mask,
    MaskLogits,
    MaskPosterior,
    GradMeans,
    GradMask,
    Likelihood,
    LooLikelihood,
    Coords,
    GradLambda,
    Lambda,
}

impl AuxInput {
    pub const ALL: [AuxInput; 12] = [
        AuxInput::Image,
        AuxInput::Means,
        AuxInput::Mask,
        AuxInput::MaskLogits,
        AuxInput::MaskPosterior,
        AuxInput::GradMeans,
        AuxInput::GradMask,
        AuxInput::Likelihood,
        AuxInput::LooLikelihood,
        AuxInput::Coords,
        AuxInput::GradLambda,
        AuxInput::Lambda,
    ];

    /// Command-line switch that removes this input.
    pub fn flag(self) -> &'static str {
        match self {
            AuxInput::Image => "no-image",
            AuxInput::Means => "no-means",
            AuxInput::Mask => "no-mask",
            AuxInput::MaskLogits => "no-mask-logits",
            AuxInput::MaskPosterior => "no-mask-posterior",
            AuxInput::GradMeans => "no-grad-means",
            AuxInput::GradMask => "no-grad-mask",
            AuxInput::Likelihood => "no-likelihood",
            AuxInput::LooLikelihood => "no-loo-likelihood",
            AuxInput::Coords => "no-coords",
            AuxInput::GradLambda => "no-grad-lambda",
            AuxInput::Lambda => "no-lambda",
        }
    }

    pub fn from_flag(flag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.flag() == flag)
    }

    fn bit(self) -> u16 {
        1 << Self::ALL.iter().position(|&i| i == self).unwrap_or(0)
    }
}

/// Set of refinement inputs replaced by zeros of the same shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    removed: u16,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(self, input: AuxInput) -> Self {
        Self {
            removed: self.removed | input.bit(),
        }
    }

    pub fn removes(self, input: AuxInput) -> bool {
        self.removed & input.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.removed == 0
    }

    pub fn removed(self) -> impl Iterator<Item = AuxInput> {
        AuxInput::ALL.into_iter().filter(move |&i| self.removes(i))
    }

    /// Parses a comma-separated flag list; an empty string or `none` means no
    /// ablation.
    pub fn parse_list(text: &str) -> std::result::Result<Self, String> {
        let mut out = Self::none();
        for item in text.split(',').map(str::trim) {
            if item.is_empty() || item == "none" {
                continue;
            }
            let input = AuxInput::from_flag(item).ok_or_else(|| {
                let known: Vec<_> = AuxInput::ALL.iter().map(|i| i.flag()).collect();
                format!("unknown ablation flag {item:?} (known: {})", known.join(", "))
            })?;
            out = out.with(input);
        }
        Ok(out)
    }

    /// Inverse of [`Ablation::parse_list`]; `none` when nothing is removed.
    pub fn to_list(self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.removed().map(AuxInput::flag).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_list())
    }
}

/// How slot latents are drawn from the posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseMode {
    /// Independent noise per slot and dimension.
    #[default]
    Independent,
    /// One noise vector reused by every slot.
    Shared,
    /// `z` equals the posterior mean.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub slots: usize,
    pub iterations: usize,
    pub noise: NoiseMode,
    pub ablation: Ablation,
    /// Apply the refinement after the last iteration as well. Training skips
    /// it because its output does not enter the loss.
    pub final_refine: bool,
    /// Decode the posterior mean after every refinement.
    pub mean_decodes: bool,
}

impl InferenceOptions {
    pub fn new(slots: usize, iterations: usize) -> Self {
        Self {
            slots,
            iterations,
            noise: NoiseMode::Independent,
            ablation: Ablation::none(),
            final_refine: true,
            mean_decodes: true,
        }
    }

    pub fn for_training(slots: usize, iterations: usize, ablation: Ablation) -> Self {
        Self {
            ablation,
            final_refine: false,
            mean_decodes: false,
            ..Self::new(slots, iterations)
        }
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }
}

/// Posterior parameters in the graph: means and unconstrained scales, `[K, M]`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorParams {
    pub mean: Var,
    pub raw_scale: Var,
}

/// LSTM state of the refinement network, `[K, H]` each.
#[derive(Clone, Copy, Debug)]
pub struct RefinementState {
    pub h: Var,
    pub c: Var,
}

/// Gradient-derived refinement inputs. They enter the graph as constants, so
/// no gradient flows through them.
#[derive(Clone, Debug, PartialEq)]
pub struct StoppedInputs<S> {
    /// Layer-normalized `dL/dmu`, `[K, C, H, W]`.
    pub grad_means: Tensor<S>,
    /// Layer-normalized `dL/dm`, `[K, 1, H, W]`.
    pub grad_mask: Tensor<S>,
    /// Layer-normalized pixel log-likelihood, `[1, 1, H, W]`.
    pub likelihood: Tensor<S>,
    /// Layer-normalized leave-one-out log-likelihood, `[K, 1, H, W]`.
    pub loo_likelihood: Tensor<S>,
    /// Layer-normalized gradient w.r.t. `(mean, raw_scale)`, `[K, 2M]`.
    pub grad_lambda: Tensor<S>,
}

/// Graph handles for one iteration.
#[derive(Clone, Copy, Debug)]
pub struct IterationVars {
    pub posterior: PosteriorParams,
    pub sigma: Var,
    pub z: Var,
    pub decode: SlotDecode,
    pub mixture: Mixture,
    pub kl: Var,
    pub nll: Var,
    /// `kl + nll`
    pub loss: Var,
}

/// Result of [`unroll`].
#[derive(Clone, Debug)]
pub struct Unrolled<S> {
    pub iterations: Vec<IterationVars>,
    /// Gradient inputs used by each refinement (one per refinement applied).
    pub stopped: Vec<StoppedInputs<S>>,
    /// Posterior after the last refinement, or the last iteration's posterior
    /// when the final refinement is skipped.
    pub last: PosteriorParams,
    /// Means and masks decoded from the posterior mean after each refinement.
    pub mean_decodes: Vec<(Var, Var)>,
}

impl<S> Unrolled<S> {
    pub fn losses(&self) -> Vec<Var> {
        self.iterations.iter().map(|it| it.loss).collect()
    }
}

/// Means `[K, C, H, W]` and masks `[K, 1, H, W]` of one decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<S> {
    pub means: Tensor<S>,
    pub masks: Tensor<S>,
}

impl<S: Scalar> Decoded<S> {
    pub fn reconstruction(&self) -> Result<Tensor<S>> {
        decoder::reconstruct(&self.means, &self.masks)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord<S> {
    pub mean: Tensor<S>,
    pub raw_scale: Tensor<S>,
    pub z: Tensor<S>,
    pub decoded: Decoded<S>,
    pub kl: f64,
    pub nll: f64,
}

impl<S> IterationRecord<S> {
    pub fn loss(&self) -> f64 {
        self.kl + self.nll
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace<S> {
    /// One record per iteration, in order.
    pub iterations: Vec<IterationRecord<S>>,
    pub final_mean: Tensor<S>,
    pub final_raw_scale: Tensor<S>,
    /// Decode of the posterior mean after refinement `t` (index `t - 1`).
    pub mean_decodes: Vec<Decoded<S>>,
    /// Decode of a fresh sample from the final posterior.
    pub final_sample: Decoded<S>,
}

impl<S: Scalar> InferenceTrace<S> {
    pub fn losses(&self) -> Vec<f64> {
        self.iterations.iter().map(IterationRecord::loss).collect()
    }

    /// Posterior-mean decode after the last refinement.
    pub fn final_decode(&self) -> &Decoded<S> {
        self.mean_decodes.last().unwrap_or(&self.final_sample)
    }

    pub fn final_reconstruction(&self) -> Result<Tensor<S>> {
        self.final_decode().reconstruction()
    }
}

/// Adds the trainable initial posterior `init.lambda: [2, M]` (row 0 means,
/// row 1 raw scales) with `softplus(raw) = 1`.
pub fn init_lambda<S: Scalar>(store: &mut ParamStore<S>, latent_dim: usize) {
    let raw = (std::f64::consts::E - 1.0).ln();
    store.insert(
        "init.lambda",
        Tensor::from_fn(vec![2, latent_dim], |i| {
            if i < latent_dim {
                S::zero()
            } else {
                S::lit(raw)
            }
        }),
    );
}

fn ref_conv_name(i: usize) -> (String, String) {
    (format!("ref.conv{i}.w"), format!("ref.conv{i}.b"))
}

/// Adds refinement network weights to `store`.
pub fn init_refiner<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    cfg: &RefineConfig,
    input_channels: usize,
    latent_dim: usize,
    rng: &mut R,
) {
    let k = cfg.kernel;
    let mut prev = input_channels;
    for (i, &width) in cfg.channels.iter().enumerate() {
        let (w, b) = ref_conv_name(i);
        store.insert(w, conv_kernel([width, prev, k, k], rng));
        store.insert(b, Tensor::zeros(vec![width]));
        prev = width;
    }
    store.insert("ref.mlp.w", dense(prev, cfg.mlp, rng));
    store.insert("ref.mlp.b", Tensor::zeros(vec![cfg.mlp]));
    let mut head_in = cfg.mlp + 4 * latent_dim;
    if cfg.lstm_hidden > 0 {
        let h = cfg.lstm_hidden;
        store.insert("ref.lstm.wx", dense(head_in, 4 * h, rng));
        store.insert("ref.lstm.wh", dense(h, 4 * h, rng));
        store.insert("ref.lstm.b", Tensor::zeros(vec![4 * h]));
        head_in = h;
    }
    store.insert("ref.head.w", dense(head_in, 2 * latent_dim, rng));
    store.insert("ref.head.b", Tensor::zeros(vec![2 * latent_dim]));
}

/// Fresh parameters for the decoder, the refinement network and the initial
/// posterior.
pub fn init_params<S: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    decoder::init_decoder(&mut store, &cfg.decoder, rng);
    init_refiner(&mut store, &cfg.refine, cfg.input_channels(), cfg.latent_dim(), rng);
    init_lambda(&mut store, cfg.latent_dim());
    Ok(store)
}

/// Replicates the shared initial posterior across `slots`.
pub fn init_posterior<S: Scalar>(g: &mut Graph<S>, params: &Bindings, slots: usize) -> Result<PosteriorParams> {
    let lambda = params.get("init.lambda")?;
    let shape = g.shape(lambda).to_vec();
    if shape.len() != 2 || shape[0] != 2 {
        return Err(Error::shape("init_posterior", format!("init.lambda {shape:?}, expected [2, M]")));
    }
    let m = shape[1];
    let mean = g.narrow(lambda, 0, 0, 1)?;
    let mean = g.broadcast_to(mean, &[slots, m])?;
    let raw = g.narrow(lambda, 0, 1, 1)?;
    let raw_scale = g.broadcast_to(raw, &[slots, m])?;
    Ok(PosteriorParams { mean, raw_scale })
}

/// `softplus(raw_scale) + SIGMA_FLOOR`
pub fn posterior_sigma<S: Scalar>(g: &mut Graph<S>, lambda: &PosteriorParams) -> Result<Var> {
    let sp = g.softplus(lambda.raw_scale)?;
    g.add_scalar(sp, S::lit(SIGMA_FLOOR))
}

/// Reparameterized slot latents `[K, M]`.
pub fn sample_slots<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    lambda: &PosteriorParams,
    sigma: Var,
    noise: NoiseMode,
    rng: &mut R,
) -> Result<Var> {
    let shape = g.shape(lambda.mean).to_vec();
    let eps = match noise {
        NoiseMode::Off => return Ok(lambda.mean),
        NoiseMode::Independent => nn::standard_normal(shape, rng),
        NoiseMode::Shared => {
            let row: Tensor<S> = nn::standard_normal(vec![1, shape[1]], rng);
            crate::autodiff::tensor::broadcast_to(&row, &shape)?
        }
    };
    nn::reparam_with_noise(g, lambda.mean, sigma, eps)
}

/// KL divergence of the diagonal Gaussian posterior from `N(0, I)`, summed
/// over slots and dimensions.
pub fn kl_to_prior<S: Scalar>(g: &mut Graph<S>, mean: Var, sigma: Var) -> Result<Var> {
    let m2 = g.square(mean)?;
    let s2 = g.square(sigma)?;
    let ls = g.log(sigma)?;
    let ls2 = g.scale(ls, S::lit(2.0))?;
    let t = g.add(m2, s2)?;
    let t = g.sub(t, ls2)?;
    let t = g.add_scalar(t, -S::one())?;
    let s = g.sum_all(t)?;
    g.scale(s, S::lit(0.5))
}

/// Leave-one-out log-likelihoods `[K, 1, H, W]` from log masks and slot
/// log-densities (both `[K, 1, H, W]`): for slot `k`, the mixture over the
/// other slots with their masks renormalized to sum to one.
pub fn leave_one_out_from_logs<S: Scalar>(log_masks: &Tensor<S>, slot_logpdf: &Tensor<S>) -> Result<Tensor<S>> {
    if log_masks.shape() != slot_logpdf.shape() || log_masks.rank() != 4 {
        return Err(Error::shape(
            "leave_one_out",
            format!("{:?} vs {:?}", log_masks.shape(), slot_logpdf.shape()),
        ));
    }
    let k = log_masks.shape()[0];
    let p = log_masks.len() / k.max(1);
    let mut out = vec![S::lit(LOO_FLOOR); k * p];
    if k < 2 {
        return Tensor::new(log_masks.shape().to_vec(), out);
    }
    let (lm, ld) = (log_masks.data(), slot_logpdf.data());
    let mut num = Vec::with_capacity(k);
    let mut den = Vec::with_capacity(k);
    let mut buf = Vec::with_capacity(k);
    for i in 0..p {
        for s in 0..k {
            num.clear();
            den.clear();
            for j in (0..k).filter(|&j| j != s) {
                num.push(lm[j * p + i] + ld[j * p + i]);
                den.push(lm[j * p + i]);
            }
            let d = ops::lse_slice(&den, 1, den.len(), &mut buf);
            if d > S::neg_infinity() {
                out[s * p + i] = ops::lse_slice(&num, 1, num.len(), &mut buf) - d;
            }
        }
    }
    Tensor::new(log_masks.shape().to_vec(), out)
}

/// Pixelwise leave-one-out log-likelihood `[1, H, W]` of slot `k` for image
/// `x: [C, H, W]`, means `[K, C, H, W]` and masks `[K, 1, H, W]`.
pub fn leave_one_out_loglik<S: Scalar>(
    x: &Tensor<S>,
    means: &Tensor<S>,
    masks: &Tensor<S>,
    sigma: S,
    k: usize,
) -> Result<Tensor<S>> {
    let ld = decoder::slot_log_density(x, means, sigma)?;
    if masks.shape() != ld.shape() || k >= ld.shape()[0] {
        return Err(Error::shape(
            "leave_one_out_loglik",
            format!("masks {:?}, slot {k}, expected {:?}", masks.shape(), ld.shape()),
        ));
    }
    let lm = masks.map(|m| m.ln());
    let all = leave_one_out_from_logs(&lm, &ld)?;
    let (h, w) = (ld.shape()[2], ld.shape()[3]);
    all.rows(k, 1)?.reshape(vec![1, h, w])
}

/// Gradient-derived inputs for the loss of one iteration.
pub fn stopped_inputs<S: Scalar>(g: &Graph<S>, it: &IterationVars) -> Result<StoppedInputs<S>> {
    let grads = g.grad_wrt(it.loss, &[it.decode.means, it.posterior.mean, it.posterior.raw_scale])?;
    let grad_means = ops::layer_norm(&grads[0], 1)?;
    // dL/dm_k = -N_k / sum_j m_j N_j, with the masks as free variables
    let ld = g.value(it.mixture.slot_logpdf);
    let pix = g.value(it.mixture.pixel_loglik);
    let p = pix.len();
    let raw_mask = Tensor::new(
        ld.shape().to_vec(),
        ld.data()
            .iter()
            .enumerate()
            .map(|(i, &l)| -(l - pix.data()[i % p]).exp())
            .collect(),
    )?;
    let grad_mask = ops::layer_norm(&raw_mask, 1)?;
    let likelihood = ops::layer_norm(pix, 1)?;
    let loo = leave_one_out_from_logs(g.value(it.mixture.log_masks), ld)?;
    let loo_likelihood = ops::layer_norm(&loo, 1)?;
    let grad_lambda = ops::layer_norm(&ops::concat(&[&grads[1], &grads[2]], 1)?, 1)?;
    Ok(StoppedInputs {
        grad_means,
        grad_mask,
        likelihood,
        loo_likelihood,
        grad_lambda,
    })
}

/// Refinement network inputs: image-like `[K, 3C + 8, H, W]` and vector-like
/// `[K, 4M]`. Removed inputs are replaced by zeros.
pub fn assemble_inputs<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    it: &IterationVars,
    stopped: &StoppedInputs<S>,
    ablation: Ablation,
) -> Result<(Var, Var)> {
    let means_shape = g.shape(it.decode.means).to_vec();
    let (k, c, h, w) = (means_shape[0], means_shape[1], means_shape[2], means_shape[3]);
    let one = [k, 1, h, w];
    let keep = |input: AuxInput| !ablation.removes(input);

    let mut parts = Vec::with_capacity(10);
    let var_or_zeros = |g: &mut Graph<S>, input: AuxInput, v: Var| -> Var {
        if keep(input) {
            v
        } else {
            g.constant(Tensor::zeros(g.shape(v).to_vec()))
        }
    };
    let image = g.broadcast_to(x, &[k, c, h, w])?;
    parts.push(var_or_zeros(g, AuxInput::Image, image));
    parts.push(var_or_zeros(g, AuxInput::Means, it.decode.means));
    parts.push(var_or_zeros(g, AuxInput::Mask, it.mixture.masks));
    parts.push(var_or_zeros(g, AuxInput::MaskLogits, it.decode.logits));
    let posterior = if keep(AuxInput::MaskPosterior) {
        g.softmax(it.mixture.slot_logpdf, 0)?
    } else {
        g.constant(Tensor::zeros(one.to_vec()))
    };
    parts.push(posterior);

    let constant = |g: &mut Graph<S>, input: AuxInput, t: &Tensor<S>, shape: &[usize]| -> Result<Var> {
        Ok(if keep(input) {
            if t.shape() == shape {
                g.constant(t.clone())
            } else {
                g.constant(crate::autodiff::tensor::broadcast_to(t, shape)?)
            }
        } else {
            g.constant(Tensor::zeros(shape.to_vec()))
        })
    };
    parts.push(constant(g, AuxInput::GradMeans, &stopped.grad_means, &[k, c, h, w])?);
    parts.push(constant(g, AuxInput::GradMask, &stopped.grad_mask, &one)?);
    parts.push(constant(g, AuxInput::Likelihood, &stopped.likelihood, &one)?);
    parts.push(constant(g, AuxInput::LooLikelihood, &stopped.loo_likelihood, &one)?);
    let coords = Tensor::new(vec![1, 2, h, w], coordinate_planes(h, w))?;
    parts.push(constant(g, AuxInput::Coords, &coords, &[k, 2, h, w])?);
    let image_like = g.concat(&parts, 1)?;

    let lambda = g.concat(&[it.posterior.mean, it.posterior.raw_scale], 1)?;
    let lambda = var_or_zeros_plain(g, keep(AuxInput::Lambda), lambda);
    let m2 = g.shape(lambda)[1];
    let grad_lambda = constant(g, AuxInput::GradLambda, &stopped.grad_lambda, &[k, m2])?;
    let vector_like = g.concat(&[lambda, grad_lambda], 1)?;
    Ok((image_like, vector_like))
}

fn var_or_zeros_plain<S: Scalar>(g: &mut Graph<S>, keep: bool, v: Var) -> Var {
    if keep {
        v
    } else {
        g.constant(Tensor::zeros(g.shape(v).to_vec()))
    }
}

/// Zero LSTM state for `slots`, or `None` without an LSTM.
pub fn initial_state<S: Scalar>(g: &mut Graph<S>, cfg: &RefineConfig, slots: usize) -> Option<RefinementState> {
    (cfg.lstm_hidden > 0).then(|| RefinementState {
        h: g.constant(Tensor::zeros(vec![slots, cfg.lstm_hidden])),
        c: g.constant(Tensor::zeros(vec![slots, cfg.lstm_hidden])),
    })
}

/// Applies the refinement network to all slots at once and returns the
/// updated posterior and state.
pub fn refine<S: Scalar>(
    g: &mut Graph<S>,
    params: &Bindings,
    cfg: &RefineConfig,
    lambda: &PosteriorParams,
    (image_like, vector_like): (Var, Var),
    state: Option<RefinementState>,
) -> Result<(PosteriorParams, Option<RefinementState>)> {
    let mut h = image_like;
    for (i, &stride) in cfg.strides.iter().enumerate().take(cfg.channels.len()) {
        let (w, b) = ref_conv_name(i);
        h = g.conv2d(h, params.get(&w)?, Some(params.get(&b)?), stride, Padding::Same)?;
        h = g.elu(h)?;
    }
    let shape = g.shape(h).to_vec();
    let (k, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = g.reshape(h, vec![k, c, hw])?;
    let pooled = g.sum_axis(flat, 2)?;
    let pooled = g.reshape(pooled, vec![k, c])?;
    let pooled = g.scale(pooled, S::one() / S::lit(hw as f64))?;
    let hidden = nn::linear(g, pooled, params.get("ref.mlp.w")?, Some(params.get("ref.mlp.b")?))?;
    let hidden = g.elu(hidden)?;
    let mut features = g.concat(&[hidden, vector_like], 1)?;
    let next_state = match state {
        Some(st) => {
            let w = LstmWeights {
                input: params.get("ref.lstm.wx")?,
                recurrent: params.get("ref.lstm.wh")?,
                bias: params.get("ref.lstm.b")?,
            };
            let (h2, c2) = nn::lstm_cell(g, features, (st.h, st.c), &w)?;
            features = h2;
            Some(RefinementState { h: h2, c: c2 })
        }
        None => None,
    };
    let delta = nn::linear(g, features, params.get("ref.head.w")?, Some(params.get("ref.head.b")?))?;
    let m = g.shape(lambda.mean)[1];
    if g.shape(delta)[1] != 2 * m {
        return Err(Error::shape(
            "refine",
            format!("head output {:?}, expected [K, {}]", g.shape(delta), 2 * m),
        ));
    }
    let dm = g.narrow(delta, 1, 0, m)?;
    let dr = g.narrow(delta, 1, m, m)?;
    let mean = g.add(lambda.mean, dm)?;
    let raw_scale = g.add(lambda.raw_scale, dr)?;
    Ok((PosteriorParams { mean, raw_scale }, next_state))
}

/// One sample, decode and loss evaluation.
pub fn iterate<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    params: &Bindings,
    cfg: &ModelConfig,
    x: Var,
    posterior: PosteriorParams,
    noise: NoiseMode,
    rng: &mut R,
) -> Result<IterationVars> {
    let sigma = posterior_sigma(g, &posterior)?;
    let z = sample_slots(g, &posterior, sigma, noise, rng)?;
    let decode = decoder::decode(g, params, &cfg.decoder, z)?;
    let mixture = decoder::mixture(g, x, &decode, S::lit(cfg.decoder.sigma))?;
    let kl = kl_to_prior(g, posterior.mean, sigma)?;
    let nll = g.neg(mixture.total_loglik)?;
    let loss = g.add(kl, nll)?;
    Ok(IterationVars {
        posterior,
        sigma,
        z,
        decode,
        mixture,
        kl,
        nll,
        loss,
    })
}

/// Builds the full unrolled inference graph for image `x: [C, H, W]`.
///
/// With `frozen`, the gradient inputs of refinement `t` are taken from
/// `frozen[t]` instead of being computed.
pub fn unroll<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    params: &Bindings,
    cfg: &ModelConfig,
    x: Var,
    opts: &InferenceOptions,
    rng: &mut R,
    frozen: Option<&[StoppedInputs<S>]>,
) -> Result<Unrolled<S>> {
    if opts.slots == 0 || opts.iterations == 0 {
        return Err(Error::Config(format!(
            "need at least one slot and one iteration, got K={} T={}",
            opts.slots, opts.iterations
        )));
    }
    let d = &cfg.decoder;
    if g.shape(x) != [d.channels, d.height, d.width] {
        return Err(Error::shape(
            "unroll",
            format!("image {:?}, expected [{}, {}, {}]", g.shape(x), d.channels, d.height, d.width),
        ));
    }
    let mut posterior = init_posterior(g, params, opts.slots)?;
    let mut state = initial_state(g, &cfg.refine, opts.slots);
    let mut out = Unrolled {
        iterations: Vec::with_capacity(opts.iterations),
        stopped: Vec::with_capacity(opts.iterations),
        last: posterior,
        mean_decodes: Vec::new(),
    };
    for t in 0..opts.iterations {
        let it = iterate(g, params, cfg, x, posterior, opts.noise, rng)?;
        out.iterations.push(it);
        if t + 1 == opts.iterations && !opts.final_refine {
            break;
        }
        let stopped = match frozen.and_then(|f| f.get(t)) {
            Some(s) => s.clone(),
            None => stopped_inputs(g, &it)?,
        };
        let inputs = assemble_inputs(g, x, &it, &stopped, opts.ablation)?;
        out.stopped.push(stopped);
        let (next, next_state) = refine(g, params, &cfg.refine, &posterior, inputs, state)?;
        posterior = next;
        state = next_state;
        if opts.mean_decodes {
            let dec = decoder::decode(g, params, &cfg.decoder, posterior.mean)?;
            let masks = g.softmax(dec.logits, 0)?;
            out.mean_decodes.push((dec.means, masks));
        }
    }
    out.last = posterior;
    Ok(out)
}

/// Runs inference on `x: [C, H, W]` with fixed weights and records every
/// iteration.
pub fn run_inference<S: Scalar, R: Rng + ?Sized>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    x: &Tensor<S>,
    opts: &InferenceOptions,
    rng: &mut R,
) -> Result<InferenceTrace<S>> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let opts = InferenceOptions {
        final_refine: true,
        mean_decodes: true,
        ..*opts
    };
    let un = unroll(&mut g, &b, cfg, xv, &opts, rng, None)?;
    let mut iterations = Vec::with_capacity(un.iterations.len());
    for (t, it) in un.iterations.iter().enumerate() {
        let kl = g.item(it.kl)?.to_f64_lossy();
        let nll = g.item(it.nll)?.to_f64_lossy();
        if !(kl + nll).is_finite() {
            return Err(Error::NonFinite(format!(
                "inference loss at iteration {} (kl {kl}, nll {nll})",
                t + 1
            )));
        }
        iterations.push(IterationRecord {
            mean: g.value(it.posterior.mean).clone(),
            raw_scale: g.value(it.posterior.raw_scale).clone(),
            z: g.value(it.z).clone(),
            decoded: Decoded {
                means: g.value(it.decode.means).clone(),
                masks: g.value(it.mixture.masks).clone(),
            },
            kl,
            nll,
        });
    }
    let mean_decodes = un
        .mean_decodes
        .iter()
        .map(|&(means, masks)| Decoded {
            means: g.value(means).clone(),
            masks: g.value(masks).clone(),
        })
        .collect();
    let sigma = posterior_sigma(&mut g, &un.last)?;
    let z = sample_slots(&mut g, &un.last, sigma, opts.noise, rng)?;
    let dec = decoder::decode(&mut g, &b, &cfg.decoder, z)?;
    let masks = g.softmax(dec.logits, 0)?;
    Ok(InferenceTrace {
        iterations,
        final_mean: g.value(un.last.mean).clone(),
        final_raw_scale: g.value(un.last.raw_scale).clone(),
        mean_decodes,
        final_sample: Decoded {
            means: g.value(dec.means).clone(),
            masks: g.value(masks).clone(),
        },
    })
}
