//! Slot decoder and the per-pixel Gaussian mixture likelihood.
//!
//! Every slot latent is decoded by the same network into per-pixel means and
//! a mask logit. Masks are the softmax of the logits across slots, and each
//! pixel is a mixture over slots whose components share the fixed scale
//! `sigma` and treat the color channels as independent.

use rand::Rng;

use crate::autodiff::params::{conv_kernel, Bindings};
use crate::autodiff::{nn, ops, Graph, Padding, ParamStore, Tensor, Var};
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-slot decoder outputs: means `[K, C, H, W]`, mask logits `[K, 1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct SlotDecode {
    pub means: Var,
    pub logits: Var,
}

/// Mixture terms for one image.
#[derive(Clone, Copy, Debug)]
pub struct Mixture {
    /// Softmax of the logits across slots, `[K, 1, H, W]`.
    pub masks: Var,
    pub log_masks: Var,
    /// Channel-summed `log N(x; mu_k, sigma^2)` per slot, `[K, 1, H, W]`.
    pub slot_logpdf: Var,
    /// `log p(x_i | z)` per pixel, `[1, 1, H, W]`.
    pub pixel_loglik: Var,
    /// Sum of `pixel_loglik`.
    pub total_loglik: Var,
}

fn conv_name(i: usize) -> (String, String) {
    (format!("dec.conv{i}.w"), format!("dec.conv{i}.b"))
}

/// Adds decoder weights to `store`.
pub fn init_decoder<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    cfg: &DecoderConfig,
    rng: &mut R,
) {
    let k = cfg.kernel;
    let mut prev = cfg.latent_dim + 2;
    for (i, &width) in cfg.hidden.iter().enumerate() {
        let (w, b) = conv_name(i);
        store.insert(w, conv_kernel([width, prev, k, k], rng));
        store.insert(b, Tensor::zeros(vec![width]));
        prev = width;
    }
    store.insert("dec.out.w", conv_kernel([cfg.channels + 1, prev, k, k], rng));
    store.insert("dec.out.b", Tensor::zeros(vec![cfg.channels + 1]));
}

/// Decodes a batch of slot latents `z: [K, M]`.
pub fn decode<S: Scalar>(
    g: &mut Graph<S>,
    params: &Bindings,
    cfg: &DecoderConfig,
    z: Var,
) -> Result<SlotDecode> {
    if g.shape(z).len() != 2 || g.shape(z)[1] != cfg.latent_dim {
        return Err(Error::shape(
            "decode",
            format!("latents {:?}, expected [K, {}]", g.shape(z), cfg.latent_dim),
        ));
    }
    let (w0, b0) = conv_name(0);
    let mut h = g.broadcast_conv2d(
        z,
        params.get(&w0)?,
        Some(params.get(&b0)?),
        cfg.height,
        cfg.width,
    )?;
    h = g.elu(h)?;
    for i in 1..cfg.hidden.len() {
        let (w, b) = conv_name(i);
        h = g.conv2d(h, params.get(&w)?, Some(params.get(&b)?), 1, Padding::Same)?;
        h = g.elu(h)?;
    }
    let out = g.conv2d(
        h,
        params.get("dec.out.w")?,
        Some(params.get("dec.out.b")?),
        1,
        Padding::Same,
    )?;
    let means = g.narrow(out, 1, 0, cfg.channels)?;
    let logits = g.narrow(out, 1, cfg.channels, 1)?;
    Ok(SlotDecode { means, logits })
}

/// Mixture likelihood of image `x: [C, H, W]` under decoded slots.
pub fn mixture<S: Scalar>(g: &mut Graph<S>, x: Var, dec: &SlotDecode, sigma: S) -> Result<Mixture> {
    let masks = g.softmax(dec.logits, 0)?;
    let log_masks = g.log_softmax(dec.logits, 0)?;
    let lp = g.gaussian_logpdf(x, dec.means, sigma)?;
    let slot_logpdf = g.sum_axis(lp, 1)?;
    let joint = g.add(log_masks, slot_logpdf)?;
    let pixel_loglik = g.logsumexp(joint, 0)?;
    let total_loglik = g.sum_all(pixel_loglik)?;
    Ok(Mixture {
        masks,
        log_masks,
        slot_logpdf,
        pixel_loglik,
        total_loglik,
    })
}

/// Softmax of mask logits `[K, 1, H, W]` across slots.
pub fn normalize_masks<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    ops::softmax(logits, 0)
}

/// Channel-summed Gaussian log-density of `x: [C, H, W]` under each slot's
/// means `[K, C, H, W]`, returned as `[K, 1, H, W]`.
pub fn slot_log_density<S: Scalar>(x: &Tensor<S>, means: &Tensor<S>, sigma: S) -> Result<Tensor<S>> {
    if !(sigma > S::zero()) {
        return Err(Error::Domain {
            op: "slot_log_density",
            detail: format!("sigma must be positive, got {sigma}"),
        });
    }
    let ms = means.shape();
    if ms.len() != 4 || x.shape() != &ms[1..] {
        return Err(Error::shape(
            "slot_log_density",
            format!("image {:?} vs means {ms:?}", x.shape()),
        ));
    }
    let (k, c, p) = (ms[0], ms[1], ms[2] * ms[3]);
    let mut out = vec![S::zero(); k * p];
    for s in 0..k {
        for ch in 0..c {
            let mu = &means.data()[(s * c + ch) * p..(s * c + ch + 1) * p];
            let xs = &x.data()[ch * p..(ch + 1) * p];
            for ((o, &m), &v) in out[s * p..(s + 1) * p].iter_mut().zip(mu).zip(xs) {
                *o += ops::gaussian_logpdf(v, m, sigma);
            }
        }
    }
    Tensor::new(vec![k, 1, ms[2], ms[3]], out)
}

/// Per-pixel log-likelihood `[1, H, W]` and its total for `x: [C, H, W]`,
/// means `[K, C, H, W]` and normalized masks `[K, 1, H, W]`.
pub fn mixture_loglik<S: Scalar>(
    x: &Tensor<S>,
    means: &Tensor<S>,
    masks: &Tensor<S>,
    sigma: S,
) -> Result<(Tensor<S>, S)> {
    let ld = slot_log_density(x, means, sigma)?;
    if masks.shape() != ld.shape() {
        return Err(Error::shape(
            "mixture_loglik",
            format!("masks {:?}, expected {:?}", masks.shape(), ld.shape()),
        ));
    }
    let joint = Tensor::new(
        ld.shape().to_vec(),
        ld.data()
            .iter()
            .zip(masks.data())
            .map(|(&l, &m)| l + m.ln())
            .collect(),
    )?;
    let pix = ops::logsumexp(&joint, 0)?;
    let total = pix.sum();
    let (h, w) = (ld.shape()[2], ld.shape()[3]);
    Ok((pix.reshape(vec![1, h, w])?, total))
}

/// Mask-weighted mean image `sum_k m_k mu_k`, `[C, H, W]`.
pub fn reconstruct<S: Scalar>(means: &Tensor<S>, masks: &Tensor<S>) -> Result<Tensor<S>> {
    let ms = means.shape();
    if ms.len() != 4 || masks.shape() != [ms[0], 1, ms[2], ms[3]] {
        return Err(Error::shape(
            "reconstruct",
            format!("means {ms:?} vs masks {:?}", masks.shape()),
        ));
    }
    let (k, c, p) = (ms[0], ms[1], ms[2] * ms[3]);
    let mut out = vec![S::zero(); c * p];
    for s in 0..k {
        let m = &masks.data()[s * p..(s + 1) * p];
        for ch in 0..c {
            let mu = &means.data()[(s * c + ch) * p..(s * c + ch + 1) * p];
            for ((o, &a), &b) in out[ch * p..(ch + 1) * p].iter_mut().zip(m).zip(mu) {
                *o += a * b;
            }
        }
    }
    Tensor::new(vec![c, ms[2], ms[3]], out)
}

/// Decoded values for a batch of latents `[K, M]`: `(means, logits)`.
pub fn decode_values<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
    z: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let zv = g.constant(z.clone());
    let d = decode(&mut g, &b, cfg, zv)?;
    Ok((g.value(d.means).clone(), g.value(d.logits).clone()))
}

/// Decodes one latent `[M]` into means `[C, H, W]` and logits `[1, H, W]`.
pub fn decode_slot<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
    z: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let m = z.len();
    let (means, logits) = decode_values(params, cfg, &z.clone().reshape(vec![1, m])?)?;
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    Ok((means.reshape(vec![c, h, w])?, logits.reshape(vec![1, h, w])?))
}

/// Samples `K` latents from the standard normal prior and decodes them.
/// Returns the mixture-mean image `[C, H, W]` and masks `[K, 1, H, W]`.
pub fn generate_from_prior<S: Scalar, R: Rng + ?Sized>(
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
    slots: usize,
    rng: &mut R,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let z = nn::standard_normal(vec![slots, cfg.latent_dim], rng);
    generate_from_latents(params, cfg, &z)
}

/// Decodes given latents `[K, M]` into an image and masks.
pub fn generate_from_latents<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
    z: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (means, logits) = decode_values(params, cfg, z)?;
    let masks = normalize_masks(&logits)?;
    Ok((reconstruct(&means, &masks)?, masks))
}
