//! Segmentation quality, reconstruction and KL curves over iterations,
//! slot-object matching, factor probes, latent traversals, PCA projections
//! and multi-stability counts.

pub mod ari;
pub mod pca;
pub mod probe;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sceneslots_data::seed::mix;
use sceneslots_data::SceneRecord;

use crate::autodiff::{ops, ParamStore, Tensor};
use crate::config::{DecoderConfig, ModelConfig};
use crate::decoder;
use crate::error::{Error, Result};
use crate::inference::{run_inference, Ablation, Decoded, InferenceOptions, InferenceTrace, NoiseMode, SIGMA_FLOOR};
use crate::scalar::Scalar;

pub use ari::{argmax_labels, ari, canonicalize, foreground_ari, foreground_clusterings};
pub use pca::{pca_project, Projection};
pub use probe::{factor_probe, ProbeResult, ProbeSample};

/// Default number of held-out records scored by an evaluation.
pub const EVAL_RECORDS: usize = 320;

/// Record image as a `[C, H, W]` tensor with values in [0, 1].
pub fn image_tensor<S: Scalar>(record: &SceneRecord) -> Result<Tensor<S>> {
    let data = record
        .image_chw::<f32>()
        .into_iter()
        .map(|v| S::lit(f64::from(v)))
        .collect();
    Tensor::new(vec![record.channels, record.height, record.width], data)
}

/// Checks that a model configuration can score `record`.
pub fn check_record(cfg: &DecoderConfig, record: &SceneRecord) -> Result<()> {
    if (record.channels, record.height, record.width) != (cfg.channels, cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "record is {}x{}x{} (CxHxW) but the model expects {}x{}x{}",
            record.channels, record.height, record.width, cfg.channels, cfg.height, cfg.width
        )));
    }
    Ok(())
}

/// Mean squared error between two tensors of equal shape.
pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).to_f64_lossy().powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// Per-dimension KL of a diagonal Gaussian from `N(0, 1)`, given means and
/// raw scales of equal shape.
pub fn kl_terms<S: Scalar>(mean: &Tensor<S>, raw_scale: &Tensor<S>) -> Vec<f64> {
    mean.data()
        .iter()
        .zip(raw_scale.data())
        .map(|(&m, &r)| {
            let m = m.to_f64_lossy();
            let s = ops::softplus(r.to_f64_lossy()) + SIGMA_FLOOR;
            0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln())
        })
        .collect()
}

pub fn kl_value<S: Scalar>(mean: &Tensor<S>, raw_scale: &Tensor<S>) -> f64 {
    kl_terms(mean, raw_scale).iter().sum()
}

/// Latent dimensions of one slot ordered by decreasing KL.
pub fn rank_dims_by_kl<S: Scalar>(mean: &Tensor<S>, raw_scale: &Tensor<S>, slot: usize) -> Result<Vec<usize>> {
    let m = mean.shape().get(1).copied().unwrap_or(0);
    let row = |t: &Tensor<S>| t.rows(slot, 1);
    let kl = kl_terms(&row(mean)?, &row(raw_scale)?);
    let mut dims: Vec<usize> = (0..m).collect();
    dims.sort_by(|&a, &b| kl[b].total_cmp(&kl[a]).then(a.cmp(&b)));
    Ok(dims)
}

/// 25th, 50th and 75th percentiles with linear interpolation. NaN values
/// are ignored.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        Self {
            q25: percentile(&v, 0.25),
            median: percentile(&v, 0.5),
            q75: percentile(&v, 0.75),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub slots: usize,
    pub iterations: usize,
    pub seed: u64,
    pub noise: NoiseMode,
    pub ablation: Ablation,
}

impl EvalOptions {
    pub fn new(slots: usize, iterations: usize, seed: u64) -> Self {
        Self {
            slots,
            iterations,
            seed,
            noise: NoiseMode::Independent,
            ablation: Ablation::none(),
        }
    }

    pub fn inference(&self) -> InferenceOptions {
        InferenceOptions::new(self.slots, self.iterations)
            .with_noise(self.noise)
            .with_ablation(self.ablation)
    }

    /// Random stream used for record `index`.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.seed, index as u64))
    }
}

/// Metrics of one record after each refinement `t = 1..=T` (index `t - 1`),
/// all measured on the posterior-mean decode.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordCurves {
    pub index: usize,
    pub ari: Vec<f64>,
    pub mse: Vec<f64>,
    pub kl: Vec<f64>,
}

impl RecordCurves {
    pub fn final_ari(&self) -> f64 {
        self.ari.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_mse(&self) -> f64 {
        self.mse.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_kl(&self) -> f64 {
        self.kl.last().copied().unwrap_or(f64::NAN)
    }
}

/// Foreground ARI of `masks`; NaN for a record without foreground pixels.
pub fn record_ari<S: Scalar>(masks: &Tensor<S>, record: &SceneRecord) -> Result<f64> {
    let (p, t) = foreground_clusterings(masks, &record.labels())?;
    if p.is_empty() {
        return Ok(f64::NAN);
    }
    ari(&p, &t)
}

/// Per-iteration curves from an existing trace of `record`.
pub fn curves_from_trace<S: Scalar>(
    trace: &InferenceTrace<S>,
    record: &SceneRecord,
    image: &Tensor<S>,
    index: usize,
) -> Result<RecordCurves> {
    let t_max = trace.iterations.len();
    let mut out = RecordCurves {
        index,
        ari: Vec::with_capacity(t_max),
        mse: Vec::with_capacity(t_max),
        kl: Vec::with_capacity(t_max),
    };
    for (t, dec) in trace.mean_decodes.iter().enumerate() {
        out.ari.push(record_ari(&dec.masks, record)?);
        out.mse.push(mse(&dec.reconstruction()?, image)?);
        let kl = match trace.iterations.get(t + 1) {
            Some(next) => kl_value(&next.mean, &next.raw_scale),
            None => kl_value(&trace.final_mean, &trace.final_raw_scale),
        };
        out.kl.push(kl);
    }
    Ok(out)
}

/// Runs inference on one record and returns its curves.
pub fn evaluate_record<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    record: &SceneRecord,
    index: usize,
    opts: &EvalOptions,
) -> Result<RecordCurves> {
    check_record(&cfg.decoder, record)?;
    let image = image_tensor(record)?;
    let trace = run_inference(params, cfg, &image, &opts.inference(), &mut opts.rng(index))?;
    curves_from_trace(&trace, record, &image, index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub slots: usize,
    pub iterations: usize,
    pub records: Vec<RecordCurves>,
    /// Quartiles across records after each refinement.
    pub ari: Vec<Quartiles>,
    pub mse: Vec<Quartiles>,
    pub kl: Vec<Quartiles>,
}

impl EvalReport {
    pub fn from_records(slots: usize, iterations: usize, records: Vec<RecordCurves>) -> Self {
        let per_t = |f: fn(&RecordCurves) -> &Vec<f64>| -> Vec<Quartiles> {
            (0..iterations)
                .map(|t| {
                    let v: Vec<f64> = records.iter().filter_map(|r| f(r).get(t).copied()).collect();
                    Quartiles::of(&v)
                })
                .collect()
        };
        let ari = per_t(|r| &r.ari);
        let mse = per_t(|r| &r.mse);
        let kl = per_t(|r| &r.kl);
        Self {
            slots,
            iterations,
            records,
            ari,
            mse,
            kl,
        }
    }

    pub fn final_ari(&self) -> Quartiles {
        self.ari.last().copied().unwrap_or(Quartiles::of(&[]))
    }

    pub fn final_mse(&self) -> Quartiles {
        self.mse.last().copied().unwrap_or(Quartiles::of(&[]))
    }

    pub fn final_kl(&self) -> Quartiles {
        self.kl.last().copied().unwrap_or(Quartiles::of(&[]))
    }

    /// Per-record CSV: `record_id,ari,mse,kl` at the last iteration.
    pub fn write_records_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["record_id", "ari", "mse", "kl"]).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.write_record([
                r.index.to_string(),
                r.final_ari().to_string(),
                r.final_mse().to_string(),
                r.final_kl().to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(Error::io(path))
    }

    /// JSON summary with final-iteration quartiles and per-iteration curves.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "records": self.records.len(),
            "slots": self.slots,
            "iterations": self.iterations,
            "ari": self.final_ari(),
            "mse": self.final_mse(),
            "kl": self.final_kl(),
            "curves": {
                "ari": self.ari,
                "mse": self.mse,
                "kl": self.kl,
            },
        })
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary_json())
            .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(Error::io(path))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Evaluates `records` in parallel at the slot and iteration counts of
/// `opts`. Record `i` uses the random stream `opts.rng(i)`.
pub fn mse_kl_curves<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    records: &[SceneRecord],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let curves = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| evaluate_record(params, cfg, r, i, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(opts.slots, opts.iterations, curves))
}

/// Greedy maximum-IoU matching of ground-truth objects to argmax slot
/// regions. Entry `o` is the slot matched to object `o`, if any.
pub fn match_slots_to_objects<S: Scalar>(masks: &Tensor<S>, record: &SceneRecord) -> Result<Vec<Option<usize>>> {
    let labels = argmax_labels(masks)?;
    let slots = masks.shape()[0];
    let objects = usize::from(record.object_count);
    if labels.len() != record.pixels() {
        return Err(Error::shape(
            "match_slots_to_objects",
            format!("{} mask pixels vs {} record pixels", labels.len(), record.pixels()),
        ));
    }
    let mut inter = vec![0usize; slots * objects];
    let mut area = vec![0usize; slots];
    for (i, &s) in labels.iter().enumerate() {
        area[s] += 1;
        for o in 0..objects {
            if record.mask(o)[i] != 0 {
                inter[s * objects + o] += 1;
            }
        }
    }
    let obj_area: Vec<usize> = (0..objects)
        .map(|o| record.mask(o).iter().filter(|&&v| v != 0).count())
        .collect();
    let mut pairs = Vec::with_capacity(slots * objects);
    for s in 0..slots {
        for o in 0..objects {
            let i = inter[s * objects + o];
            if i > 0 {
                let union = area[s] + obj_area[o] - i;
                pairs.push((i as f64 / union as f64, o, s));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; objects];
    let mut used = vec![false; slots];
    for (_, o, s) in pairs {
        if out[o].is_none() && !used[s] {
            out[o] = Some(s);
            used[s] = true;
        }
    }
    Ok(out)
}

/// Final posterior means of matched slots, paired with their objects'
/// factors.
pub fn collect_probe_samples<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    records: &[SceneRecord],
    opts: &EvalOptions,
) -> Result<Vec<ProbeSample>> {
    let per_record = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| -> Result<Vec<ProbeSample>> {
            check_record(&cfg.decoder, r)?;
            let image = image_tensor(r)?;
            let trace = run_inference(params, cfg, &image, &opts.inference(), &mut opts.rng(i))?;
            let matched = match_slots_to_objects(&trace.final_decode().masks, r)?;
            let m = trace.final_mean.shape()[1];
            Ok(matched
                .iter()
                .enumerate()
                .filter_map(|(o, s)| {
                    s.map(|s| ProbeSample {
                        latent: trace.final_mean.data()[s * m..(s + 1) * m]
                            .iter()
                            .map(|v| v.to_f64_lossy())
                            .collect(),
                        factors: r.factors[o],
                    })
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

/// One frame of a latent traversal.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversalFrame<S> {
    pub value: f64,
    pub image: Tensor<S>,
    pub decoded: Decoded<S>,
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

/// Re-decodes `z: [K, M]` with `z[slot, dim]` swept over `values`.
pub fn latent_traversal<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &DecoderConfig,
    z: &Tensor<S>,
    slot: usize,
    dim: usize,
    values: &[f64],
) -> Result<Vec<TraversalFrame<S>>> {
    let s = z.shape();
    if s.len() != 2 || slot >= s[0] || dim >= s[1] {
        return Err(Error::shape(
            "latent_traversal",
            format!("slot {slot}, dim {dim} out of range for latents {s:?}"),
        ));
    }
    values
        .iter()
        .map(|&v| {
            let mut zt = z.clone();
            zt.data_mut()[slot * s[1] + dim] = S::lit(v);
            let (means, logits) = decoder::decode_values(params, cfg, &zt)?;
            let masks = decoder::normalize_masks(&logits)?;
            let image = decoder::reconstruct(&means, &masks)?;
            Ok(TraversalFrame {
                value: v,
                image,
                decoded: Decoded { means, masks },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiStability {
    pub seeds: Vec<u64>,
    /// Canonical segmentation per seed.
    pub segmentations: Vec<Vec<usize>>,
    /// Index into `modes` for each seed.
    pub mode_of_seed: Vec<usize>,
    /// Distinct canonical segmentations in order of first appearance, with
    /// how many seeds produced each.
    pub modes: Vec<(Vec<usize>, usize)>,
}

impl MultiStability {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }
}

/// Runs inference once per seed and groups the final segmentations up to
/// slot permutation. With `foreground`, only those pixels are compared.
pub fn multi_stability_eval<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    image: &Tensor<S>,
    opts: &InferenceOptions,
    seeds: &[u64],
    foreground: Option<&[bool]>,
) -> Result<MultiStability> {
    let segmentations = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<usize>> {
            let trace = run_inference(params, cfg, image, opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let labels = argmax_labels(&trace.final_decode().masks)?;
            let kept: Vec<usize> = match foreground {
                Some(fg) => labels.iter().zip(fg).filter(|(_, &f)| f).map(|(&l, _)| l).collect(),
                None => labels,
            };
            Ok(canonicalize(&kept))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut index: BTreeMap<&Vec<usize>, usize> = BTreeMap::new();
    let mut modes: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut mode_of_seed = Vec::with_capacity(seeds.len());
    for seg in &segmentations {
        let next = index.len();
        let m = *index.entry(seg).or_insert(next);
        if m == modes.len() {
            modes.push((seg.clone(), 0));
        }
        modes[m].1 += 1;
        mode_of_seed.push(m);
    }
    Ok(MultiStability {
        seeds: seeds.to_vec(),
        segmentations,
        mode_of_seed,
        modes,
    })
}
