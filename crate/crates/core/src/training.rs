//! End-to-end training through the unrolled inference iterations.
//!
//! The objective of one image is `sum_t (t / T) L_t`; a batch uses the mean
//! over its images. Gradient-derived refinement inputs are constants, so the
//! backward pass never differentiates through them.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sceneslots_data::seed::{derive_seed, mix};
use sceneslots_data::tetris::TetrisParams;
use sceneslots_data::{load_dataset, Generator, SceneRecord};

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::optim::{clip_global_norm, Adam};
use crate::autodiff::{GradStore, Graph, ParamStore, Tensor, Var};
use crate::config::{ModelConfig, TrainConfig};
use crate::decoder;
use crate::error::{Error, Result};
use crate::evaluation::{self, check_record, image_tensor, EvalOptions, EvalReport};
use crate::inference::{init_params, unroll, InferenceOptions};
use crate::scalar::Scalar;

pub const METRICS_HEADER: [&str; 6] = ["step", "total_loss", "mse", "kl", "ari", "seconds"];
pub const EVAL_HEADER: [&str; 7] = ["step", "ari_q25", "ari_median", "ari_q75", "mse_median", "kl_median", "records"];

/// Iteration weights `t / T` for `t = 1..=T`.
pub fn loss_weights(iterations: usize) -> Vec<f64> {
    (1..=iterations).map(|t| t as f64 / iterations as f64).collect()
}

/// Weighted sum of per-iteration loss values.
pub fn weighted_total(losses: &[f64]) -> f64 {
    loss_weights(losses.len()).iter().zip(losses).map(|(w, l)| w * l).sum()
}

/// Weighted sum of per-iteration loss nodes.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, losses: &[Var]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::Config("total loss of zero iterations".into()));
    }
    let weights = loss_weights(losses.len());
    let mut acc: Option<Var> = None;
    for (&l, &w) in losses.iter().zip(&weights) {
        let term = g.scale(l, S::lit(w))?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Config("empty loss".into()))
}

/// A training image and its ground-truth pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<S> {
    pub image: Tensor<S>,
    pub labels: Vec<Option<u8>>,
}

impl<S: Scalar> Example<S> {
    pub fn from_record(record: &SceneRecord) -> Result<Self> {
        Ok(Self {
            image: image_tensor(record)?,
            labels: record.labels(),
        })
    }
}

/// Batch-mean statistics of one step; `mse`, `kl` and `ari` describe the
/// last iteration's sampled decode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub total_loss: f64,
    pub mse: f64,
    pub kl: f64,
    pub ari: f64,
}

/// Gradients of one image's weighted loss and its statistics.
pub fn example_gradients<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    example: &Example<S>,
    opts: &InferenceOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(GradStore<S>, StepStats)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let x = g.constant(example.image.clone());
    let un = unroll(&mut g, &b, cfg, x, opts, rng, None)?;
    let total = total_loss(&mut g, &un.losses())?;
    let total_value = g.item(total)?.to_f64_lossy();
    if !total_value.is_finite() {
        let per_t: Vec<f64> = un
            .iterations
            .iter()
            .map(|it| g.item(it.loss).map_or(f64::NAN, |v| v.to_f64_lossy()))
            .collect();
        return Err(Error::NonFinite(format!("training loss {total_value} (per iteration {per_t:?})")));
    }
    let grads = g.backward(total)?;
    let collected = b.collect(&g, &grads);
    let last = un.iterations.last().ok_or_else(|| Error::Config("no iterations".into()))?;
    let masks = g.value(last.mixture.masks);
    let recon = decoder::reconstruct(g.value(last.decode.means), masks)?;
    let ari = if example.labels.iter().any(Option::is_some) {
        evaluation::foreground_ari(masks, &example.labels)?
    } else {
        f64::NAN
    };
    let stats = StepStats {
        total_loss: total_value,
        mse: evaluation::mse(&recon, &example.image)?,
        kl: g.item(last.kl)?.to_f64_lossy(),
        ari,
    };
    Ok((collected, stats))
}

/// Random stream of example `index` in training step `step`.
pub fn example_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, step), index as u64))
}

fn mean_ignoring_nan(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Batch-mean gradients. Examples run in parallel; the reduction is in
/// batch order so the result does not depend on scheduling.
pub fn batch_gradients<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    batch: &[&Example<S>],
    opts: &InferenceOptions,
    seed: u64,
) -> Result<(GradStore<S>, StepStats)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let step = params.step();
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| example_gradients(params, cfg, ex, opts, &mut example_rng(seed, step, i)))
        .collect::<Result<Vec<_>>>()?;
    let scale = S::one() / S::lit(batch.len() as f64);
    let mut iter = results.iter();
    let (first, _) = iter.next().ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut sum = first.clone();
    for (grads, _) in iter {
        for (name, acc) in sum.iter_mut() {
            if let Some(gv) = grads.get(name) {
                for (a, &v) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += v;
                }
            }
        }
    }
    for acc in sum.values_mut() {
        acc.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    let n = results.len() as f64;
    let stats = StepStats {
        total_loss: results.iter().map(|(_, s)| s.total_loss).sum::<f64>() / n,
        mse: results.iter().map(|(_, s)| s.mse).sum::<f64>() / n,
        kl: results.iter().map(|(_, s)| s.kl).sum::<f64>() / n,
        ari: mean_ignoring_nan(results.iter().map(|(_, s)| s.ari)),
    };
    Ok((sum, stats))
}

/// Optimizer settings of a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub opts: InferenceOptions,
    pub adam: Adam,
    pub max_norm: f64,
    /// Seed of the per-example noise streams.
    pub seed: u64,
}

impl StepSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            opts: InferenceOptions::for_training(cfg.slots, cfg.iterations, cfg.ablation),
            adam: Adam::with_lr(cfg.lr),
            max_norm: cfg.max_norm,
            seed: derive_seed(cfg.seed, "train"),
        }
    }
}

/// One optimizer update on `batch`. Parameters are left untouched when the
/// loss is not finite.
pub fn train_step<S: Scalar>(
    params: &mut ParamStore<S>,
    cfg: &ModelConfig,
    batch: &[&Example<S>],
    settings: &StepSettings,
) -> Result<StepStats> {
    let (mut grads, stats) = batch_gradients(params, cfg, batch, &settings.opts, settings.seed)?;
    if !stats.total_loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {}", stats.total_loss)));
    }
    clip_global_norm(&mut grads, S::lit(settings.max_norm));
    settings.adam.step(params, &grads);
    Ok(stats)
}

/// One row of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub total_loss: f64,
    pub mse: f64,
    pub kl: f64,
    pub ari: f64,
    /// Wall-clock seconds since the loop started.
    pub seconds: f64,
}

impl TrainRecord {
    pub fn fields(&self) -> [String; 6] {
        [
            self.step.to_string(),
            self.total_loss.to_string(),
            self.mse.to_string(),
            self.kl.to_string(),
            self.ari.to_string(),
            format!("{:.3}", self.seconds),
        ]
    }
}

/// Training and held-out records.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Vec<SceneRecord>,
    pub heldout: Vec<SceneRecord>,
}

/// Loads the configured dataset, or generates tetris scenes when none is
/// given. A loaded file keeps its last `eval_records` records for
/// evaluation; generated held-out scenes come from a separate seed.
pub fn prepare_data(cfg: &TrainConfig) -> Result<TrainData> {
    let (train, heldout) = match &cfg.dataset {
        Some(path) => {
            let (_, mut records) = load_dataset(path)?;
            if records.is_empty() {
                return Err(Error::Config(format!("dataset {} is empty", path.display())));
            }
            if records.len() > cfg.eval_records {
                let heldout = records.split_off(records.len() - cfg.eval_records);
                (records, heldout)
            } else {
                (records.clone(), records)
            }
        }
        None => {
            let gen = Generator::Tetris(TetrisParams {
                canvas: cfg.canvas,
                pieces: cfg.pieces,
                ..TetrisParams::default()
            });
            let train = gen.generate(cfg.train_records as u64, derive_seed(cfg.seed, "data"))?;
            let heldout = gen.generate(cfg.eval_records as u64, derive_seed(cfg.seed, "heldout"))?;
            (train, heldout)
        }
    };
    let model = cfg.model();
    for r in train.iter().chain(&heldout).take(1) {
        check_record(&model.decoder, r)?;
    }
    if train.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    Ok(TrainData { train, heldout })
}

/// File layout of a training run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    /// Snapshot saved at `step`, kept next to the rolling checkpoint.
    pub fn checkpoint_at(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step}.bin"))
    }
}

/// Batch of step `step` (zero-based): consecutive positions of a stream of
/// per-epoch permutations.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            seed,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch != Some(epoch) {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch)));
            self.epoch = Some(epoch);
        }
        &self.order
    }

    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch as u64;
        (0..self.batch as u64)
            .map(|j| {
                let pos = start + j;
                let n = self.n as u64;
                self.permutation(pos / n)[(pos % n) as usize]
            })
            .collect()
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Keeps the header and rows whose first field is a step `<= step`.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(Error::io(path))
}

fn open_csv(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(exists)
        .write(true)
        .truncate(!exists)
        .open(path)
        .map_err(Error::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(header).map_err(csv_err(path))?;
        w.flush().map_err(Error::io(path))?;
    }
    Ok(w)
}

/// Summary of a finished (or resumed and finished) run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<S> {
    pub params: ParamStore<S>,
    pub first_step: u64,
    pub last: Option<TrainRecord>,
    pub evals: Vec<(u64, EvalReport)>,
}

/// Evaluation options used by a training run.
pub fn eval_options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions {
        ablation: cfg.ablation,
        ..EvalOptions::new(cfg.slots, cfg.iterations, derive_seed(cfg.seed, "eval"))
    }
}

/// Trains until `cfg.total_updates`, writing the config snapshot, one metrics
/// row per step, periodic held-out evaluations (each with a parameter
/// snapshot) and a rolling checkpoint into `cfg.out_dir`. With `resume`, parameters, optimizer state and the step
/// counter come from that checkpoint and the metrics file is continued.
pub fn train_loop<S: Scalar>(
    cfg: &TrainConfig,
    data: &TrainData,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let model = cfg.model();
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.dir).map_err(Error::io(&paths.dir))?;
    std::fs::write(paths.config(), cfg.to_text()).map_err(Error::io(paths.config()))?;

    let mut params: ParamStore<S> = match resume {
        Some(path) => load_checkpoint(path)?,
        None => init_params(&model, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init")))?,
    };
    let first_step = params.step();
    if resume.is_some() {
        for p in [paths.metrics(), paths.eval()] {
            if p.exists() {
                truncate_csv(&p, first_step)?;
            }
        }
    }
    let mut metrics = open_csv(&paths.metrics(), &METRICS_HEADER, resume.is_some())?;
    let mut evals_csv = open_csv(&paths.eval(), &EVAL_HEADER, resume.is_some())?;

    let examples: Vec<Example<S>> = data
        .train
        .par_iter()
        .map(Example::from_record)
        .collect::<Result<_>>()?;
    let heldout = &data.heldout[..data.heldout.len().min(cfg.eval_records)];
    let settings = StepSettings::from_config(cfg);
    let mut sampler = BatchSampler::new(examples.len(), cfg.batch_size, derive_seed(cfg.seed, "shuffle"));
    let eval_opts = eval_options(cfg);
    let start = Instant::now();
    let mut last = None;
    let mut evals = Vec::new();

    while params.step() < cfg.total_updates {
        let step = params.step();
        let batch: Vec<&Example<S>> = sampler.indices(step).into_iter().map(|i| &examples[i]).collect();
        let stats = train_step(&mut params, &model, &batch, &settings)?;
        let record = TrainRecord {
            step: params.step(),
            total_loss: stats.total_loss,
            mse: stats.mse,
            kl: stats.kl,
            ari: stats.ari,
            seconds: start.elapsed().as_secs_f64(),
        };
        metrics.write_record(record.fields()).map_err(csv_err(&paths.metrics()))?;
        metrics.flush().map_err(Error::io(paths.metrics()))?;
        on_step(&record);
        last = Some(record);

        let done = params.step() == cfg.total_updates;
        let s = params.step();
        if cfg.eval_every > 0 && (s % cfg.eval_every == 0 || done) && !heldout.is_empty() {
            let report = evaluation::mse_kl_curves(&params, &model, heldout, &eval_opts)?;
            let (a, m, k) = (report.final_ari(), report.final_mse(), report.final_kl());
            evals_csv
                .write_record([
                    s.to_string(),
                    a.q25.to_string(),
                    a.median.to_string(),
                    a.q75.to_string(),
                    m.median.to_string(),
                    k.median.to_string(),
                    report.records.len().to_string(),
                ])
                .map_err(csv_err(&paths.eval()))?;
            evals_csv.flush().map_err(Error::io(paths.eval()))?;
            evals.push((s, report));
            save_checkpoint(paths.checkpoint_at(s), &params)?;
        }
        if cfg.checkpoint_every > 0 && (s % cfg.checkpoint_every == 0 || done) {
            save_checkpoint(paths.checkpoint(), &params)?;
        }
    }
    Ok(TrainOutcome {
        params,
        first_step,
        last,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_and_totals() {
        assert_eq!(weighted_total(&[7.0]), 7.0);
        assert_eq!(weighted_total(&[2.0, 4.0]), 5.0);
        assert!((weighted_total(&[3.0, 3.0, 3.0]) - 6.0).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let ls: Vec<Var> = [2.0, 4.0].iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let t = total_loss(&mut g, &ls).unwrap();
        assert_eq!(g.item(t).unwrap(), 5.0);
        assert!(total_loss(&mut g, &[]).is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 4, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|step| s.indices(step)).collect();
        let first: Vec<usize> = seen.drain(..10).collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let mut again = BatchSampler::new(10, 4, 3);
        assert_eq!(again.indices(2), BatchSampler::new(10, 4, 3).indices(2));
        assert_eq!(again.indices(0)[..], first[..4]);
    }

    #[test]
    fn csv_truncation_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "step,x\n1,a\n2,b\n3,c\n").unwrap();
        truncate_csv(&p, 2).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,x\n1,a\n2,b\n");
    }
}
