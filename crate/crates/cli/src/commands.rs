//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sceneslots_core::autodiff::checkpoint::load_checkpoint;
use sceneslots_core::autodiff::ParamStore;
use sceneslots_core::config::{ModelConfig, TrainConfig};
use sceneslots_core::evaluation::{
    self, check_record, image_tensor, kl_terms, latent_traversal, linspace, multi_stability_eval, EvalOptions,
    EvalReport,
};
use sceneslots_core::inference::{init_params, run_inference, Ablation, AuxInput};
use sceneslots_core::training::{self, prepare_data, train_loop, RunPaths, TrainRecord};
use sceneslots_data::seed::{derive_seed, mix};
use sceneslots_data::tetris::TetrisParams;
use sceneslots_data::{load_dataset, save_dataset, DatasetKind, Generator, SceneRecord};
use sha2::{Digest, Sha256};

use crate::figures::{decomposition_strip, hstack, tile, vstack};
use crate::ppm::write_ppm;
use crate::{AblateArgs, CliError, ConfigArgs, EvalArgs, GenDataArgs, ModelArgs, TrainArgs, VisualizeArgs};

type Result<T> = std::result::Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Command line as a comment line, for run snapshots.
fn invocation() -> String {
    let args: Vec<String> = std::env::args().collect();
    format!("# {}\n", args.join(" "))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let kind = DatasetKind::parse(&a.kind).ok_or_else(|| {
        let names: Vec<&str> = DatasetKind::ALL.iter().map(|k| k.name()).collect();
        CliError::Usage(format!("unknown dataset kind {:?} (expected one of {names:?})", a.kind))
    })?;
    let gen = match Generator::for_kind(kind) {
        Generator::Tetris(d) => Generator::Tetris(TetrisParams {
            canvas: a.canvas.unwrap_or(d.canvas),
            pieces: a.pieces.unwrap_or(d.pieces),
            block: a.block.unwrap_or(d.block),
        }),
        g => {
            if a.canvas.is_some() || a.pieces.is_some() || a.block.is_some() {
                return Err(CliError::Usage(format!(
                    "--canvas, --pieces and --block apply to tetris only, not {kind}"
                )));
            }
            g
        }
    };
    gen.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut snapshot = invocation();
    let _ = writeln!(snapshot, "kind={kind}\nn={}\nseed={}", a.n, a.seed);
    if let Generator::Tetris(p) = gen {
        let _ = writeln!(snapshot, "canvas={}\npieces={}\nblock={}", p.canvas, p.pieces, p.block);
    }
    write_text(&sibling(&a.out, ".config.txt"), &snapshot)?;

    let records = gen.generate(a.n, a.seed)?;
    let header = save_dataset(&a.out, &gen.header(a.n, a.seed), &records)?;
    let bytes = std::fs::read(&a.out).map_err(CliError::io(&a.out))?;
    let digest = Sha256::digest(&bytes);

    let mut counts = vec![0u64; usize::from(header.max_objects) + 1];
    let mut foreground = 0u64;
    for r in &records {
        counts[usize::from(r.object_count)] += 1;
        foreground += r.foreground_count() as u64;
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "kind: {kind}");
    let _ = writeln!(summary, "records: {}", header.record_count);
    let _ = writeln!(
        summary,
        "image: {}x{}x{} (HxWxC)",
        header.height, header.width, header.channels
    );
    let _ = writeln!(summary, "seed: {}", header.seed);
    for (n, c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
        let _ = writeln!(summary, "scenes with {n} objects: {c}");
    }
    let _ = writeln!(summary, "foreground pixels: {foreground}");
    let _ = writeln!(summary, "bytes: {}", bytes.len());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(summary, "sha256: {hex}");
    write_text(&sibling(&a.out, ".summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Preset, then config file, then `--set` overrides.
pub fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let base = TrainConfig::preset(&a.preset).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_file(path, base)?,
        None => base,
    };
    cfg.apply_overrides(a.overrides.iter().map(String::as_str))?;
    cfg.validate()?;
    Ok(cfg)
}

fn progress(record: &TrainRecord) {
    eprintln!(
        "step {:>7}  loss {:>10.3}  mse {:.5}  kl {:>8.2}  ari {:.3}  {:>8.1}s",
        record.step, record.total_loss, record.mse, record.kl, record.ari, record.seconds
    );
}

fn print_eval(label: &str, report: &EvalReport) {
    let (a, m, k) = (report.final_ari(), report.final_mse(), report.final_kl());
    println!(
        "{label}: ARI median {:.4} [{:.4}, {:.4}]  MSE median {:.6}  KL median {:.3}  ({} records)",
        a.median,
        a.q25,
        a.q75,
        m.median,
        k.median,
        report.records.len()
    );
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let paths = RunPaths::new(&cfg.out_dir);
    write_text(&paths.config(), &cfg.to_text())?;
    let data = prepare_data(&cfg)?;
    eprintln!(
        "training {} for {} updates on {} scenes ({} held out) into {}",
        cfg.preset,
        cfg.total_updates,
        data.train.len(),
        data.heldout.len().min(cfg.eval_records),
        cfg.out_dir.display()
    );
    let every = a.log_every;
    let outcome = train_loop::<f32>(&cfg, &data, a.resume.as_deref(), |r| {
        if every > 0 && (r.step % every == 0 || r.step == cfg.total_updates) {
            progress(r);
        }
    })?;
    for (step, report) in &outcome.evals {
        print_eval(&format!("step {step}"), report);
    }
    Ok(())
}

/// Checks that every parameter the model needs is present with the right
/// shape.
fn check_params(params: &ParamStore<f32>, model: &ModelConfig, path: &Path) -> Result<()> {
    let expected: ParamStore<f32> = init_params(model, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, p) in expected.iter() {
        let got = params.get(name).map_err(|_| {
            CliError::Runtime(format!("{}: missing parameter {name:?} for this configuration", path.display()))
        })?;
        if got.shape() != p.value.shape() {
            return Err(CliError::Runtime(format!(
                "{}: parameter {name:?} has shape {:?}, configuration expects {:?}",
                path.display(),
                got.shape(),
                p.value.shape()
            )));
        }
    }
    Ok(())
}

struct LoadedModel {
    cfg: TrainConfig,
    model: ModelConfig,
    params: ParamStore<f32>,
    opts: EvalOptions,
}

fn load_model(a: &ModelArgs) -> Result<LoadedModel> {
    let cfg_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.txt"),
    };
    let cfg = TrainConfig::from_file(&cfg_path, TrainConfig::tetris_mini())?;
    let model = cfg.model();
    model.validate()?;
    let params: ParamStore<f32> = load_checkpoint(&a.checkpoint)?;
    check_params(&params, &model, &a.checkpoint)?;
    let ablation = match &a.ablation {
        Some(list) => Ablation::parse_list(list).map_err(CliError::Usage)?,
        None => cfg.ablation,
    };
    let slots = a.slots.unwrap_or(cfg.slots);
    let iterations = a.iterations.unwrap_or(cfg.iterations);
    if slots == 0 || iterations == 0 {
        return Err(CliError::Usage("--slots and --iterations must be at least 1".into()));
    }
    let seed = a.seed.unwrap_or_else(|| derive_seed(cfg.seed, "eval"));
    let opts = EvalOptions {
        ablation,
        ..EvalOptions::new(slots, iterations, seed)
    };
    Ok(LoadedModel {
        cfg,
        model,
        params,
        opts,
    })
}

/// The first `n` records of `dataset`, or the first `n` held-out scenes a
/// training run with `cfg` would generate.
fn eval_records(cfg: &TrainConfig, dataset: Option<&Path>, n: usize) -> Result<Vec<SceneRecord>> {
    let mut records = match dataset {
        Some(path) => load_dataset(path)?.1,
        None => {
            let gen = Generator::Tetris(TetrisParams {
                canvas: cfg.canvas,
                pieces: cfg.pieces,
                ..TetrisParams::default()
            });
            gen.generate(n as u64, derive_seed(cfg.seed, "heldout"))?
        }
    };
    records.truncate(n);
    for r in &records {
        check_record(&cfg.model().decoder, r)?;
    }
    Ok(records)
}

fn model_snapshot(m: &LoadedModel, a: &ModelArgs, extra: &str) -> String {
    let mut s = invocation();
    let _ = writeln!(s, "# checkpoint={}", a.checkpoint.display());
    if let Some(d) = &a.dataset {
        let _ = writeln!(s, "# dataset={}", d.display());
    }
    let _ = writeln!(
        s,
        "# eval slots={} iterations={} seed={} ablation={}",
        m.opts.slots,
        m.opts.iterations,
        m.opts.seed,
        m.opts.ablation.to_list()
    );
    s.push_str(extra);
    s.push_str(&m.cfg.to_text());
    s
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let extra = format!("# records={}\n", a.records);
    write_text(&a.out.join("config.txt"), &model_snapshot(&m, &a.model, &extra))?;
    let records = eval_records(&m.cfg, a.model.dataset.as_deref(), a.records)?;
    if records.is_empty() {
        return Err(CliError::Runtime("no records to evaluate".into()));
    }
    let report = evaluation::mse_kl_curves(&m.params, &m.model, &records, &m.opts)?;
    report.write_records_csv(&a.out.join("records.csv"))?;
    report.write_summary(&a.out.join("summary.json"))?;
    print_eval(&format!("K={} T={}", m.opts.slots, m.opts.iterations), &report);
    Ok(())
}

fn parse_indices(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--records: cannot parse {v:?} as an index")))
        })
        .collect()
}

pub fn visualize(a: &VisualizeArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let ids = parse_indices(&a.records)?;
    if a.scale == 0 {
        return Err(CliError::Usage("--scale must be at least 1".into()));
    }
    let extra = format!(
        "# records={} seeds={} dims={} steps={} scale={}\n",
        a.records, a.seeds, a.dims, a.steps, a.scale
    );
    write_text(&a.out.join("config.txt"), &model_snapshot(&m, &a.model, &extra))?;
    let needed = ids.iter().max().map_or(0, |&i| i + 1);
    let records = eval_records(&m.cfg, a.model.dataset.as_deref(), needed)?;
    let opts = m.opts.inference();
    let save = |img: &crate::ppm::Rgb, name: String| -> Result<()> {
        let path = a.out.join(name);
        write_ppm(&img.upscale(a.scale), &path).map_err(CliError::io(&path))
    };

    for &id in &ids {
        let record = records
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("record {id} out of range ({} available)", records.len())))?;
        let image = image_tensor::<f32>(record)?;
        let trace = run_inference(&m.params, &m.model, &image, &opts, &mut m.opts.rng(id))?;

        save(&decomposition_strip(&image, trace.final_decode())?, format!("record{id}-decomposition.ppm"))?;

        let rows = trace
            .mean_decodes
            .iter()
            .map(|d| decomposition_strip(&image, d))
            .collect::<sceneslots_core::Result<Vec<_>>>()?;
        save(&vstack(&rows), format!("record{id}-iterations.ppm"))?;

        let (mean, raw) = (&trace.final_mean, &trace.final_raw_scale);
        let dim = mean.shape()[1];
        let kl = kl_terms(mean, raw);
        let slot = (0..opts.slots)
            .max_by(|&x, &y| {
                let s = |k: usize| kl[k * dim..(k + 1) * dim].iter().sum::<f64>();
                s(x).total_cmp(&s(y)).then(y.cmp(&x))
            })
            .unwrap_or(0);
        let dims = evaluation::rank_dims_by_kl(mean, raw, slot)?;
        let values = linspace(-2.0, 2.0, a.steps);
        let mut rows = Vec::new();
        for &d in dims.iter().take(a.dims) {
            let frames = latent_traversal(&m.params, &m.model.decoder, mean, slot, d, &values)?;
            rows.push(hstack(&frames.iter().map(|f| tile(&f.image)).collect::<Vec<_>>()));
        }
        save(&vstack(&rows), format!("record{id}-traversal.ppm"))?;

        let seeds: Vec<u64> = (0..a.seeds).map(|s| mix(m.opts.seed ^ id as u64, s)).collect();
        let mut rows = Vec::new();
        for &s in &seeds {
            let t = run_inference(&m.params, &m.model, &image, &opts, &mut ChaCha8Rng::seed_from_u64(s))?;
            rows.push(decomposition_strip(&image, t.final_decode())?);
        }
        save(&vstack(&rows), format!("record{id}-seeds.ppm"))?;
        let fg: Vec<bool> = record.labels().iter().map(Option::is_some).collect();
        let stability = multi_stability_eval(&m.params, &m.model, &image, &opts, &seeds, Some(&fg))?;
        println!(
            "record {id}: {} segmentation mode(s) over {} seeds; seed modes {:?}",
            stability.mode_count(),
            seeds.len(),
            stability.mode_of_seed
        );
    }
    Ok(())
}

fn parse_flags(text: &str) -> Result<Vec<AuxInput>> {
    text.split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(|f| {
            AuxInput::from_flag(f).ok_or_else(|| {
                let known: Vec<&str> = AuxInput::ALL.iter().map(|i| i.flag()).collect();
                CliError::Usage(format!("unknown input flag {f:?} (expected one of {known:?})"))
            })
        })
        .collect()
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = resolve_config(&a.config)?;
    let flags = parse_flags(&a.flags)?;
    let mut runs: Vec<(String, String, TrainConfig)> = vec![("baseline".into(), "none".into(), base.clone())];
    for f in &flags {
        let mut cfg = base.clone();
        cfg.ablation = base.ablation.with(*f);
        runs.push((f.flag().to_string(), f.flag().to_string(), cfg));
    }
    for (name, _, cfg) in &mut runs {
        cfg.out_dir = a.out.join(name.as_str());
    }
    let mut snapshot = invocation();
    let _ = writeln!(snapshot, "# flags={}", a.flags);
    snapshot.push_str(&base.to_text());
    write_text(&a.out.join("config.txt"), &snapshot)?;

    let data = prepare_data(&base)?;
    let heldout = &data.heldout[..data.heldout.len().min(base.eval_records)];
    let csv_path = a.out.join("ablation.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    csv.write_record(["run", "flag", "final_loss", "ari", "mse", "kl"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for (name, flag, cfg) in &runs {
        eprintln!("run {name}: ablation {}", cfg.ablation);
        let outcome = train_loop::<f32>(cfg, &data, None, |_| {})?;
        let report = match outcome.evals.last() {
            Some((_, r)) => r.clone(),
            None => evaluation::mse_kl_curves(&outcome.params, &cfg.model(), heldout, &training::eval_options(cfg))?,
        };
        let loss = outcome.last.map_or(f64::NAN, |r| r.total_loss);
        csv.write_record([
            name.clone(),
            flag.clone(),
            loss.to_string(),
            report.final_ari().median.to_string(),
            report.final_mse().median.to_string(),
            report.final_kl().median.to_string(),
        ])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        csv.flush().map_err(CliError::io(&csv_path))?;
        print_eval(name, &report);
    }
    Ok(())
}
