//! Model architecture and run configuration, with presets and a flat
//! `key=value` text format (`#` starts a comment).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inference::Ablation;

/// Decoder shape. `hidden[0]` is the width of the layer applied to the
/// broadcast latent; the output layer has `channels + 1` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub hidden: Vec<usize>,
    pub sigma: f64,
}

/// Refinement network shape. `lstm_hidden == 0` means no LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub mlp: usize,
    pub lstm_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub refine: RefineConfig,
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.decoder.latent_dim
    }

    /// Image-like refinement inputs per slot: image, means, mask, mask
    /// logits, mask posterior, mean gradients, mask gradient, likelihood,
    /// leave-one-out likelihood, coordinates.
    pub fn input_channels(&self) -> usize {
        3 * self.decoder.channels + 8
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.decoder;
        let r = &self.refine;
        let bad = |msg: String| Err(Error::Config(msg));
        if d.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if d.height < 2 || d.width < 2 || d.channels == 0 {
            return bad(format!(
                "image {}x{}x{} too small",
                d.height, d.width, d.channels
            ));
        }
        if d.kernel % 2 == 0 || r.kernel % 2 == 0 {
            return bad("decoder_kernel and refine_kernel must be odd".into());
        }
        if d.hidden.is_empty() || d.hidden.contains(&0) {
            return bad("decoder_channels needs at least one positive width".into());
        }
        if !(d.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", d.sigma));
        }
        if r.channels.len() != r.strides.len() {
            return bad(format!(
                "refine_channels has {} entries but refine_strides has {}",
                r.channels.len(),
                r.strides.len()
            ));
        }
        if r.channels.contains(&0) || r.strides.iter().any(|&s| s == 0 || s > 2) {
            return bad("refine widths must be positive and strides 1 or 2".into());
        }
        if r.mlp == 0 {
            return bad("refine_mlp must be positive".into());
        }
        Ok(())
    }
}

/// Everything a training or evaluation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub slots: usize,
    pub iterations: usize,
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sigma: f64,
    pub decoder_kernel: usize,
    pub decoder_channels: Vec<usize>,
    pub refine_kernel: usize,
    pub refine_channels: Vec<usize>,
    pub refine_strides: Vec<usize>,
    pub refine_mlp: usize,
    pub lstm_hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_norm: f64,
    pub total_updates: u64,
    pub seed: u64,
    pub ablation: Ablation,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_records: usize,
    /// Dataset file; when absent, a tetris set is generated from `canvas`,
    /// `pieces` and `train_records`.
    pub dataset: Option<PathBuf>,
    pub canvas: usize,
    pub pieces: usize,
    pub train_records: usize,
    pub out_dir: PathBuf,
}

pub const PRESETS: [&str; 2] = ["tetris-paper", "tetris-mini"];

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as a count")))
        })
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// 35x35 tetris with three pieces, four slots and five iterations.
    pub fn tetris_paper() -> Self {
        Self {
            preset: "tetris-paper".into(),
            slots: 4,
            iterations: 5,
            latent_dim: 64,
            height: 35,
            width: 35,
            channels: 3,
            sigma: 0.1,
            decoder_kernel: 5,
            decoder_channels: vec![32, 32, 32, 32],
            refine_kernel: 5,
            refine_channels: vec![32, 32, 32],
            refine_strides: vec![1, 1, 1],
            refine_mlp: 128,
            lstm_hidden: 0,
            batch_size: 32,
            lr: 3e-4,
            max_norm: 5.0,
            total_updates: 1_000_000,
            seed: 0,
            ablation: Ablation::default(),
            checkpoint_every: 1000,
            eval_every: 1000,
            eval_records: 320,
            dataset: None,
            canvas: 35,
            pieces: 3,
            train_records: 60_000,
            out_dir: PathBuf::from("runs/tetris-paper"),
        }
    }

    /// Desk-scale variant: 20x20 canvas with two pieces, three slots, a
    /// 32-dimensional latent, 3x3 kernels and a strided refinement network.
    pub fn tetris_mini() -> Self {
        Self {
            preset: "tetris-mini".into(),
            slots: 3,
            iterations: 5,
            latent_dim: 32,
            height: 20,
            width: 20,
            channels: 3,
            decoder_kernel: 3,
            decoder_channels: vec![32, 32, 32],
            refine_kernel: 3,
            refine_channels: vec![32, 32, 32],
            refine_strides: vec![2, 2, 1],
            refine_mlp: 128,
            batch_size: 16,
            total_updates: 20_000,
            canvas: 20,
            pieces: 2,
            train_records: 20_000,
            out_dir: PathBuf::from("runs/tetris-mini"),
            ..Self::tetris_paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tetris-paper" => Ok(Self::tetris_paper()),
            "tetris-mini" => Ok(Self::tetris_mini()),
            other => Err(Error::Config(format!(
                "preset: unknown preset {other:?} (expected one of {PRESETS:?})"
            ))),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            decoder: DecoderConfig {
                latent_dim: self.latent_dim,
                height: self.height,
                width: self.width,
                channels: self.channels,
                kernel: self.decoder_kernel,
                hidden: self.decoder_channels.clone(),
                sigma: self.sigma,
            },
            refine: RefineConfig {
                kernel: self.refine_kernel,
                channels: self.refine_channels.clone(),
                strides: self.refine_strides.clone(),
                mlp: self.refine_mlp,
                lstm_hidden: self.lstm_hidden,
            },
        }
    }

    /// Sets one field from its textual value. `preset` is not accepted here;
    /// see [`TrainConfig::parse`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "slots" => self.slots = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "latent_dim" => self.latent_dim = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "sigma" => self.sigma = parse_num(key, v)?,
            "decoder_kernel" => self.decoder_kernel = parse_num(key, v)?,
            "decoder_channels" => self.decoder_channels = parse_list(key, v)?,
            "refine_kernel" => self.refine_kernel = parse_num(key, v)?,
            "refine_channels" => self.refine_channels = parse_list(key, v)?,
            "refine_strides" => self.refine_strides = parse_list(key, v)?,
            "refine_mlp" => self.refine_mlp = parse_num(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "max_norm" => self.max_norm = parse_num(key, v)?,
            "total_updates" => self.total_updates = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "ablation" => {
                self.ablation =
                    Ablation::parse_list(v).map_err(|e| Error::Config(format!("ablation: {e}")))?
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_records" => self.eval_records = parse_num(key, v)?,
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "canvas" => self.canvas = parse_num(key, v)?,
            "pieces" => self.pieces = parse_num(key, v)?,
            "train_records" => self.train_records = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "preset" => {
                return Err(Error::Config(
                    "preset: must be the first setting of a config".into(),
                ))
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of `base`. A `preset=` line, if present,
    /// replaces the base before the other lines are applied.
    pub fn parse(text: &str, base: Self) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, name)) => Self::preset(name)?,
            None => base,
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>, base: Self) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, base)
    }

    /// Applies `key=value` overrides (for example from the command line).
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
            if k.trim() == "preset" {
                *self = Self::preset(v.trim())?;
            } else {
                self.set(k.trim(), v)?;
            }
        }
        Ok(())
    }

    /// Every field as `key=value` lines; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("preset", self.preset.clone());
        kv("slots", self.slots.to_string());
        kv("iterations", self.iterations.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("channels", self.channels.to_string());
        kv("sigma", self.sigma.to_string());
        kv("decoder_kernel", self.decoder_kernel.to_string());
        kv("decoder_channels", join(&self.decoder_channels));
        kv("refine_kernel", self.refine_kernel.to_string());
        kv("refine_channels", join(&self.refine_channels));
        kv("refine_strides", join(&self.refine_strides));
        kv("refine_mlp", self.refine_mlp.to_string());
        kv("lstm_hidden", self.lstm_hidden.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("max_norm", self.max_norm.to_string());
        kv("total_updates", self.total_updates.to_string());
        kv("seed", self.seed.to_string());
        kv("ablation", self.ablation.to_list());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_records", self.eval_records.to_string());
        kv(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("canvas", self.canvas.to_string());
        kv("pieces", self.pieces.to_string());
        kv("train_records", self.train_records.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.slots == 0 {
            return bad("slots must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.max_norm > 0.0) {
            return bad(format!("max_norm must be positive, got {}", self.max_norm));
        }
        if self.dataset.is_none() && (self.canvas != self.height || self.canvas != self.width) {
            return bad(format!(
                "canvas {} does not match height {} / width {}",
                self.canvas, self.height, self.width
            ));
        }
        self.model().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let c = TrainConfig::tetris_paper();
        assert_eq!((c.slots, c.iterations, c.latent_dim), (4, 5, 64));
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.max_norm, 5.0);
        assert_eq!(c.lstm_hidden, 0);
        assert_eq!(c.model().input_channels(), 17);
        c.validate().unwrap();
        TrainConfig::tetris_mini().validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::tetris_mini();
        c.ablation = Ablation::parse_list("no-image,no-coords").unwrap();
        c.dataset = Some(PathBuf::from("data/x.mobd"));
        let back = TrainConfig::parse(&c.to_text(), TrainConfig::tetris_paper()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn override_beats_file_value() {
        let mut c = TrainConfig::parse("preset=tetris-mini\nslots=5 # comment\n", TrainConfig::tetris_paper()).unwrap();
        assert_eq!(c.slots, 5);
        assert_eq!(c.latent_dim, 32);
        c.apply_overrides(["slots=7"]).unwrap();
        assert_eq!(c.slots, 7);
    }

    #[test]
    fn errors_name_the_key() {
        let e = TrainConfig::parse("slots=abc", TrainConfig::tetris_mini()).unwrap_err();
        assert!(e.to_string().contains("slots"));
        let e = TrainConfig::parse("bogus=1", TrainConfig::tetris_mini()).unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = TrainConfig::parse("no equals sign", TrainConfig::tetris_mini()).unwrap_err();
        assert!(e.to_string().contains("line 1"));
        let mut c = TrainConfig::tetris_mini();
        c.refine_strides = vec![1];
        assert!(c.validate().is_err());
    }
}
