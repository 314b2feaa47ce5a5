//! Run configuration: flat `section.key=value` pairs.
//!
//! One format serves three places: CLI overrides, config files, and the
//! `run.lock` echo written into every output directory. Serialization is
//! canonical (every key, sorted, materialized defaults), so two runs with
//! the same effective configuration produce byte-identical lock files.
//!
//! `model.preset` is input sugar: it expands to trunk widths and block
//! counts when applied and never appears in canonical output.

use crate::error::{Error, Result};
use crate::model::{HeadKind, MapNegation, ModelSpec};
use crate::synth::{ModuleType, SynthConfig};
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model_in_h: usize,
    pub model_in_w: usize,
    pub model_widths: [usize; 4],
    pub model_blocks: usize,
    pub model_head: HeadKind,
    pub model_negation: MapNegation,
    pub model_map_bias: bool,

    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_lr_schedule: LrSchedule,
    pub train_momentum: f64,
    pub train_weight_decay: f64,
    pub train_augment: bool,
    pub train_max_angle: f64,
    pub train_seed: u64,
    pub train_precision: Precision,
    /// `random`, or a checkpoint path to fine-tune from.
    pub train_init: String,

    pub synth_count: usize,
    pub synth_types: Vec<String>,
    pub synth_cell_px: usize,
    pub synth_density: f64,
    pub synth_ambiguity: f64,
    pub synth_noise: f64,
    pub synth_seed: u64,

    /// Fit intensity statistics over the whole dataset instead of each
    /// fold's training portion.
    pub data_stats_over_all: bool,
    pub data_manifest: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_in_h: 192,
            model_in_w: 320,
            model_widths: [64, 128, 256, 512],
            model_blocks: 2,
            model_head: HeadKind::RegressionMap,
            model_negation: MapNegation::Relu,
            model_map_bias: true,
            train_epochs: 100,
            train_batch: 8,
            train_lr: 1e-3,
            train_lr_schedule: LrSchedule::Constant,
            train_momentum: 0.9,
            train_weight_decay: 0.1,
            train_augment: true,
            train_max_angle: 5.0,
            train_seed: 0,
            train_precision: Precision::F32,
            train_init: "random".into(),
            synth_count: 54,
            synth_types: ["A", "B", "C", "D", "E", "F"].map(String::from).to_vec(),
            synth_cell_px: 32,
            synth_density: 0.5,
            synth_ambiguity: 0.3,
            synth_noise: 0.01,
            synth_seed: 7,
            data_stats_over_all: false,
            data_manifest: String::new(),
            out_dir: "runs/out".into(),
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key}: cannot parse {value:?}, expected {want}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, want))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

impl RunConfig {
    /// Applies one `key=value` pair.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.preset" => match v {
                "mini" => {
                    self.model_widths = [8, 16, 32, 64];
                    self.model_blocks = 2;
                }
                "full" => {
                    self.model_widths = [64, 128, 256, 512];
                    self.model_blocks = 2;
                }
                _ => return Err(bad(key, v, "mini or full")),
            },
            "model.in_h" => self.model_in_h = parse_num(key, v, "a positive integer")?,
            "model.in_w" => self.model_in_w = parse_num(key, v, "a positive integer")?,
            "model.widths" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 4 {
                    return Err(bad(key, v, "four comma-separated widths"));
                }
                let mut widths = [0usize; 4];
                for (slot, p) in widths.iter_mut().zip(&parts) {
                    *slot = parse_num(key, p, "a positive integer")?;
                }
                self.model_widths = widths;
            }
            "model.blocks" => self.model_blocks = parse_num(key, v, "a positive integer")?,
            "model.head" => {
                self.model_head = match v {
                    "map" => HeadKind::RegressionMap,
                    "embedding" => HeadKind::EmbeddingLinear,
                    _ => return Err(bad(key, v, "map or embedding")),
                }
            }
            "model.negation" => {
                self.model_negation = match v {
                    "relu" => MapNegation::Relu,
                    "abs" => MapNegation::Abs,
                    "identity" => MapNegation::Identity,
                    _ => return Err(bad(key, v, "relu, abs or identity")),
                }
            }
            "model.map_bias" => self.model_map_bias = parse_bool(key, v)?,
            "train.epochs" => self.train_epochs = parse_num(key, v, "a positive integer")?,
            "train.batch" => self.train_batch = parse_num(key, v, "a positive integer")?,
            "train.lr" => self.train_lr = parse_num(key, v, "a number")?,
            "train.lr_schedule" => {
                self.train_lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(bad(key, v, "constant or cosine")),
                }
            }
            "train.momentum" => self.train_momentum = parse_num(key, v, "a number")?,
            "train.weight_decay" => self.train_weight_decay = parse_num(key, v, "a number")?,
            "train.augment" => self.train_augment = parse_bool(key, v)?,
            "train.max_angle" => self.train_max_angle = parse_num(key, v, "a number")?,
            "train.seed" => self.train_seed = parse_num(key, v, "an integer")?,
            "train.precision" => {
                self.train_precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, v, "f32 or f64")),
                }
            }
            "train.init" => {
                if v.is_empty() {
                    return Err(bad(key, v, "random or a checkpoint path"));
                }
                self.train_init = v.to_string();
            }
            "synth.count" => self.synth_count = parse_num(key, v, "a positive integer")?,
            "synth.types" => {
                let types: Vec<String> =
                    v.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
                if types.is_empty() {
                    return Err(bad(key, v, "comma-separated module types"));
                }
                self.synth_types = types;
            }
            "synth.cell_px" => self.synth_cell_px = parse_num(key, v, "a positive integer")?,
            "synth.density" => self.synth_density = parse_num(key, v, "a number")?,
            "synth.ambiguity" => self.synth_ambiguity = parse_num(key, v, "a number")?,
            "synth.noise" => self.synth_noise = parse_num(key, v, "a number")?,
            "synth.seed" => self.synth_seed = parse_num(key, v, "an integer")?,
            "data.stats_over_all" => self.data_stats_over_all = parse_bool(key, v)?,
            "data.manifest" => self.data_manifest = v.to_string(),
            "out.dir" => self.out_dir = v.to_string(),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` pairs as given on a command line.
    pub fn apply_args<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for a in args {
            let a = a.as_ref();
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {a:?}")))?;
            self.apply(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses config-file text: one `key=value` per line, `#` comments.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            cfg.apply(k.trim(), v)?;
        }
        Ok(cfg)
    }

    /// Canonical serialization: every key, sorted, one per line.
    pub fn canonical_text(&self) -> String {
        let widths = self
            .model_widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let head = match self.model_head {
            HeadKind::RegressionMap => "map",
            HeadKind::EmbeddingLinear => "embedding",
        };
        let negation = match self.model_negation {
            MapNegation::Relu => "relu",
            MapNegation::Abs => "abs",
            MapNegation::Identity => "identity",
        };
        let precision = match self.train_precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let schedule = match self.train_lr_schedule {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        };
        let mut pairs: Vec<(&str, String)> = vec![
            ("data.manifest", self.data_manifest.clone()),
            ("data.stats_over_all", self.data_stats_over_all.to_string()),
            ("model.blocks", self.model_blocks.to_string()),
            ("model.head", head.into()),
            ("model.in_h", self.model_in_h.to_string()),
            ("model.in_w", self.model_in_w.to_string()),
            ("model.map_bias", self.model_map_bias.to_string()),
            ("model.negation", negation.into()),
            ("model.widths", widths),
            ("out.dir", self.out_dir.clone()),
            ("synth.ambiguity", self.synth_ambiguity.to_string()),
            ("synth.cell_px", self.synth_cell_px.to_string()),
            ("synth.count", self.synth_count.to_string()),
            ("synth.density", self.synth_density.to_string()),
            ("synth.noise", self.synth_noise.to_string()),
            ("synth.seed", self.synth_seed.to_string()),
            ("synth.types", self.synth_types.join(",")),
            ("train.augment", self.train_augment.to_string()),
            ("train.batch", self.train_batch.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.init", self.train_init.clone()),
            ("train.lr", self.train_lr.to_string()),
            ("train.lr_schedule", schedule.into()),
            ("train.max_angle", self.train_max_angle.to_string()),
            ("train.momentum", self.train_momentum.to_string()),
            ("train.precision", precision.into()),
            ("train.seed", self.train_seed.to_string()),
            ("train.weight_decay", self.train_weight_decay.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(
            (self.model_in_h, self.model_in_w),
            self.model_widths,
            self.model_blocks,
            self.model_head,
        )?;
        spec.map_negation = self.model_negation;
        spec.map_bias = self.model_map_bias;
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch,
            lr: self.train_lr,
            lr_schedule: self.train_lr_schedule,
            momentum: self.train_momentum,
            weight_decay: self.train_weight_decay,
            augment: self.train_augment,
            max_angle_deg: self.train_max_angle,
            seed: self.train_seed,
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let module_types = self
            .synth_types
            .iter()
            .map(|t| ModuleType::preset(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthConfig {
            count: self.synth_count,
            module_types,
            cell_px: self.synth_cell_px,
            defect_density: self.synth_density,
            intensity_ambiguity: self.synth_ambiguity,
            noise_sigma: self.synth_noise,
            seed: self.synth_seed,
        })
    }
}
