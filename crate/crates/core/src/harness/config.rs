//! Run configuration: a flat `key = value` file with `#` comments, optionally
//! patched by `--key value` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::{AdapterKind, FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::harness::data::{SyntheticParams, Texture};
use crate::losses::LossConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            steps: 500,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Load from this MVTec-style directory instead of generating.
    pub dataset_dir: Option<PathBuf>,
    pub synthetic: SyntheticParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 200,
            test_count: 100,
            dataset_dir: None,
            synthetic: SyntheticParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub model_seed: u64,
    pub data_seed: u64,
    /// Number of seeds an ablation runs over.
    pub ablation_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            model_seed: 0,
            data_seed: 0,
            ablation_seeds: 5,
        }
    }
}

pub const KEYS: &[&str] = &[
    "n_groups",
    "blocks_per_group",
    "channels",
    "heads",
    "mlp_ratio",
    "patch_size",
    "image_size",
    "rank",
    "branch_kernels",
    "temperature",
    "gate_hidden",
    "text_context",
    "conv_lora",
    "dfg",
    "lambda_focal",
    "lambda_dice",
    "lambda_cls",
    "focal_gamma",
    "focal_alpha",
    "dice_smooth",
    "lr",
    "steps",
    "batch_size",
    "model_seed",
    "data_seed",
    "ablation_seeds",
    "train_count",
    "test_count",
    "dataset_dir",
    "texture",
    "anomaly_rate",
    "defect_min_frac",
    "defect_max_frac",
    "delta_min",
    "delta_max",
    "texture_std",
    "brightness_jitter",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} expects true/false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let l = &mut self.loss;
        let s = &mut self.data.synthetic;
        match key {
            "n_groups" => m.n_groups = parse(key, value)?,
            "blocks_per_group" => m.blocks_per_group = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "rank" => m.rank = parse(key, value)?,
            "branch_kernels" => {
                m.branch_kernels = value
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "temperature" => m.temperature = parse(key, value)?,
            "gate_hidden" => m.gate_hidden = parse(key, value)?,
            "text_context" => m.text_context = parse(key, value)?,
            "conv_lora" => {
                m.vision_adapter = if parse_bool(key, value)? {
                    AdapterKind::ConvLora
                } else {
                    AdapterKind::Lora
                }
            }
            "dfg" => {
                m.fusion = if parse_bool(key, value)? {
                    FusionMode::Dynamic
                } else {
                    FusionMode::Static
                }
            }
            "lambda_focal" => l.lambda_focal = parse(key, value)?,
            "lambda_dice" => l.lambda_dice = parse(key, value)?,
            "lambda_cls" => l.lambda_cls = parse(key, value)?,
            "focal_gamma" => l.focal_gamma = parse(key, value)?,
            "focal_alpha" => l.focal_alpha = parse(key, value)?,
            "dice_smooth" => l.dice_smooth = parse(key, value)?,
            "lr" => self.optim.lr = parse(key, value)?,
            "steps" => self.optim.steps = parse(key, value)?,
            "batch_size" => self.optim.batch_size = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "ablation_seeds" => self.ablation_seeds = parse(key, value)?,
            "train_count" => self.data.train_count = parse(key, value)?,
            "test_count" => self.data.test_count = parse(key, value)?,
            "dataset_dir" => self.data.dataset_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "texture" => {
                s.texture = Texture::parse(value)
                    .ok_or_else(|| Error::config(format!("texture must be noise, sinusoid or mixed, got {value:?}")))?
            }
            "anomaly_rate" => s.anomaly_rate = parse(key, value)?,
            "defect_min_frac" => s.defect_min_frac = parse(key, value)?,
            "defect_max_frac" => s.defect_max_frac = parse(key, value)?,
            "delta_min" => s.delta_min = parse(key, value)?,
            "delta_max" => s.delta_max = parse(key, value)?,
            "texture_std" => s.texture_std = parse(key, value)?,
            "brightness_jitter" => s.brightness_jitter = parse(key, value)?,
            _ => {
                return Err(Error::config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies `--key value` or `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::config(format!("override {arg:?} must start with --")))?;
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::config(format!("override --{body} needs a value")))?;
                    (body.to_string(), v.clone())
                }
            };
            self.set(&key.replace('-', "_"), &value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.synthetic.validate()?;
        let mut bad = Vec::new();
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            bad.push("lr");
        }
        if self.optim.batch_size == 0 {
            bad.push("batch_size");
        }
        if self.data.train_count == 0 {
            bad.push("train_count");
        }
        if self.data.test_count == 0 {
            bad.push("test_count");
        }
        if self.ablation_seeds == 0 {
            bad.push("ablation_seeds");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid run settings: {}", bad.join(", "))))
        }
    }

    /// Canonical `key = value` text; round-trips through [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let s = &self.data.synthetic;
        let kernels: Vec<String> = m.branch_kernels.iter().map(usize::to_string).collect();
        let values: Vec<String> = vec![
            m.n_groups.to_string(),
            m.blocks_per_group.to_string(),
            m.channels.to_string(),
            m.heads.to_string(),
            m.mlp_ratio.to_string(),
            m.patch_size.to_string(),
            m.image_size.to_string(),
            m.rank.to_string(),
            kernels.join(","),
            m.temperature.to_string(),
            m.gate_hidden.to_string(),
            m.text_context.to_string(),
            (m.vision_adapter == AdapterKind::ConvLora).to_string(),
            (m.fusion == FusionMode::Dynamic).to_string(),
            l.lambda_focal.to_string(),
            l.lambda_dice.to_string(),
            l.lambda_cls.to_string(),
            l.focal_gamma.to_string(),
            l.focal_alpha.to_string(),
            l.dice_smooth.to_string(),
            self.optim.lr.to_string(),
            self.optim.steps.to_string(),
            self.optim.batch_size.to_string(),
            self.model_seed.to_string(),
            self.data_seed.to_string(),
            self.ablation_seeds.to_string(),
            self.data.train_count.to_string(),
            self.data.test_count.to_string(),
            self.data.dataset_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            s.texture.name().to_string(),
            s.anomaly_rate.to_string(),
            s.defect_min_frac.to_string(),
            s.defect_max_frac.to_string(),
            s.delta_min.to_string(),
            s.delta_max.to_string(),
            s.texture_std.to_string(),
            s.brightness_jitter.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Generator settings for one split.
    pub fn synthetic(&self, split: &str) -> SyntheticParams {
        let count = if split == "train" {
            self.data.train_count
        } else {
            self.data.test_count
        };
        SyntheticParams {
            image_size: self.model.image_size,
            count,
            id_prefix: split.to_string(),
            ..self.data.synthetic.clone()
        }
    }

    /// Seed of the generator for `split`; train and test never share one.
    pub fn split_seed(&self, split: &str) -> u64 {
        let salt = if split == "train" { 0x7452 } else { 0x7E57 };
        self.data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
    }
}
