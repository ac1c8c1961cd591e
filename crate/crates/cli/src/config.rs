//! Flat `key=value` run configuration.
//!
//! Model keys are those of [`ModelConfig::entries`]; the remaining keys
//! describe data, optimization and the diagnostic commands. `preset` is
//! applied before every other key wherever it appears.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use favit_core::model::{AdamW, ModelConfig, Preset, Variant};
use favit_core::numerics::FiniteDiff;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Cifar10,
    FashionMnist,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Cifar10 => "cifar10",
            DataFormat::FashionMnist => "fashion-mnist",
        })
    }
}

impl FromStr for DataFormat {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" | "cifar-10" => Ok(DataFormat::Cifar10),
            "fashion-mnist" | "fashion_mnist" => Ok(DataFormat::FashionMnist),
            other => Err(CliError::Config(format!(
                "unknown data format `{other}` (expected cifar10 or fashion-mnist)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub data: Option<PathBuf>,
    pub format: DataFormat,
    /// Original class ids to keep, relabelled to their position in the list.
    pub class_subset: Option<Vec<usize>>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub out: PathBuf,
    /// Variants compared by `bench` and checked by `gradcheck`.
    pub variants: Vec<Variant>,
    pub bench_images: usize,
    pub warmup: usize,
    pub runs: usize,
    pub grad_scheme: FiniteDiff,
    pub grad_per_param: usize,
    pub grad_batch: usize,
    pub grad_tolerance: f64,
}

const RUN_KEYS: [&str; 20] = [
    "data",
    "format",
    "class_subset",
    "train_limit",
    "test_limit",
    "seed",
    "epochs",
    "batch",
    "lr",
    "weight_decay",
    "out",
    "variants",
    "bench_images",
    "warmup",
    "runs",
    "grad_method",
    "grad_step",
    "grad_per_param",
    "grad_batch",
    "grad_tolerance",
];

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamW::default();
        Self {
            preset: Preset::Desk,
            model: ModelConfig::desk(Variant::SpppLla),
            data: None,
            format: DataFormat::Cifar10,
            class_subset: None,
            train_limit: None,
            test_limit: None,
            seed: 0,
            epochs: 5,
            batch: 16,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            out: PathBuf::from("out"),
            variants: Variant::ALL.to_vec(),
            bench_images: 4,
            warmup: 1,
            runs: 5,
            grad_scheme: FiniteDiff::Ridders(1e-2),
            grad_per_param: 3,
            grad_batch: 2,
            grad_tolerance: 1e-4,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for {key}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn step_of(scheme: FiniteDiff) -> f64 {
    match scheme {
        FiniteDiff::Central(h) | FiniteDiff::Ridders(h) => h,
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        key == "preset" || ModelConfig::has_key(key) || RUN_KEYS.contains(&key)
    }

    /// Applies pairs in order, with `preset` first. Later pairs override
    /// earlier ones with the same key.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.preset = p.parse()?;
            cfg.model = ModelConfig::preset(cfg.preset, cfg.model.variant);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                self.preset = value.parse()?;
                self.model = ModelConfig::preset(self.preset, self.model.variant);
            }
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "format" => self.format = value.parse()?,
            "class_subset" => {
                self.class_subset = if value.is_empty() { None } else { Some(list(key, value)?) }
            }
            "train_limit" => self.train_limit = optional(key, value)?,
            "test_limit" => self.test_limit = optional(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(|v| v.trim().parse::<Variant>())
                    .collect::<favit_core::Result<_>>()?
            }
            "bench_images" => self.bench_images = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "runs" => self.runs = num(key, value)?,
            "grad_method" => {
                let h = step_of(self.grad_scheme);
                self.grad_scheme = match value {
                    "central" => FiniteDiff::Central(h),
                    "ridders" => FiniteDiff::Ridders(h),
                    _ => return Err(CliError::Config(format!("invalid value `{value}` for {key} (central or ridders)"))),
                }
            }
            "grad_step" => {
                let h: f64 = num(key, value)?;
                self.grad_scheme = match self.grad_scheme {
                    FiniteDiff::Central(_) => FiniteDiff::Central(h),
                    FiniteDiff::Ridders(_) => FiniteDiff::Ridders(h),
                }
            }
            "grad_per_param" => self.grad_per_param = num(key, value)?,
            "grad_batch" => self.grad_batch = num(key, value)?,
            "grad_tolerance" => self.grad_tolerance = num(key, value)?,
            k if ModelConfig::has_key(k) => self.model.set(k, value)?,
            k => return Err(CliError::Config(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    /// Every key in a fixed order; empty values stand for unset options.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![("preset".to_string(), self.preset.to_string())];
        out.extend(self.model.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
        let opt = |o: Option<usize>| o.map(|v| v.to_string()).unwrap_or_default();
        let run = [
            self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.format.to_string(),
            self.class_subset.as_deref().map(join).unwrap_or_default(),
            opt(self.train_limit),
            opt(self.test_limit),
            self.seed.to_string(),
            self.epochs.to_string(),
            self.batch.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.out.display().to_string(),
            join(&self.variants),
            self.bench_images.to_string(),
            self.warmup.to_string(),
            self.runs.to_string(),
            match self.grad_scheme {
                FiniteDiff::Central(_) => "central",
                FiniteDiff::Ridders(_) => "ridders",
            }
            .to_string(),
            step_of(self.grad_scheme).to_string(),
            self.grad_per_param.to_string(),
            self.grad_batch.to_string(),
            self.grad_tolerance.to_string(),
        ];
        out.extend(RUN_KEYS.iter().map(|k| k.to_string()).zip(run));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(subset) = &self.class_subset {
            if subset.len() != self.model.classes {
                return Err(CliError::Config(format!(
                    "class_subset keeps {} classes but classes={}",
                    subset.len(),
                    self.model.classes
                )));
            }
            let mut sorted = subset.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != subset.len() {
                return Err(CliError::Config("class_subset lists a class twice".into()));
            }
        }
        if self.batch == 0 || self.variants.is_empty() {
            return Err(CliError::Config("batch and variants must be nonempty".into()));
        }
        Ok(())
    }
}

/// Splits config text into pairs; blank lines and `#` comments are skipped.
/// Unknown or repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !RunConfig::is_key(k) {
            return Err(CliError::Config(format!("line {}: unknown config key `{k}`", i + 1)));
        }
        if pairs.iter().any(|(seen, _)| seen == k) {
            return Err(CliError::Config(format!("line {}: key `{k}` given twice", i + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    RunConfig::from_pairs(&parse_pairs(text)?)
}
