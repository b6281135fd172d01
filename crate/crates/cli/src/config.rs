//! Flat `key = value` settings with `#` comments.
//!
//! Precedence: built-in defaults < `--config` file < `--set key=value` <
//! dedicated flags such as `--epochs`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use tcmkd_core::autodiff::AdamConfig;
use tcmkd_core::signal::{PipelineConfig, SegmentConfig};
use tcmkd_core::train::TrainConfig;
use tcmkd_core::transfer::{AdaptConfig, DEFAULT_QUANTILE, DEFAULT_RIDGE};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub seg_len: usize,
    pub overlap: f64,
    pub channels: [usize; 2],
    pub train_fraction: f64,
    pub norm_epsilon: f64,
    pub windows: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub kd_weight: f64,
    pub shuffle: bool,
    pub adapt_epochs: usize,
    pub ridge: f64,
    pub quantile: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let seg = SegmentConfig::default();
        let pipe = PipelineConfig::default();
        let train = TrainConfig::default();
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            seg_len: seg.seg_len,
            overlap: seg.overlap_fraction,
            channels: seg.channels,
            train_fraction: pipe.train_fraction,
            norm_epsilon: pipe.norm_epsilon,
            windows: pipe.build_windows,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            kd_weight: train.kd_weight,
            shuffle: train.shuffle,
            adapt_epochs: AdaptConfig::default().epochs,
            ridge: DEFAULT_RIDGE,
            quantile: DEFAULT_QUANTILE,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .trim()
        .parse()
        .map_err(|_| UsageError(format!("config key `{key}`: cannot parse `{value}`")))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "seg_len" => self.seg_len = parse(key, value)?,
            "overlap" => self.overlap = parse(key, value)?,
            "channels" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err(UsageError(format!("config key `channels`: expected two indices like `0,1`, got `{value}`")));
                }
                self.channels = [parse(key, parts[0])?, parse(key, parts[1])?];
            }
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "norm_epsilon" => self.norm_epsilon = parse(key, value)?,
            "windows" => self.windows = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, value)?,
            "kd_weight" => self.kd_weight = parse(key, value)?,
            "shuffle" => self.shuffle = parse(key, value)?,
            "adapt_epochs" => self.adapt_epochs = parse(key, value)?,
            "ridge" => self.ridge = parse(key, value)?,
            "quantile" => self.quantile = parse(key, value)?,
            _ => return Err(UsageError(format!("unknown config key `{key}` (see --print-config)"))),
        }
        Ok(())
    }

    /// Applies a config file's text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), UsageError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| UsageError(format!("{origin}:{}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())?;
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), UsageError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--set expects key=value, got `{p}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("seg_len", self.seg_len.to_string());
        put("overlap", self.overlap.to_string());
        put("channels", format!("{},{}", self.channels[0], self.channels[1]));
        put("train_fraction", self.train_fraction.to_string());
        put("norm_epsilon", self.norm_epsilon.to_string());
        put("windows", self.windows.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_epsilon", self.adam_epsilon.to_string());
        put("kd_weight", self.kd_weight.to_string());
        put("shuffle", self.shuffle.to_string());
        put("adapt_epochs", self.adapt_epochs.to_string());
        put("ridge", self.ridge.to_string());
        put("quantile", self.quantile.to_string());
        m
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            segment: SegmentConfig {
                seg_len: self.seg_len,
                overlap_fraction: self.overlap,
                channels: self.channels,
            },
            train_fraction: self.train_fraction,
            norm_epsilon: self.norm_epsilon,
            build_windows: self.windows,
            num_classes: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam(),
            kd_weight: self.kd_weight,
            seed: self.seed,
            shuffle: self.shuffle,
        }
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            epochs: self.adapt_epochs,
            batch_size: self.batch_size,
            adam: self.adam(),
            seed: self.seed,
            shuffle: self.shuffle,
            record_trace: false,
        }
    }
}
