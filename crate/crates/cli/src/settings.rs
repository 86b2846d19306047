//! Training and model settings from a preset, an optional `key = value`
//! file and command-line overrides, applied in that order.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use cmaclip::data::{split, DatasetSplit};
use cmaclip::{Dataset, FusionVariant, ModelConfig, TrainConfig};

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Training preset: toy or large.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// `key = value` file; `model.<key>` lines configure the architecture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// full, no_ma or no_ma_no_sa.
    #[arg(long, default_value = "full")]
    pub variant: String,
}

#[derive(Args, Debug, Clone)]
pub struct TrainSettings {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Warm-up, end-to-end and tuning epochs, e.g. `2,12,3`.
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub fractions: String,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|e| anyhow!("bad list item `{}`: {e}", v.trim()))
        })
        .collect()
}

fn key_value(s: &str) -> Result<(&str, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected `key=value`, got `{s}`"))?;
    Ok((k.trim(), v.trim()))
}

/// Routes one setting to the model or the training configuration.
fn apply(train: &mut TrainConfig, model: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    match key.strip_prefix("model.") {
        Some("task") => bail!("tasks come from the dataset"),
        Some(k) => model.set(k, value)?,
        None => train.set(key, value)?,
    }
    Ok(())
}

impl ConfigArgs {
    /// Resolved configurations. The model config has no tasks yet.
    pub fn resolve(&self) -> Result<(TrainConfig, ModelConfig)> {
        let mut train = TrainConfig::preset(&self.preset)?;
        let variant: FusionVariant = self.variant.parse()?;
        let mut model = ModelConfig::toy(Vec::new()).with_variant(variant);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = key_value(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
                apply(&mut train, &mut model, k, v).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            }
        }
        for s in &self.set {
            let (k, v) = key_value(s)?;
            apply(&mut train, &mut model, k, v)?;
        }
        Ok((train, model))
    }
}

impl TrainSettings {
    pub fn resolve(&self) -> Result<(TrainConfig, ModelConfig)> {
        let (mut train, model) = self.config.resolve()?;
        if let Some(lr) = self.lr {
            train.lr = lr;
        }
        if let Some(bs) = self.batch_size {
            train.batch_size = bs;
        }
        if let Some(e) = &self.epochs {
            let e: Vec<usize> = parse_list(e)?;
            train.epochs = e
                .try_into()
                .map_err(|_| anyhow!("--epochs takes three comma-separated counts"))?;
        }
        if let Some(seed) = self.seed {
            train.seed = seed;
        }
        Ok((train, model))
    }
}

impl SplitArgs {
    pub fn split(&self, data: &Dataset) -> Result<DatasetSplit> {
        let f: Vec<f64> = parse_list(&self.fractions)?;
        let f: [f64; 3] = f
            .try_into()
            .map_err(|_| anyhow!("--fractions takes three comma-separated values"))?;
        Ok(split(&data.pairs, f, self.split_seed)?)
    }
}

pub fn load_dataset(dir: &Path, d_joint: usize) -> Result<Dataset> {
    Dataset::load(dir, Some(d_joint)).with_context(|| format!("loading dataset {}", dir.display()))
}
