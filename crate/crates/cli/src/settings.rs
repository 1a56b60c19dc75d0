//! Layered run settings: profile preset, then an optional JSON file, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use dsc_core::data::DatasetHeader;
use dsc_core::model::{ModelConfig, Profile};
use dsc_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every tunable of a training run. All fields are optional so that files
/// and flags can each set a subset; a fully resolved copy is written into
/// the run manifest and can be fed back through `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Architecture preset.
    #[arg(long, value_enum)]
    #[serde(default)]
    pub profile: Option<ProfileArg>,
    #[arg(long)]
    #[serde(default)]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub d: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub d_emb: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub max_caption_len: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[arg(long = "lr")]
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub eps: Option<f64>,
    /// Run seed; falls back to the config file, then DSC_SEED, then 0.
    #[arg(long)]
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl Settings {
    /// Values set in `top` win.
    pub fn overlay(mut self, top: &Settings) -> Settings {
        overlay!(
            self,
            top,
            profile,
            layers,
            d,
            heads,
            d_emb,
            max_frames,
            max_caption_len,
            lambda1,
            lambda2,
            learning_rate,
            epochs,
            batch_size,
            max_steps,
            beta1,
            beta2,
            eps,
            seed
        );
        self
    }

    /// Reads a settings object, or the `resolved` section of a run manifest.
    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let inner = match value.get("resolved") {
            Some(r) => r.clone(),
            None => value,
        };
        serde_json::from_value(inner).with_context(|| format!("config {}", path.display()))
    }

    /// Seed from these settings, else `DSC_SEED`, else 0.
    pub fn resolve_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var("DSC_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("DSC_SEED={v:?} is not an unsigned integer")),
            Err(_) => Ok(0),
        }
    }

    pub fn profile(&self) -> Profile {
        self.profile.map_or(Profile::Paper, Profile::from)
    }

    /// Resolves model and training configs for a dataset.
    pub fn resolve(&self, header: &DatasetHeader, vocab_size: usize) -> Result<(ModelConfig, TrainConfig)> {
        let profile = self.profile();
        let mut m = ModelConfig::for_dataset(profile, header, vocab_size);
        let mut t = TrainConfig::for_profile(profile);
        m.layers = self.layers.unwrap_or(m.layers);
        m.d = self.d.unwrap_or(m.d);
        m.heads = self.heads.unwrap_or(m.heads);
        m.d_emb = self.d_emb.unwrap_or(m.d_emb);
        m.max_frames = self.max_frames.unwrap_or(m.max_frames);
        m.max_caption_len = self.max_caption_len.unwrap_or(m.max_caption_len);
        t.lambda1 = self.lambda1.unwrap_or(t.lambda1);
        t.lambda2 = self.lambda2.unwrap_or(t.lambda2);
        m.lambda1 = t.lambda1;
        m.lambda2 = t.lambda2;
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.max_steps = self.max_steps.or(t.max_steps);
        t.beta1 = self.beta1.unwrap_or(t.beta1);
        t.beta2 = self.beta2.unwrap_or(t.beta2);
        t.eps = self.eps.unwrap_or(t.eps);
        t.seed = self.resolve_seed()?;
        m.validate()?;
        t.validate()?;
        Ok((m, t))
    }

    /// Fully populated settings equivalent to a resolved pair.
    pub fn from_resolved(profile: Profile, m: &ModelConfig, t: &TrainConfig) -> Settings {
        Settings {
            profile: Some(match profile {
                Profile::Paper => ProfileArg::Paper,
                Profile::Desk => ProfileArg::Desk,
            }),
            layers: Some(m.layers),
            d: Some(m.d),
            heads: Some(m.heads),
            d_emb: Some(m.d_emb),
            max_frames: Some(m.max_frames),
            max_caption_len: Some(m.max_caption_len),
            lambda1: Some(t.lambda1),
            lambda2: Some(t.lambda2),
            learning_rate: Some(t.learning_rate),
            epochs: Some(t.epochs),
            batch_size: Some(t.batch_size),
            max_steps: t.max_steps,
            beta1: Some(t.beta1),
            beta2: Some(t.beta2),
            eps: Some(t.eps),
            seed: Some(t.seed),
        }
    }
}
