pub mod classify;
pub mod corpus;
pub mod evaluate;
pub mod federate;
pub mod partition;
pub mod train;

use std::path::Path;

use anyhow::{bail, Context, Result};
use fedgan::data::{load_directory, make_texture_corpus, LabeledImageSet};
use fedgan::gan::Gan;
use fedgan::models::ParamVector;
use fedgan::rng::derive_seed;

use crate::config::{Config, DataSource};

// Seed streams owned by the front end, mixed into the run seed.
pub const STREAM_TRAIN_CORPUS: u64 = 101;
pub const STREAM_TEST_CORPUS: u64 = 102;
pub const STREAM_EXTRACTOR: u64 = 103;
pub const STREAM_GENERATE: u64 = 104;
pub const STREAM_CLASSIFIER: u64 = 105;
pub const STREAM_GRID: u64 = 106;

pub fn stream(cfg: &Config, id: u64) -> u64 {
    derive_seed(cfg.seed, &[id])
}

pub fn load_dir(dir: &Path, cfg: &Config) -> Result<LabeledImageSet> {
    let report = load_directory(dir, cfg.data.image_size, cfg.data.channels)
        .with_context(|| format!("loading {}", dir.display()))?;
    for (path, why) in &report.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    if !report.skipped.is_empty() {
        log::warn!(
            "{} unreadable file(s) skipped under {}",
            report.skipped.len(),
            dir.display()
        );
    }
    Ok(report.set)
}

pub fn train_set(cfg: &Config) -> Result<LabeledImageSet> {
    match cfg.data.source {
        DataSource::Texture => Ok(make_texture_corpus(
            cfg.data.n_per_class,
            cfg.data.image_size,
            stream(cfg, STREAM_TRAIN_CORPUS),
        )?),
        DataSource::Directory => load_dir(cfg.data.train_dir.as_deref().expect("validated"), cfg),
    }
}

pub fn test_set(cfg: &Config) -> Result<LabeledImageSet> {
    match cfg.data.source {
        DataSource::Texture => Ok(make_texture_corpus(
            cfg.data.test_per_class,
            cfg.data.image_size,
            stream(cfg, STREAM_TEST_CORPUS),
        )?),
        DataSource::Directory => load_dir(cfg.data.test_dir.as_deref().expect("validated"), cfg),
    }
}

/// Freshly initialized generator/critic pair for this config.
pub fn new_gan(cfg: &Config) -> Result<Gan> {
    Ok(Gan::new(
        cfg.gan.variant,
        &cfg.generator_spec()?,
        &cfg.critic_spec()?,
        cfg.seed,
    )?)
}

/// A GAN loaded from a checkpoint written by `train-gan` or `federate`.
pub fn load_gan(cfg: &Config, checkpoint: &Path) -> Result<Gan> {
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let pv = ParamVector::load(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let mut gan = new_gan(cfg)?;
    gan.unflatten(&pv)
        .with_context(|| format!("checkpoint {} does not fit the configured models", checkpoint.display()))?;
    Ok(gan)
}
