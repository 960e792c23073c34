use anyhow::{Context, Result};
use fedgan::data::save_grid;
use fedgan::gan::{train, EpochRecord, EpochSink, Gan, GanError};
use fedgan::models::Model;
use fedgan::rng::{normal_array, rng_for};

use super::{new_gan, stream, train_set, STREAM_GRID};
use crate::config::Config;
use crate::run::Run;

const GRID_PER_CLASS: usize = 8;

/// Writes fixed-noise sample grids of `generator` to `path`.
pub fn sample_grid(cfg: &Config, generator: &Model, path: &std::path::Path) -> Result<()> {
    let classes = generator.spec().num_classes;
    let n = GRID_PER_CLASS * classes;
    let mut rng = rng_for(stream(cfg, STREAM_GRID), &[]);
    let noise = normal_array(&mut rng, &[n, generator.spec().latent_dim]);
    let labels: Vec<usize> = (0..n).map(|i| i / GRID_PER_CLASS).collect();
    let images = generator.sample(&noise, &labels)?;
    save_grid(&images, GRID_PER_CLASS, path)?;
    Ok(())
}

struct Sink<'a> {
    cfg: &'a Config,
    run: &'a mut Run,
}

impl Sink<'_> {
    fn save(&mut self, gan: &Gan, epoch: usize) -> Result<()> {
        let last = epoch == self.cfg.gan.epochs;
        if epoch == 1 || last || epoch.is_multiple_of(self.cfg.gan.checkpoint_every) {
            let rel = format!("checkpoints/epoch-{epoch:04}.fgpv");
            let p = self.run.prepare(&rel)?;
            gan.flatten()
                .save(&p)
                .with_context(|| format!("writing {}", p.display()))?;
            self.run.record(&rel, true)?;
        }
        if epoch == 1 || last || (self.cfg.gan.grid_every > 0 && epoch.is_multiple_of(self.cfg.gan.grid_every)) {
            let rel = format!("samples/epoch-{epoch:04}.png");
            sample_grid(self.cfg, &gan.generator, &self.run.prepare(&rel)?)?;
            self.run.record(&rel, true)?;
        }
        Ok(())
    }
}

impl EpochSink for Sink<'_> {
    fn epoch_end(&mut self, gan: &Gan, record: &EpochRecord) -> Result<(), GanError> {
        log::info!(
            "epoch {}: loss_d {:.4} loss_g {:.4} penalty {:.4}",
            record.epoch,
            record.loss_d,
            record.loss_g,
            record.penalty
        );
        self.save(gan, record.epoch)
            .map_err(|e| GanError::Config(format!("saving epoch {}: {e:#}", record.epoch)))
    }
}

pub fn run(cfg: &Config, out: Option<&std::path::Path>) -> Result<()> {
    let data = train_set(cfg)?;
    log::info!(
        "training {} on {} images for {} epochs",
        cfg.gan.variant.name(),
        data.len(),
        cfg.gan.epochs
    );
    let mut gan = new_gan(cfg)?;
    let mut run = Run::create(cfg, "train-gan", out)?;
    let gan_cfg = cfg.gan_config();
    let result = {
        let mut sink = Sink { cfg, run: &mut run };
        train(&mut gan, &data, &gan_cfg, 0, &mut sink)
    };
    let history = match result {
        Ok(h) => h,
        Err(GanError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            let p = run.prepare("checkpoints/last-good.fgpv")?;
            last_good.save(&p)?;
            anyhow::bail!(
                "training diverged at epoch {epoch}: {reason}; last good weights kept at {}",
                p.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    run.write("history.csv", history.csv(false), true)?;
    run.write("history_timed.csv", history.csv(true), false)?;
    run.write("config.json", serde_json::to_string_pretty(cfg)?, true)?;
    run.finish()?;
    Ok(())
}
