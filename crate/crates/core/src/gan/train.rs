use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Tensor};
use crate::data::LabeledImageSet;
use crate::models::{Heads, Pass};
use crate::rng::{normal_array, rng_for, TAG_EPOCH};

use super::losses::{self, LossParts};
use super::{Adam, AdamConfig, Gan, GanError, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    /// Critic updates per generator update (WGAN-GP only; the BCE objectives
    /// alternate one-to-one).
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Zero both optimizers' moments at every epoch index divisible by this
    /// (global numbering). Lets a centralized run replicate federated clients,
    /// whose optimizers start fresh each round.
    pub optimizer_reset_every: Option<usize>,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            variant: Variant::Acgan,
            epochs: 30,
            batch_size: 32,
            n_critic: 10,
            lambda_gp: 3.0,
            seed: 0,
            adam: AdamConfig::default(),
            optimizer_reset_every: None,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: &str| Err(GanError::Config(m.to_string()));
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1");
        }
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return bad("lambda_gp must be a finite value >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam.eps <= 0.0 {
            return bad("Adam eps must be positive");
        }
        if self.optimizer_reset_every == Some(0) {
            return bad("optimizer_reset_every must be positive when set");
        }
        Ok(())
    }

    fn critic_steps(&self) -> usize {
        if self.variant == Variant::WganGp {
            self.n_critic
        } else {
            1
        }
    }
}

/// Mean losses over one epoch. `epoch` is 1-based and global.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub penalty: f64,
    pub d_steps: usize,
    pub g_steps: usize,
}

/// Training history. Wall times are kept apart from the records so that the
/// records alone are a deterministic function of the inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub wall_secs: Vec<f64>,
}

impl History {
    pub fn d_steps(&self) -> usize {
        self.records.iter().map(|r| r.d_steps).sum()
    }

    pub fn g_steps(&self) -> usize {
        self.records.iter().map(|r| r.g_steps).sum()
    }

    pub fn csv(&self, with_time: bool) -> String {
        let mut out = String::from(if with_time {
            "epoch,loss_d,loss_g,penalty,wall_secs\n"
        } else {
            "epoch,loss_d,loss_g,penalty\n"
        });
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!("{},{:e},{:e},{:e}", r.epoch, r.loss_d, r.loss_g, r.penalty));
            if with_time {
                out.push_str(&format!(",{:.3}", self.wall_secs.get(i).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        }
        out
    }
}

/// Receives the model after every epoch (checkpoints, sample grids).
pub trait EpochSink {
    fn epoch_end(&mut self, gan: &Gan, record: &EpochRecord) -> Result<(), GanError>;
}

pub struct NoSink;

impl EpochSink for NoSink {
    fn epoch_end(&mut self, _: &Gan, _: &EpochRecord) -> Result<(), GanError> {
        Ok(())
    }
}

struct StepLoss {
    total: f64,
    penalty: f64,
}

struct Trainer<'a> {
    gan: &'a mut Gan,
    cfg: &'a GanConfig,
    opt_g: Adam,
    opt_d: Adam,
}

fn score(h: &Heads) -> Result<Tensor, GanError> {
    h.score
        .ok_or_else(|| GanError::Config("critic has no real/fake head".into()))
}

fn logits(h: &Heads) -> Result<Tensor, GanError> {
    h.class_logits
        .ok_or_else(|| GanError::Config("critic has no class head".into()))
}

fn finite(g: &Graph, t: Tensor, what: &str) -> Result<f64, GanError> {
    let v = g.value(t).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GanError::NonFinite(format!("{what} ({v})")))
    }
}

impl Trainer<'_> {
    fn critic_step(&mut self, rng: &mut ChaCha8Rng, real: &Array, labels: &[usize]) -> Result<StepLoss, GanError> {
        let m = labels.len();
        let z = normal_array(rng, &[m, self.gan.generator.spec().latent_dim]);
        let (gseed, dseed) = (rng.random::<u64>(), rng.random::<u64>());
        let eps: Vec<f64> = if self.gan.variant() == Variant::WganGp {
            (0..m).map(|_| rng.random::<f64>()).collect()
        } else {
            Vec::new()
        };

        let mut g = Graph::new();
        let gp = self.gan.generator.bind(&mut g, false);
        let mut gpass = Pass::train(gseed);
        let zt = g.constant(z);
        let fake_t = self.gan.generator.generate(&mut g, &gp, &mut gpass, zt, Some(labels))?;
        let fake = g.value(fake_t).clone();

        let critic = &self.gan.critic;
        let dp = critic.bind(&mut g, true);
        let mut dpass = Pass::train(dseed);
        let real_t = g.constant(real.clone());
        let fake_c = g.constant(fake.clone());
        let hr = critic.heads(&mut g, &dp, &mut dpass, real_t, labels)?;
        let hf = critic.heads(&mut g, &dp, &mut dpass, fake_c, labels)?;
        let parts: LossParts = match self.gan.variant() {
            Variant::Cgan => losses::cgan_critic_loss(&mut g, score(&hr)?, score(&hf)?)?,
            Variant::Acgan => {
                losses::acgan_critic_loss(&mut g, score(&hr)?, logits(&hr)?, score(&hf)?, logits(&hf)?, labels)?
            }
            Variant::WganGp => {
                let mut f = |g: &mut Graph, x: Tensor| -> Result<Tensor, GanError> {
                    let h = critic.heads(g, &dp, &mut dpass, x, labels)?;
                    score(&h)
                };
                let pen = losses::gradient_penalty(&mut g, real, &fake, &eps, &mut f)?;
                losses::wgan_critic_loss(&mut g, score(&hr)?, score(&hf)?, Some(pen), self.cfg.lambda_gp)?
            }
        };
        let total = finite(&g, parts.total, "critic loss")?;
        let penalty = parts.penalty.map(|p| g.value(p).item()).unwrap_or(0.0);
        let grads = g.backward(parts.total)?;
        self.opt_d.step(self.gan.critic.store_mut(), &dp, &grads)?;
        self.gan.critic.apply_pass(&dpass);
        self.gan.generator.apply_pass(&gpass);
        Ok(StepLoss { total, penalty })
    }

    fn generator_step(&mut self, rng: &mut ChaCha8Rng, labels: &[usize]) -> Result<f64, GanError> {
        let m = labels.len();
        let z = normal_array(rng, &[m, self.gan.generator.spec().latent_dim]);
        let (gseed, dseed) = (rng.random::<u64>(), rng.random::<u64>());

        let mut g = Graph::new();
        let gp = self.gan.generator.bind(&mut g, true);
        let dp = self.gan.critic.bind(&mut g, false);
        let mut gpass = Pass::train(gseed);
        let mut dpass = Pass::train(dseed);
        let zt = g.constant(z);
        let fake = self.gan.generator.generate(&mut g, &gp, &mut gpass, zt, Some(labels))?;
        let h = self.gan.critic.heads(&mut g, &dp, &mut dpass, fake, labels)?;
        let parts = match self.gan.variant() {
            Variant::Cgan => losses::cgan_generator_loss(&mut g, score(&h)?)?,
            Variant::Acgan => losses::acgan_generator_loss(&mut g, score(&h)?, logits(&h)?, labels)?,
            Variant::WganGp => losses::wgan_generator_loss(&mut g, score(&h)?)?,
        };
        let total = finite(&g, parts.total, "generator loss")?;
        let grads = g.backward(parts.total)?;
        self.opt_g.step(self.gan.generator.store_mut(), &gp, &grads)?;
        self.gan.generator.apply_pass(&gpass);
        self.gan.critic.apply_pass(&dpass);
        Ok(total)
    }

    fn epoch(&mut self, data: &LabeledImageSet, global: usize) -> Result<EpochRecord, GanError> {
        let mut rng = rng_for(self.cfg.seed, &[TAG_EPOCH, global as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_g, mut sum_p) = (0.0, 0.0, 0.0);
        let (mut d_steps, mut g_steps) = (0, 0);
        // A trailing single-sample batch would break batch statistics.
        for batch in order.chunks(self.cfg.batch_size).filter(|b| b.len() >= 2) {
            let (real, labels) = data.batch(batch);
            for _ in 0..self.cfg.critic_steps() {
                let s = self.critic_step(&mut rng, &real, &labels)?;
                sum_d += s.total;
                sum_p += s.penalty;
                d_steps += 1;
            }
            sum_g += self.generator_step(&mut rng, &labels)?;
            g_steps += 1;
        }
        Ok(EpochRecord {
            epoch: global + 1,
            loss_d: sum_d / d_steps as f64,
            loss_g: sum_g / g_steps as f64,
            penalty: sum_p / d_steps as f64,
            d_steps,
            g_steps,
        })
    }
}

/// Trains `gan` for `cfg.epochs` epochs numbered from `epoch_offset`. Each
/// epoch's shuffling, noise and dropout come from a stream keyed by
/// `(cfg.seed, global epoch)`, so a run split into consecutive calls replays
/// a single long run exactly (given matching optimizer resets).
pub fn train(
    gan: &mut Gan,
    data: &LabeledImageSet,
    cfg: &GanConfig,
    epoch_offset: usize,
    sink: &mut dyn EpochSink,
) -> Result<History, GanError> {
    cfg.validate()?;
    if cfg.variant != gan.variant() {
        return Err(GanError::Config(format!(
            "config variant {} does not match the model pair's {}",
            cfg.variant.name(),
            gan.variant().name()
        )));
    }
    if data.len() < 2 {
        return Err(GanError::Config(format!(
            "need at least 2 training samples, got {}",
            data.len()
        )));
    }
    let spec = gan.generator.spec();
    let (c, h, w) = data.image_dims();
    if (c, h, w) != (spec.channels, spec.image_size, spec.image_size) || data.num_classes() != spec.num_classes {
        return Err(GanError::Config(format!(
            "data is {c}x{h}x{w} with {} classes; model expects {}x{s}x{s} with {} classes",
            data.num_classes(),
            spec.channels,
            spec.num_classes,
            s = spec.image_size
        )));
    }
    let opt_g = Adam::new(gan.generator.store(), cfg.adam);
    let opt_d = Adam::new(gan.critic.store(), cfg.adam);
    let mut last_good = gan.flatten();
    let mut t = Trainer { gan, cfg, opt_g, opt_d };
    let mut history = History::default();
    for e in 0..cfg.epochs {
        let global = epoch_offset + e;
        if e > 0 && cfg.optimizer_reset_every.is_some_and(|k| global.is_multiple_of(k)) {
            t.opt_g.reset();
            t.opt_d.reset();
        }
        let start = Instant::now();
        let record = match t.epoch(data, global) {
            Ok(r) if r.loss_d.is_finite() && r.loss_g.is_finite() => r,
            Ok(r) => {
                return Err(GanError::Diverged {
                    epoch: global + 1,
                    reason: format!("loss_d {} loss_g {}", r.loss_d, r.loss_g),
                    last_good: Box::new(last_good),
                })
            }
            Err(GanError::NonFinite(what)) => {
                return Err(GanError::Diverged {
                    epoch: global + 1,
                    reason: format!("non-finite {what}"),
                    last_good: Box::new(last_good),
                })
            }
            Err(e) => return Err(e),
        };
        history.wall_secs.push(start.elapsed().as_secs_f64());
        last_good = t.gan.flatten();
        sink.epoch_end(t.gan, &record)?;
        history.records.push(record);
    }
    Ok(history)
}
