//! CGAN, ACGAN and WGAN-GP objectives, Adam, and the adversarial training
//! loop shared by centralized runs and federated clients.

mod adam;
pub mod check;
pub mod losses;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError};
use crate::data::{DataError, LabeledImageSet};
use crate::models::{Model, ModelError, ModelKind, ModelSpec, ParamVector};
use crate::rng::{derive_seed, normal_array, rng_for, TAG_SAMPLE};

pub use adam::{Adam, AdamConfig};
pub use losses::LossParts;
pub use train::{train, EpochRecord, EpochSink, GanConfig, History, NoSink};

#[derive(Debug, Error)]
pub enum GanError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Weights at the end of the last completed epoch.
        last_good: Box<ParamVector>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Cgan,
    Acgan,
    WganGp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Cgan => "cgan",
            Variant::Acgan => "acgan",
            Variant::WganGp => "wgan-gp",
        }
    }

    /// Critic spec with the conditioning mechanism this objective needs:
    /// a class head for ACGAN, an input label channel otherwise.
    pub fn critic_spec(self, base: &ModelSpec) -> ModelSpec {
        let mut s = base.clone();
        s.acgan_head = self == Variant::Acgan;
        s.label_channel = self != Variant::Acgan;
        s
    }
}

/// A generator/critic pair.
#[derive(Debug, Clone)]
pub struct Gan {
    variant: Variant,
    pub generator: Model,
    pub critic: Model,
}

impl Gan {
    pub fn new(variant: Variant, gen: &ModelSpec, critic: &ModelSpec, seed: u64) -> Result<Gan, GanError> {
        if gen.kind != ModelKind::Generator {
            return Err(GanError::Config(format!("generator spec has kind {:?}", gen.kind)));
        }
        if !critic.is_critic() {
            return Err(GanError::Config(format!("critic spec has kind {:?}", critic.kind)));
        }
        if (gen.image_size, gen.channels, gen.num_classes) != (critic.image_size, critic.channels, critic.num_classes) {
            return Err(GanError::Config(
                "generator and critic disagree on image_size, channels or num_classes".into(),
            ));
        }
        match variant {
            Variant::Acgan if !critic.acgan_head => {
                return Err(GanError::Config("acgan needs a critic with a class head".into()))
            }
            Variant::Cgan | Variant::WganGp if !critic.label_channel => {
                return Err(GanError::Config(format!(
                    "{} needs a critic conditioned through a label channel",
                    variant.name()
                )))
            }
            _ => {}
        }
        let generator = Model::build(gen, derive_seed(seed, &[1]))?;
        let critic = Model::build(critic, derive_seed(seed, &[2]))?;
        if variant == Variant::WganGp && critic.has_batch_norm() {
            return Err(GanError::Config(
                "wgan-gp critic must not use batch-norm; the gradient penalty differentiates through it twice".into(),
            ));
        }
        Ok(Gan {
            variant,
            generator,
            critic,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Generator and critic weights as one vector (`g.*` then `d.*`).
    pub fn flatten(&self) -> ParamVector {
        ParamVector::concat(&[("g", &self.generator.flatten()), ("d", &self.critic.flatten())])
    }

    pub fn unflatten(&mut self, pv: &ParamVector) -> Result<(), GanError> {
        pv.verify().map_err(GanError::Model)?;
        self.generator.unflatten(&pv.split("g")?)?;
        self.critic.unflatten(&pv.split("d")?)?;
        Ok(())
    }
}

/// Class-balanced evaluation-mode samples: `n_per_class` images for every
/// class, class 0 first, labeled by their conditioning class.
pub fn generate_set(
    generator: &Model,
    n_per_class: usize,
    class_names: &[String],
    seed: u64,
) -> Result<LabeledImageSet, GanError> {
    let spec = generator.spec();
    if spec.kind != ModelKind::Generator {
        return Err(GanError::Config(format!("cannot sample from a {:?}", spec.kind)));
    }
    if class_names.len() != spec.num_classes {
        return Err(GanError::Config(format!(
            "{} class names for a {}-class generator",
            class_names.len(),
            spec.num_classes
        )));
    }
    let labels: Vec<usize> = (0..spec.num_classes)
        .flat_map(|c| std::iter::repeat_n(c, n_per_class))
        .collect();
    let mut rng = rng_for(seed, &[TAG_SAMPLE]);
    let noise = normal_array(&mut rng, &[labels.len(), spec.latent_dim]);
    let per = spec.channels * spec.image_size * spec.image_size;
    let mut pixels = Vec::with_capacity(labels.len() * per);
    for (start, chunk) in labels.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
        let z = Array::new(
            vec![chunk.len(), spec.latent_dim],
            noise.data()[start * spec.latent_dim..(start + chunk.len()) * spec.latent_dim].to_vec(),
        );
        pixels.extend_from_slice(generator.sample(&z, chunk)?.data());
    }
    let images = Array::new(
        vec![labels.len(), spec.channels, spec.image_size, spec.image_size],
        pixels,
    );
    Ok(LabeledImageSet::new(images, labels, class_names.to_vec(), "generated")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Norm;

    #[test]
    fn wgan_rejects_batch_norm_critic() {
        let g = ModelSpec::new(ModelKind::Generator);
        let mut d = Variant::WganGp.critic_spec(&ModelSpec::new(ModelKind::DiscCnn));
        d.norm = Norm::Batch;
        let err = Gan::new(Variant::WganGp, &g, &d, 0).unwrap_err();
        assert!(err.to_string().contains("batch-norm"), "{err}");
        d.norm = Norm::Layer;
        assert!(Gan::new(Variant::WganGp, &g, &d, 0).is_ok());
    }

    #[test]
    fn acgan_requires_class_head() {
        let g = ModelSpec::new(ModelKind::Generator);
        let d = Variant::Cgan.critic_spec(&ModelSpec::new(ModelKind::DiscCnn));
        assert!(Gan::new(Variant::Acgan, &g, &d, 0).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let g = ModelSpec::new(ModelKind::Generator);
        let d = Variant::Acgan.critic_spec(&ModelSpec::new(ModelKind::DiscVit));
        let a = Gan::new(Variant::Acgan, &g, &d, 1).unwrap();
        let mut b = Gan::new(Variant::Acgan, &g, &d, 2).unwrap();
        b.unflatten(&a.flatten()).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }
}
