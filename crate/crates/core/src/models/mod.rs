//! Model zoo: the class-conditioned generator, CNN and ViT critics, small
//! classifiers, and flat parameter serialization.

mod cnn;
mod generator;
mod layers;
pub mod params;
mod vit;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, Tensor};
use crate::rng::{rng_for, TAG_INIT};

pub use layers::Pass;
pub use params::{hex, Binding, LayoutEntry, Param, ParamId, ParamStore, ParamVector};
pub use vit::seq_len;

use cnn::CnnNet;
use generator::GeneratorNet;
use layers::Init;
use vit::VitNet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parameter layout mismatch at `{param}`: {detail}")]
    LayoutMismatch { param: String, detail: String },
    #[error("parameter vector checksum mismatch")]
    ChecksumMismatch,
    #[error("parameter vector: {0}")]
    Format(String),
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Generator,
    DiscCnn,
    DiscVit,
    ClassifierCnn,
    ClassifierVit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Batch,
    Layer,
    None,
}

/// Architecture description. Fields that do not apply to a kind are ignored
/// by it (e.g. `patch` for CNNs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Channel count (CNNs, generator) or embedding width (ViT).
    pub width: usize,
    /// Encoder blocks (ViT).
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub acgan_head: bool,
    pub norm: Norm,
    /// Append a learned per-class channel to the input (conditional critics).
    pub label_channel: bool,
    pub residual: bool,
    pub dropout: f64,
    /// Penultimate feature width (classifiers).
    pub feature_dim: usize,
}

impl ModelSpec {
    /// Desk-scale defaults for `kind`.
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            image_size: 16,
            channels: 1,
            num_classes: 2,
            latent_dim: 64,
            width: 16,
            depth: 2,
            heads: 4,
            patch: 4,
            acgan_head: false,
            norm: Norm::Layer,
            label_channel: false,
            residual: false,
            dropout: if kind == ModelKind::Generator { 0.1 } else { 0.0 },
            feature_dim: 32,
        }
    }

    pub fn is_vit(&self) -> bool {
        matches!(self.kind, ModelKind::DiscVit | ModelKind::ClassifierVit)
    }

    pub fn is_critic(&self) -> bool {
        matches!(self.kind, ModelKind::DiscCnn | ModelKind::DiscVit)
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.kind, ModelKind::ClassifierCnn | ModelKind::ClassifierVit)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.image_size == 0 || self.channels == 0 || self.width == 0 {
            return bad("image_size, channels and width must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.acgan_head && self.num_classes < 2 {
            return bad(format!("acgan_head needs num_classes >= 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.kind {
            ModelKind::Generator => {
                if !self.image_size.is_multiple_of(2) {
                    return bad(format!("generator image_size {} must be even", self.image_size));
                }
                if self.latent_dim == 0 {
                    return bad("latent_dim must be positive".into());
                }
            }
            ModelKind::DiscCnn | ModelKind::ClassifierCnn => {
                if !self.image_size.is_multiple_of(4) {
                    return bad(format!("CNN image_size {} must be divisible by 4", self.image_size));
                }
            }
            ModelKind::DiscVit | ModelKind::ClassifierVit => {
                if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
                    return bad(format!(
                        "image_size {} is not divisible by patch {}",
                        self.image_size, self.patch
                    ));
                }
                if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
                    return bad(format!("width {} is not divisible by heads {}", self.width, self.heads));
                }
                if self.depth == 0 {
                    return bad("depth must be at least 1".into());
                }
            }
        }
        if self.is_classifier() && (self.num_classes < 2 || self.feature_dim == 0) {
            return bad("classifiers need num_classes >= 2 and feature_dim > 0".into());
        }
        Ok(())
    }
}

/// Critic / classifier outputs. `score` is one raw value per sample.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub score: Option<Tensor>,
    pub class_logits: Option<Tensor>,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
enum Arch {
    Generator(GeneratorNet),
    Cnn(CnnNet),
    Vit(VitNet),
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    arch: Arch,
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, rng_for(seed, &[TAG_INIT]));
        let arch = match spec.kind {
            ModelKind::Generator => Arch::Generator(GeneratorNet::new(&mut init, spec)),
            ModelKind::DiscCnn | ModelKind::ClassifierCnn => Arch::Cnn(CnnNet::new(&mut init, spec)),
            ModelKind::DiscVit | ModelKind::ClassifierVit => Arch::Vit(VitNet::new(&mut init, spec)),
        };
        Ok(Model {
            spec: spec.clone(),
            store,
            arch,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn flatten(&self) -> ParamVector {
        self.store.flatten()
    }

    pub fn unflatten(&mut self, pv: &ParamVector) -> Result<(), ModelError> {
        self.store.unflatten(pv)
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Binding {
        self.store.bind(g, requires_grad)
    }

    pub fn has_batch_norm(&self) -> bool {
        match &self.arch {
            Arch::Generator(_) => true,
            Arch::Cnn(c) => c.has_batch_norm(),
            Arch::Vit(_) => false,
        }
    }

    /// Folds a training pass's batch statistics into the running averages.
    pub fn apply_pass(&mut self, pass: &Pass) {
        pass.apply_to(&mut self.store);
    }

    /// Id of the generator's class-embedding table.
    pub fn class_embedding(&self) -> Option<ParamId> {
        match &self.arch {
            Arch::Generator(net) => Some(net.embed().table()),
            _ => None,
        }
    }

    /// Generator forward. `labels = None` runs the unconditioned path.
    pub fn generate(
        &self,
        g: &mut Graph,
        p: &Binding,
        pass: &mut Pass,
        noise: Tensor,
        labels: Option<&[usize]>,
    ) -> Result<Tensor, ModelError> {
        let Arch::Generator(net) = &self.arch else {
            return Err(ModelError::Unsupported(format!("{:?} cannot generate", self.spec.kind)));
        };
        let shape = g.shape(noise);
        if shape.len() != 2 || shape[1] != self.spec.latent_dim {
            return Err(ModelError::InvalidInput(format!(
                "noise must be [batch, {}], got {shape:?}",
                self.spec.latent_dim
            )));
        }
        net.forward(g, p, &self.store, pass, noise, labels)
    }

    /// Critic or classifier forward over `[N, C, S, S]` images.
    pub fn heads(
        &self,
        g: &mut Graph,
        p: &Binding,
        pass: &mut Pass,
        x: Tensor,
        labels: &[usize],
    ) -> Result<Heads, ModelError> {
        let s = &self.spec;
        let expect = [s.channels, s.image_size, s.image_size];
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != expect {
            return Err(ModelError::InvalidInput(format!(
                "expected [batch, {}, {}, {}] images, got {shape:?}",
                s.channels, s.image_size, s.image_size
            )));
        }
        match &self.arch {
            Arch::Generator(_) => Err(ModelError::Unsupported("generator has no critic heads".into())),
            Arch::Cnn(net) => net.forward(g, p, &self.store, pass, x, labels),
            Arch::Vit(net) => net.forward(g, p, pass, x, labels),
        }
    }

    /// Evaluation-mode samples for a batch of noise rows and labels.
    pub fn sample(&self, noise: &Array, labels: &[usize]) -> Result<Array, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let z = g.constant(noise.clone());
        let mut pass = Pass::eval();
        let y = self.generate(&mut g, &p, &mut pass, z, Some(labels))?;
        Ok(g.value(y).clone())
    }

    /// Evaluation-mode features and class logits of a classifier, in chunks.
    pub fn embed(&self, images: &Array, chunk: usize) -> Result<(Array, Array), ModelError> {
        if !self.spec.is_classifier() {
            return Err(ModelError::Unsupported("only classifiers embed images".into()));
        }
        let shape = images.shape();
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let m = chunk.min(n - start);
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let mut s = shape.to_vec();
            s[0] = m;
            let x = g.constant(Array::new(s, images.data()[start * per..(start + m) * per].to_vec()));
            let mut pass = Pass::eval();
            let h = self.heads(&mut g, &p, &mut pass, x, &vec![0; m])?;
            feats.extend_from_slice(g.value(h.features).data());
            logits.extend_from_slice(g.value(h.class_logits.expect("classifier head")).data());
            start += m;
        }
        let k = self.spec.num_classes;
        Ok((
            Array::new(vec![n, self.spec.feature_dim], feats),
            Array::new(vec![n, k], logits),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, d: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::new(
            vec![n, d],
            (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
    }

    #[test]
    fn generator_shape_and_range() {
        let spec = ModelSpec::new(ModelKind::Generator);
        let m = Model::build(&spec, 1).unwrap();
        let labels = [0, 1, 0, 1, 1, 0, 0, 1];
        let out = m.sample(&noise(8, 64, 2), &labels).unwrap();
        assert_eq!(out.shape(), &[8, 1, 16, 16]);
        assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_bad_label() {
        let m = Model::build(&ModelSpec::new(ModelKind::Generator), 1).unwrap();
        let err = m.sample(&noise(2, 64, 2), &[0, 2]).unwrap_err();
        assert!(matches!(err, ModelError::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn unit_embedding_equals_unconditioned() {
        let mut m = Model::build(&ModelSpec::new(ModelKind::Generator), 4).unwrap();
        let id = m.class_embedding().unwrap();
        m.store_mut().get_mut(id).data_mut().fill(1.0);
        let z = noise(3, 64, 5);
        let run = |labels: Option<&[usize]>| {
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let zt = g.constant(z.clone());
            let y = m.generate(&mut g, &p, &mut Pass::eval(), zt, labels).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(Some(&[0, 1, 1])), run(None));
    }

    #[test]
    fn vit_sequence_length() {
        assert_eq!(seq_len(16, 4), 17);
        let spec = ModelSpec::new(ModelKind::DiscVit);
        let m = Model::build(&spec, 0).unwrap();
        let pos = m.store().find("pos_embed").unwrap();
        assert_eq!(m.store().get(pos).shape(), &[1, 17, 16]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = ModelSpec::new(ModelKind::DiscVit);
        s.patch = 5;
        assert!(Model::build(&s, 0).is_err());
        let mut s = ModelSpec::new(ModelKind::DiscCnn);
        s.acgan_head = true;
        s.num_classes = 1;
        assert!(Model::build(&s, 0).is_err());
    }

    #[test]
    fn acgan_critic_has_two_heads() {
        for kind in [ModelKind::DiscCnn, ModelKind::DiscVit] {
            let mut s = ModelSpec::new(kind);
            s.acgan_head = true;
            let m = Model::build(&s, 3).unwrap();
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let x = g.constant(Array::full(&[5, 1, 16, 16], 0.5));
            let h = m.heads(&mut g, &p, &mut Pass::eval(), x, &[0; 5]).unwrap();
            assert_eq!(g.shape(h.score.unwrap()), &[5]);
            assert_eq!(g.shape(h.class_logits.unwrap()), &[5, 2]);
        }
    }

    #[test]
    fn build_is_deterministic() {
        for kind in [
            ModelKind::Generator,
            ModelKind::DiscCnn,
            ModelKind::DiscVit,
            ModelKind::ClassifierCnn,
            ModelKind::ClassifierVit,
        ] {
            let s = ModelSpec::new(kind);
            assert_eq!(
                Model::build(&s, 9).unwrap().flatten(),
                Model::build(&s, 9).unwrap().flatten()
            );
            assert_ne!(
                Model::build(&s, 9).unwrap().flatten(),
                Model::build(&s, 10).unwrap().flatten()
            );
        }
    }
}
