//! Classifier training with augmentation and early stopping, and the
//! composed-training-set harness built on it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph};
use crate::data::{augment, AugmentPolicy, LabeledImageSet, Normalization};
use crate::gan::{Adam, AdamConfig};
use crate::models::{Model, ModelSpec, Pass};
use crate::rng::{derive_seed, rng_for, TAG_EVAL};

use super::MetricsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    OnlyReal,
    OnlyGenerated,
    GeneratedReal,
}

impl Composition {
    pub const ALL: [Composition; 3] = [
        Composition::OnlyReal,
        Composition::OnlyGenerated,
        Composition::GeneratedReal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Composition::OnlyReal => "only-real",
            Composition::OnlyGenerated => "only-generated",
            Composition::GeneratedReal => "generated+real",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub composition: Option<Composition>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// F1 of class 1.
    pub f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ClassificationReport {
    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        classes: usize,
        composition: Option<Composition>,
    ) -> Result<Self, MetricsError> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(MetricsError::Invalid(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if classes < 2 {
            return Err(MetricsError::Invalid("need at least 2 classes".into()));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(MetricsError::Invalid(format!(
                    "class id out of range for {classes} classes"
                )));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion, composition))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>, composition: Option<Composition>) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let tp = confusion[1][1] as f64;
        let fp: f64 = (0..confusion.len())
            .filter(|&t| t != 1)
            .map(|t| confusion[t][1] as f64)
            .sum();
        let fn_: f64 = (0..confusion.len())
            .filter(|&p| p != 1)
            .map(|p| confusion[1][p] as f64)
            .sum();
        let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassificationReport {
            composition,
            accuracy: correct as f64 / total as f64,
            precision,
            recall,
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    /// Fraction of the training composition held out for early stopping.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            max_epochs: 30,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            patience: 5,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// A trained classifier with the input normalization it was trained under.
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub model: Model,
    pub normalization: Normalization,
    pub epochs_run: usize,
    pub best_holdout_loss: f64,
}

impl TrainedClassifier {
    fn normalized(&self, images: &Array) -> Result<Array, MetricsError> {
        let mut x = images.clone();
        self.normalization.apply(&mut x)?;
        Ok(x)
    }

    /// Penultimate-layer embeddings `[N, feature_dim]`.
    pub fn features(&self, images: &Array) -> Result<Array, MetricsError> {
        Ok(self.model.embed(&self.normalized(images)?, 64)?.0)
    }

    pub fn predict(&self, images: &Array) -> Result<Vec<usize>, MetricsError> {
        let (_, logits) = self.model.embed(&self.normalized(images)?, 64)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn evaluate(
        &self,
        test: &LabeledImageSet,
        composition: Option<Composition>,
    ) -> Result<ClassificationReport, MetricsError> {
        let pred = self.predict(&test.images)?;
        ClassificationReport::from_predictions(&test.labels, &pred, test.num_classes(), composition)
    }
}

fn mean_loss(model: &Model, images: &Array, labels: &[usize]) -> Result<f64, MetricsError> {
    let (_, logits) = model.embed(images, 64)?;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let ce = g.cross_entropy(l, labels)?;
    Ok(g.value(ce).item())
}

/// Trains a classifier on `train`, augmenting every batch with `policy` and
/// stopping early on the loss of a held-out slice. The best weights by
/// held-out loss are returned. Inputs are normalized with
/// `policy.normalization`, or with `train`'s own statistics when unset.
pub fn train_classifier(
    spec: &ModelSpec,
    train: &LabeledImageSet,
    policy: &AugmentPolicy,
    cfg: &ClassifierConfig,
) -> Result<TrainedClassifier, MetricsError> {
    if !spec.is_classifier() {
        return Err(MetricsError::Invalid(format!("{:?} is not a classifier", spec.kind)));
    }
    let counts = train.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(MetricsError::Invalid(format!(
            "class `{}` is absent from the training set",
            train.class_names[c]
        )));
    }
    if cfg.batch_size < 2 || cfg.max_epochs == 0 || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(MetricsError::Invalid("classifier config out of range".into()));
    }
    let normalization = policy
        .normalization
        .clone()
        .unwrap_or_else(|| Normalization::from_set(train));
    let mut policy = policy.clone();
    policy.normalization = Some(normalization.clone());

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[TAG_EVAL]));
    let n_hold = ((train.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(train.len().saturating_sub(2));
    let (hold_idx, fit_idx) = order.split_at(n_hold);
    let (mut hold_x, hold_y) = train.batch(hold_idx);
    normalization.apply(&mut hold_x)?;

    let mut model = Model::build(spec, derive_seed(cfg.seed, &[TAG_EVAL, 1]))?;
    let mut opt = Adam::new(model.store(), cfg.adam);
    let mut best = (f64::INFINITY, model.flatten());
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run += 1;
        let mut rng = rng_for(cfg.seed, &[TAG_EVAL, 2, epoch as u64]);
        let mut idx = fit_idx.to_vec();
        idx.shuffle(&mut rng);
        for (b, batch) in idx.chunks(cfg.batch_size).filter(|b| b.len() >= 2).enumerate() {
            let (x, y) = train.batch(batch);
            let x = augment(
                &x,
                &policy,
                derive_seed(cfg.seed, &[TAG_EVAL, 3, epoch as u64, b as u64]),
            )?;
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let xt = g.constant(x);
            let mut pass = Pass::train(derive_seed(cfg.seed, &[TAG_EVAL, 4, epoch as u64, b as u64]));
            let h = model.heads(&mut g, &p, &mut pass, xt, &y)?;
            let loss = g.cross_entropy(h.class_logits.expect("classifier head"), &y)?;
            let grads = g.backward(loss)?;
            opt.step(model.store_mut(), &p, &grads)
                .map_err(|e| MetricsError::Invalid(format!("classifier training: {e}")))?;
            model.apply_pass(&pass);
        }
        if hold_idx.is_empty() {
            best = (f64::NAN, model.flatten());
            continue;
        }
        let loss = mean_loss(&model, &hold_x, &hold_y)?;
        if loss < best.0 {
            best = (loss, model.flatten());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.unflatten(&best.1)?;
    Ok(TrainedClassifier {
        model,
        normalization,
        epochs_run,
        best_holdout_loss: best.0,
    })
}

/// Trains on the requested composition of real and generated data and
/// scores on `test`. Normalization statistics come from the real training
/// set for every composition so rows are comparable.
pub fn augmented_classification(
    real: &LabeledImageSet,
    generated: &LabeledImageSet,
    test: &LabeledImageSet,
    composition: Composition,
    spec: &ModelSpec,
    policy: &AugmentPolicy,
    cfg: &ClassifierConfig,
) -> Result<ClassificationReport, MetricsError> {
    let train = match composition {
        Composition::OnlyReal => real.clone(),
        Composition::OnlyGenerated => generated.clone(),
        Composition::GeneratedReal => real.concat(generated)?,
    };
    let mut policy = policy.clone();
    if policy.normalization.is_none() {
        policy.normalization = Some(Normalization::from_set(real));
    }
    let clf = train_classifier(spec, &train, &policy, cfg)?;
    clf.evaluate(test, Some(composition))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_arithmetic() {
        let r = ClassificationReport::from_confusion(vec![vec![2, 1], vec![1, 2]], None);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 1, 0, 1];
        let r = ClassificationReport::from_predictions(&y, &y, 2, None).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 5);
    }
}
