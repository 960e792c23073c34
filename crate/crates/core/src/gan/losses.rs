//! The three adversarial objectives, written over raw critic scores so they
//! can be evaluated against any critic.

use crate::autodiff::{Array, Graph, Tensor};

use super::GanError;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// A loss and the pieces it was summed from.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Tensor,
    pub adversarial: Tensor,
    pub auxiliary: Option<Tensor>,
    /// Unweighted `mean((‖∇‖ − 1)²)`; `total` includes it times λ.
    pub penalty: Option<Tensor>,
}

fn nonempty(g: &Graph, t: Tensor) -> Result<usize, GanError> {
    let n = g.shape(t).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(GanError::EmptyBatch);
    }
    Ok(n)
}

/// Mean BCE of `sigmoid(scores)` against a constant target.
pub fn bce_on_scores(g: &mut Graph, scores: Tensor, target: f64) -> Result<Tensor, GanError> {
    nonempty(g, scores)?;
    let probs = g.sigmoid(scores);
    let t = Array::full(g.shape(scores), target);
    Ok(g.bce(probs, &t, BCE_EPS)?)
}

pub fn cgan_critic_loss(g: &mut Graph, real: Tensor, fake: Tensor) -> Result<LossParts, GanError> {
    let r = bce_on_scores(g, real, 1.0)?;
    let f = bce_on_scores(g, fake, 0.0)?;
    let total = g.add(r, f)?;
    Ok(LossParts {
        total,
        adversarial: total,
        auxiliary: None,
        penalty: None,
    })
}

pub fn cgan_generator_loss(g: &mut Graph, fake: Tensor) -> Result<LossParts, GanError> {
    let total = bce_on_scores(g, fake, 1.0)?;
    Ok(LossParts {
        total,
        adversarial: total,
        auxiliary: None,
        penalty: None,
    })
}

/// Adversarial BCE plus class cross-entropy on both real and generated
/// samples, all against the conditioning labels.
pub fn acgan_critic_loss(
    g: &mut Graph,
    real: Tensor,
    real_logits: Tensor,
    fake: Tensor,
    fake_logits: Tensor,
    labels: &[usize],
) -> Result<LossParts, GanError> {
    let adv = cgan_critic_loss(g, real, fake)?.total;
    let cr = g.cross_entropy(real_logits, labels)?;
    let cf = g.cross_entropy(fake_logits, labels)?;
    let aux = g.add(cr, cf)?;
    let total = g.add(adv, aux)?;
    Ok(LossParts {
        total,
        adversarial: adv,
        auxiliary: Some(aux),
        penalty: None,
    })
}

pub fn acgan_generator_loss(
    g: &mut Graph,
    fake: Tensor,
    fake_logits: Tensor,
    labels: &[usize],
) -> Result<LossParts, GanError> {
    let adv = bce_on_scores(g, fake, 1.0)?;
    let aux = g.cross_entropy(fake_logits, labels)?;
    let total = g.add(adv, aux)?;
    Ok(LossParts {
        total,
        adversarial: adv,
        auxiliary: Some(aux),
        penalty: None,
    })
}

/// `mean((‖∇ₓ D(x̂)‖₂ − 1)²)` with `x̂ = ε·real + (1 − ε)·fake`, one ε per
/// sample. The result stays differentiable with respect to the critic's
/// weights.
pub fn gradient_penalty(
    g: &mut Graph,
    real: &Array,
    fake: &Array,
    eps: &[f64],
    critic: &mut dyn FnMut(&mut Graph, Tensor) -> Result<Tensor, GanError>,
) -> Result<Tensor, GanError> {
    let shape = real.shape().to_vec();
    if fake.shape() != shape.as_slice() {
        return Err(GanError::Config(format!(
            "real {shape:?} and fake {:?} batches differ in shape",
            fake.shape()
        )));
    }
    let n = *shape.first().ok_or(GanError::EmptyBatch)?;
    if n == 0 {
        return Err(GanError::EmptyBatch);
    }
    if eps.len() != n {
        return Err(GanError::Config(format!(
            "{} interpolation weights for {n} samples",
            eps.len()
        )));
    }
    let per = real.len() / n;
    let mut mixed = Vec::with_capacity(real.len());
    for (i, &e) in eps.iter().enumerate() {
        let r = &real.data()[i * per..(i + 1) * per];
        let f = &fake.data()[i * per..(i + 1) * per];
        mixed.extend(r.iter().zip(f).map(|(a, b)| e * a + (1.0 - e) * b));
    }
    let xhat = g.leaf(Array::new(shape, mixed), true);
    let scores = critic(g, xhat)?;
    let total = g.sum(scores);
    let grad = g.grad_as_graph(total, xhat)?;
    let flat = g.reshape(grad, &[n, per])?;
    let sq = g.mul(flat, flat)?;
    let sq = g.sum_to(sq, &[n, 1])?;
    let norm = g.sqrt(sq);
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.mul(dev, dev)?;
    Ok(g.mean(dev2))
}

/// `mean D(fake) − mean D(real) + λ·penalty`.
pub fn wgan_critic_loss(
    g: &mut Graph,
    real: Tensor,
    fake: Tensor,
    penalty: Option<Tensor>,
    lambda_gp: f64,
) -> Result<LossParts, GanError> {
    nonempty(g, real)?;
    nonempty(g, fake)?;
    let mr = g.mean(real);
    let mf = g.mean(fake);
    let adv = g.sub(mf, mr)?;
    let total = match penalty {
        Some(p) => {
            let w = g.scale(p, lambda_gp);
            g.add(adv, w)?
        }
        None => adv,
    };
    Ok(LossParts {
        total,
        adversarial: adv,
        auxiliary: None,
        penalty,
    })
}

pub fn wgan_generator_loss(g: &mut Graph, fake: Tensor) -> Result<LossParts, GanError> {
    nonempty(g, fake)?;
    let m = g.mean(fake);
    let total = g.scale(m, -1.0);
    Ok(LossParts {
        total,
        adversarial: total,
        auxiliary: None,
        penalty: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn half_probability_losses() {
        let mut g = Graph::new();
        let real = g.constant(Array::zeros(&[4]));
        let fake = g.constant(Array::zeros(&[4]));
        let d = cgan_critic_loss(&mut g, real, fake).unwrap().total;
        let gl = cgan_generator_loss(&mut g, fake).unwrap().total;
        assert!((g.value(d).item() - 2.0 * LN2).abs() < 1e-15);
        assert!((g.value(gl).item() - LN2).abs() < 1e-15);
    }

    #[test]
    fn perfect_critic_loss_near_zero() {
        let mut g = Graph::new();
        let real = g.constant(Array::full(&[3], 60.0));
        let fake = g.constant(Array::full(&[3], -60.0));
        let d = cgan_critic_loss(&mut g, real, fake).unwrap().total;
        assert!(g.value(d).item() < 1e-6);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut g = Graph::new();
        let e = g.constant(Array::zeros(&[0]));
        assert!(matches!(cgan_generator_loss(&mut g, e), Err(GanError::EmptyBatch)));
    }

    #[test]
    fn acgan_uniform_logits_add_ln2_per_term() {
        let mut g = Graph::new();
        let s = g.constant(Array::zeros(&[2]));
        let logits = g.constant(Array::zeros(&[2, 2]));
        let parts = acgan_critic_loss(&mut g, s, logits, s, logits, &[0, 1]).unwrap();
        let aux = g.value(parts.auxiliary.unwrap()).item();
        assert!((aux - 2.0 * LN2).abs() < 1e-15);
        let gp = acgan_generator_loss(&mut g, s, logits, &[1, 0]).unwrap();
        assert!((g.value(gp.auxiliary.unwrap()).item() - LN2).abs() < 1e-15);
    }

    #[test]
    fn acgan_confident_classes_vanish() {
        let mut g = Graph::new();
        let s = g.constant(Array::zeros(&[2]));
        let logits = g.constant(Array::new(vec![2, 2], vec![50.0, -50.0, -50.0, 50.0]));
        let gp = acgan_generator_loss(&mut g, s, logits, &[0, 1]).unwrap();
        assert!(g.value(gp.auxiliary.unwrap()).item() < 1e-12);
    }

    #[test]
    fn wgan_equal_scores_zero_critic_term() {
        let mut g = Graph::new();
        let r = g.constant(Array::full(&[5], 0.7));
        let parts = wgan_critic_loss(&mut g, r, r, None, 3.0).unwrap();
        assert_eq!(g.value(parts.total).item(), 0.0);
    }

    #[test]
    fn linear_critic_penalty_is_48() {
        let mut g = Graph::new();
        let w = g.param(Array::new(vec![1, 2], vec![3.0, 4.0]));
        let real = Array::new(vec![3, 2], vec![0.1, 0.9, 0.4, 0.2, 0.0, 1.0]);
        let fake = Array::new(vec![3, 2], vec![0.5, 0.5, 0.3, 0.8, 0.7, 0.1]);
        let mut critic = |g: &mut Graph, x: Tensor| -> Result<Tensor, GanError> {
            let p = g.mul(x, w)?;
            let s = g.sum_to(p, &[3, 1])?;
            Ok(g.reshape(s, &[3])?)
        };
        let pen = gradient_penalty(&mut g, &real, &fake, &[0.2, 0.5, 0.9], &mut critic).unwrap();
        let lam = g.scale(pen, 3.0);
        assert_eq!(g.value(lam).item(), 48.0);
    }
}
