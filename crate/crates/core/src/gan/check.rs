//! Penalty oracles: the gradient penalty of small critics against nested
//! central differences, which never touch the double-backward path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::rel_error;
use crate::autodiff::{Array, Graph, Tensor};

use super::losses::{gradient_penalty, wgan_critic_loss};
use super::GanError;

const INNER_H: f64 = 1e-5;
const OUTER_H: f64 = 1e-4;

/// Two-layer critic `D(x) = leaky_relu(x·W1 + b1)·w2` on flat inputs.
#[derive(Clone, Debug)]
pub struct ToyCritic {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
}

impl ToyCritic {
    pub fn random(rng: &mut ChaCha8Rng, inputs: usize, hidden: usize) -> Self {
        let mut u = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        ToyCritic {
            w1: u(&[inputs, hidden]),
            b1: u(&[hidden]),
            w2: u(&[hidden, 1]),
        }
    }

    fn weights(&self) -> [&Array; 3] {
        [&self.w1, &self.b1, &self.w2]
    }

    fn with(&self, which: usize, value: Array) -> ToyCritic {
        let mut c = self.clone();
        *[&mut c.w1, &mut c.b1, &mut c.w2][which] = value;
        c
    }

    fn apply(g: &mut Graph, w: &[Tensor], x: Tensor) -> Result<Tensor, GanError> {
        let h = g.linear(x, w[0], Some(w[1]))?;
        let h = g.leaky_relu(h, 0.2);
        let s = g.linear(h, w[2], None)?;
        Ok(g.reshape(s, &[g.shape(s)[0]])?)
    }

    /// Per-sample scores, forward only.
    pub fn scores(&self, x: &Array) -> Result<Vec<f64>, GanError> {
        let mut g = Graph::new();
        let w: Vec<Tensor> = self.weights().iter().map(|a| g.constant((*a).clone())).collect();
        let xt = g.constant(x.clone());
        let s = Self::apply(&mut g, &w, xt)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Critic loss `mean D(fake) − mean D(real) + λ·penalty` on the graph,
    /// with the weights as trainable leaves.
    pub fn loss_with_grads(
        &self,
        real: &Array,
        fake: &Array,
        eps: &[f64],
        lambda: f64,
    ) -> Result<(f64, Vec<Array>), GanError> {
        let mut g = Graph::new();
        let w: Vec<Tensor> = self.weights().iter().map(|a| g.param((*a).clone())).collect();
        let mut critic = |g: &mut Graph, x: Tensor| Self::apply(g, &w, x);
        let pen = gradient_penalty(&mut g, real, fake, eps, &mut critic)?;
        let rt = g.constant(real.clone());
        let ft = g.constant(fake.clone());
        let sr = Self::apply(&mut g, &w, rt)?;
        let sf = Self::apply(&mut g, &w, ft)?;
        let loss = wgan_critic_loss(&mut g, sr, sf, Some(pen), lambda)?.total;
        let grads = g.backward(loss)?;
        let out = w
            .iter()
            .map(|&t| grads.get(t).cloned().unwrap_or_else(|| Array::zeros(g.shape(t))))
            .collect();
        Ok((g.value(loss).item(), out))
    }

    /// The same loss with every input gradient taken by central differences.
    pub fn loss_numeric(&self, real: &Array, fake: &Array, eps: &[f64], lambda: f64) -> Result<f64, GanError> {
        let n = real.shape()[0];
        let per = real.len() / n;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let adv = mean(&self.scores(fake)?) - mean(&self.scores(real)?);
        let mut penalty = 0.0;
        for (i, &e) in eps.iter().enumerate().take(n) {
            let xhat: Vec<f64> = (0..per)
                .map(|j| e * real.data()[i * per + j] + (1.0 - e) * fake.data()[i * per + j])
                .collect();
            let mut sq = 0.0;
            for j in 0..per {
                let mut up = xhat.clone();
                up[j] += INNER_H;
                let mut down = xhat.clone();
                down[j] -= INNER_H;
                let batch = Array::new(vec![2, per], [up, down].concat());
                let s = self.scores(&batch)?;
                let d = (s[0] - s[1]) / (2.0 * INNER_H);
                sq += d * d;
            }
            penalty += (sq.sqrt() - 1.0).powi(2);
        }
        Ok(adv + lambda * penalty / n as f64)
    }
}

/// Worst relative error, over `fixtures` random toy critics and batches,
/// between the full reverse-mode weight gradient of the penalized critic loss and
/// nested central differences.
pub fn penalty_gradient_check(fixtures: u64, lambda: f64) -> Result<f64, GanError> {
    let mut worst: f64 = 0.0;
    for seed in 0..fixtures {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9E37 + seed);
        let (n, d, h) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..6));
        let critic = ToyCritic::random(&mut rng, d, h);
        let mut batch = || Array::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (real, fake) = (batch(), batch());
        let eps: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, analytic) = critic.loss_with_grads(&real, &fake, &eps, lambda)?;
        let mut numeric = Vec::new();
        for (k, base) in critic.weights().into_iter().enumerate() {
            for i in 0..base.len() {
                let mut up = base.clone();
                up.data_mut()[i] += OUTER_H;
                let mut down = base.clone();
                down.data_mut()[i] -= OUTER_H;
                let fu = critic.with(k, up).loss_numeric(&real, &fake, &eps, lambda)?;
                let fd = critic.with(k, down).loss_numeric(&real, &fake, &eps, lambda)?;
                numeric.push((fu - fd) / (2.0 * OUTER_H));
            }
        }
        let analytic: Vec<f64> = analytic.iter().flat_map(|a| a.data().iter().copied()).collect();
        let len = analytic.len();
        worst = worst.max(rel_error(
            &Array::new(vec![len], analytic),
            &Array::new(vec![len], numeric),
        ));
    }
    Ok(worst)
}

/// Penalty of the linear critic `D(x) = w·x` on `n` random interpolates,
/// scaled by `lambda`. Its input gradient is `w` everywhere, so this equals
/// `λ·(‖w‖ − 1)²`.
pub fn linear_critic_penalty(w: &[f64], n: usize, lambda: f64, seed: u64) -> Result<f64, GanError> {
    let d = w.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = || Array::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (real, fake) = (batch(), batch());
    let eps: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let mut g = Graph::new();
    let wt = g.param(Array::new(vec![d, 1], w.to_vec()));
    let mut critic = |g: &mut Graph, x: Tensor| -> Result<Tensor, GanError> {
        let s = g.matmul(x, wt)?;
        Ok(g.reshape(s, &[n])?)
    };
    let pen = gradient_penalty(&mut g, &real, &fake, &eps, &mut critic)?;
    Ok(lambda * g.value(pen).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_penalty_closed_form() {
        let p = linear_critic_penalty(&[3.0, 4.0], 5, 3.0, 1).unwrap();
        assert_eq!(p, 48.0);
    }

    #[test]
    fn nested_differences_agree_on_one_fixture() {
        assert!(penalty_gradient_check(1, 3.0).unwrap() < 1e-4);
    }
}
