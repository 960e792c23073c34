//! Central finite-difference gradient checking.
//!
//! Numerical gradients here use forward values only, so they are an
//! independent check on the reverse-mode path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::graph::{Graph, Result, Tensor};

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vanish.
pub fn rel_error(a: &Array, b: &Array) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of the scalar function `f` with respect to every
/// element of `inputs[which]`.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&[Array]) -> Result<f64>,
    inputs: &[Array],
    which: usize,
    h: f64,
) -> Result<Array> {
    let mut work = inputs.to_vec();
    let mut out = vec![0.0; inputs[which].len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let up = f(&work)?;
        work[which].data_mut()[i] = orig - h;
        let down = f(&work)?;
        work[which].data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Ok(Array::new(inputs[which].shape().to_vec(), out))
}

/// Compares reverse-mode and finite-difference gradients of
/// `sum(build(inputs) ⊙ R)` for a fixed random projection `R`, returning the
/// worst relative error over all inputs.
pub fn check_op(
    inputs: &[Array],
    h: f64,
    seed: u64,
    build: impl Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let mut projection: Option<Array> = None;
    let mut eval = |vals: &[Array], want_grads: bool| -> Result<(f64, Vec<Array>)> {
        let mut g = Graph::new();
        let ts: Vec<Tensor> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &ts)?;
        let r = projection
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = g.shape(out).to_vec();
                let n = g.value(out).len();
                Array::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())
            })
            .clone();
        let rt = g.constant(r);
        let p = g.mul(out, rt)?;
        let loss = g.sum(p);
        let v = g.value(loss).item();
        if !want_grads {
            return Ok((v, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let gs = ts
            .iter()
            .map(|&t| grads.get(t).cloned().unwrap_or_else(|| Array::zeros(g.shape(t))))
            .collect();
        Ok((v, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (which, a) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(&mut |vals| Ok(eval(vals, false)?.0), inputs, which, h)?;
        worst = worst.max(rel_error(a, &numeric));
    }
    Ok(worst)
}

/// Worst relative error of one operator over a fixture sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    /// 1 for gradients, 2 for gradients of gradients.
    pub order: u8,
    pub fixtures: u64,
    pub worst: f64,
}

const H: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values in ±[0.1, 1], away from the kinks of piecewise-linear ops.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Array::new(shape.to_vec(), values)
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// `s = Σ S ⊙ ∇ₓ₀ Σ R ⊙ build(x)`; worst error of `∂s/∂xᵢ` over inputs.
pub fn check_second_order(
    inputs: &[Array],
    h: f64,
    seed: u64,
    build: impl Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut projections: Option<(Array, Array)> = None;
    let mut eval = |vals: &[Array], grads: bool| -> Result<(f64, Vec<Array>)> {
        let mut g = Graph::new();
        let ts: Vec<Tensor> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &ts)?;
        let (r, s) = projections
            .get_or_insert_with(|| {
                let r = uniform(&mut rng, g.shape(out), 0.5, 1.5);
                let s = uniform(&mut rng, g.shape(ts[0]), 0.5, 1.5);
                (r, s)
            })
            .clone();
        let rt = g.constant(r);
        let p = g.mul(out, rt)?;
        let loss = g.sum(p);
        let gx = g.grad_as_graph(loss, ts[0])?;
        let st = g.constant(s);
        let q = g.mul(gx, st)?;
        let total = g.sum(q);
        let v = g.value(total).item();
        if !grads {
            return Ok((v, Vec::new()));
        }
        let gr = g.backward(total)?;
        let gs = ts
            .iter()
            .map(|&t| gr.get(t).cloned().unwrap_or_else(|| Array::zeros(g.shape(t))))
            .collect();
        Ok((v, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(&mut |v| Ok(eval(v, false)?.0), inputs, i, h)?;
        worst = worst.max(rel_error(a, &numeric));
    }
    Ok(worst)
}

struct Sweep {
    fixtures: u64,
    reports: Vec<OpReport>,
}

impl Sweep {
    fn first(
        &mut self,
        name: &str,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Array>,
        build: impl Fn(&mut Graph, &[Tensor]) -> Result<Tensor> + Copy,
    ) -> Result<()> {
        let mut worst: f64 = 0.0;
        for seed in 0..self.fixtures {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            worst = worst.max(check_op(&make(&mut rng), H, seed, build)?);
        }
        self.push(name, 1, worst);
        Ok(())
    }

    fn second(
        &mut self,
        name: &str,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Array>,
        build: impl Fn(&mut Graph, &[Tensor]) -> Result<Tensor> + Copy,
    ) -> Result<()> {
        let mut worst: f64 = 0.0;
        for seed in 0..self.fixtures {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 104_729 + name.len() as u64);
            worst = worst.max(check_second_order(&make(&mut rng), H, seed, build)?);
        }
        self.push(name, 2, worst);
        Ok(())
    }

    fn push(&mut self, name: &str, order: u8, worst: f64) {
        self.reports.push(OpReport {
            name: name.to_string(),
            order,
            fixtures: self.fixtures,
            worst,
        });
    }
}

/// Sweeps every differentiable operator (and a two-layer MLP) with
/// `fixtures` random cases each against central differences, then the
/// operators on the gradient-penalty path one order up.
pub fn operator_sweep(fixtures: u64) -> Result<Vec<OpReport>> {
    let mut s = Sweep {
        fixtures,
        reports: Vec::new(),
    };
    let pair = |rng: &mut ChaCha8Rng| {
        let d = dims(rng, 3);
        vec![uniform(rng, &d, -1.0, 1.0), uniform(rng, &d, -1.0, 1.0)]
    };
    let broadcast = |rng: &mut ChaCha8Rng| {
        let d = dims(rng, 3);
        vec![uniform(rng, &d, -1.0, 1.0), uniform(rng, &[1, d[1], 1], -1.0, 1.0)]
    };
    let any = |rng: &mut ChaCha8Rng| {
        let d = dims(rng, 2);
        vec![uniform(rng, &d, -2.0, 2.0)]
    };
    let kinked = |rng: &mut ChaCha8Rng| {
        let d = dims(rng, 2);
        vec![off_zero(rng, &d)]
    };
    let positive = |rng: &mut ChaCha8Rng| {
        let d = dims(rng, 2);
        vec![uniform(rng, &d, 0.2, 2.0)]
    };
    s.first("add", pair, |g, t| g.add(t[0], t[1]))?;
    s.first("sub", pair, |g, t| g.sub(t[0], t[1]))?;
    s.first("mul", pair, |g, t| g.mul(t[0], t[1]))?;
    s.first("add (broadcast)", broadcast, |g, t| g.add(t[0], t[1]))?;
    s.first("mul (broadcast)", broadcast, |g, t| g.mul(t[0], t[1]))?;
    s.first("scale", any, |g, t| Ok(g.scale(t[0], -1.7)))?;
    s.first("add_scalar", any, |g, t| Ok(g.add_scalar(t[0], 0.3)))?;
    s.first("pow", positive, |g, t| Ok(g.pow(t[0], 2.5)))?;
    s.first("sqrt", positive, |g, t| Ok(g.sqrt(t[0])))?;
    s.first("relu", kinked, |g, t| Ok(g.relu(t[0])))?;
    s.first("leaky_relu", kinked, |g, t| Ok(g.leaky_relu(t[0], 0.2)))?;
    s.first("sigmoid", any, |g, t| Ok(g.sigmoid(t[0])))?;
    s.first("gelu", any, |g, t| Ok(g.gelu(t[0])))?;
    s.first("softmax", any, |g, t| g.softmax(t[0]))?;
    s.first("sum", any, |g, t| Ok(g.sum(t[0])))?;
    s.first("mean", any, |g, t| Ok(g.mean(t[0])))?;
    s.first("dropout", any, |g, t| g.dropout(t[0], 0.3, 11))?;
    s.first(
        "reshape",
        |rng| vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)],
        |g, t| g.reshape(t[0], &[6, 4]),
    )?;
    s.first(
        "permute",
        |rng| {
            let d = dims(rng, 4);
            vec![uniform(rng, &d, -1.0, 1.0)]
        },
        |g, t| g.permute(t[0], &[2, 0, 3, 1]),
    )?;
    s.first(
        "slice",
        |rng| vec![uniform(rng, &[3, 5, 2], -1.0, 1.0)],
        |g, t| g.slice(t[0], 1, 1, 3),
    )?;
    s.first(
        "concat",
        |rng| vec![uniform(rng, &[2, 3, 2], -1.0, 1.0), uniform(rng, &[2, 1, 2], -1.0, 1.0)],
        |g, t| g.concat(&[t[0], t[1]], 1),
    )?;
    s.first(
        "broadcast_to",
        |rng| vec![uniform(rng, &[3, 1], -1.0, 1.0)],
        |g, t| g.broadcast_to(t[0], &[2, 3, 4]),
    )?;
    s.first(
        "sum_to",
        |rng| vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)],
        |g, t| g.sum_to(t[0], &[3, 1]),
    )?;
    s.first(
        "upsample_nearest",
        |rng| vec![uniform(rng, &[2, 2, 3, 3], -1.0, 1.0)],
        |g, t| g.upsample_nearest(t[0], 2),
    )?;
    s.first(
        "embedding",
        |rng| vec![uniform(rng, &[4, 5], -1.0, 1.0)],
        |g, t| g.embedding(t[0], &[3, 0, 3, 1, 2]),
    )?;
    s.first(
        "channel_mul",
        |rng| {
            vec![
                uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
                uniform(rng, &[2, 1, 4, 4], -1.0, 1.0),
            ]
        },
        |g, t| g.channel_mul(t[0], t[1]),
    )?;
    let mm = |rng: &mut ChaCha8Rng| {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)]
    };
    s.first("matmul", mm, |g, t| g.matmul(t[0], t[1]))?;
    s.first("matmul_t", mm, |g, t| {
        let a = g.permute(t[0], &[1, 0])?;
        let b = g.permute(t[1], &[1, 0])?;
        g.matmul_t(a, b, true, true)
    })?;
    s.first(
        "matmul (batched)",
        |rng| vec![uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 4, 2], -1.0, 1.0)],
        |g, t| g.matmul(t[0], t[1]),
    )?;
    s.first(
        "linear",
        |rng| {
            vec![
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[4, 5], -1.0, 1.0),
                uniform(rng, &[5], -1.0, 1.0),
            ]
        },
        |g, t| g.linear(t[0], t[1], Some(t[2])),
    )?;
    s.first(
        "conv2d s1 p1",
        |rng| {
            vec![
                uniform(rng, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ]
        },
        |g, t| g.conv2d(t[0], t[1], Some(t[2]), 1, 1),
    )?;
    s.first(
        "conv2d s2 p1",
        |rng| {
            vec![
                uniform(rng, &[2, 2, 6, 6], -1.0, 1.0),
                uniform(rng, &[2, 2, 4, 4], -1.0, 1.0),
            ]
        },
        |g, t| g.conv2d(t[0], t[1], None, 2, 1),
    )?;
    s.first(
        "layer_norm",
        |rng| {
            vec![
                uniform(rng, &[3, 2, 4], -1.0, 1.0),
                uniform(rng, &[2, 4], 0.5, 1.5),
                uniform(rng, &[2, 4], -0.5, 0.5),
            ]
        },
        |g, t| g.layer_norm(t[0], t[1], t[2], 2, 1e-5),
    )?;
    s.first(
        "batch_norm_train",
        |rng| {
            vec![
                uniform(rng, &[4, 3, 2, 2], -1.0, 1.0),
                uniform(rng, &[3], 0.5, 1.5),
                uniform(rng, &[3], -0.5, 0.5),
            ]
        },
        |g, t| Ok(g.batch_norm_train(t[0], t[1], t[2], 1e-5)?.0),
    )?;
    s.first(
        "batch_norm_eval",
        |rng| {
            vec![
                uniform(rng, &[4, 3], -1.0, 1.0),
                uniform(rng, &[3], 0.5, 1.5),
                uniform(rng, &[3], -0.5, 0.5),
            ]
        },
        |g, t| {
            let m = Array::new(vec![3], vec![0.1, -0.2, 0.3]);
            let v = Array::new(vec![3], vec![0.5, 1.2, 2.0]);
            g.batch_norm_eval(t[0], t[1], t[2], &m, &v, 1e-5)
        },
    )?;
    s.first(
        "cross_entropy",
        |rng| vec![uniform(rng, &[5, 3], -2.0, 2.0)],
        |g, t| g.cross_entropy(t[0], &[0, 2, 1, 1, 0]),
    )?;
    s.first(
        "bce",
        |rng| vec![uniform(rng, &[6], 0.05, 0.95)],
        |g, t| {
            let targets = Array::new(vec![6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.3]);
            g.bce(t[0], &targets, 1e-7)
        },
    )?;
    s.first(
        "two-layer mlp",
        |rng| {
            vec![
                uniform(rng, &[4, 3], -1.0, 1.0),
                uniform(rng, &[3, 5], -1.0, 1.0),
                uniform(rng, &[5], -0.5, 0.5),
                uniform(rng, &[5, 2], -1.0, 1.0),
            ]
        },
        |g, t| {
            let h = g.linear(t[0], t[1], Some(t[2]))?;
            let h = g.gelu(h);
            let y = g.linear(h, t[3], None)?;
            g.cross_entropy(y, &[0, 1, 1, 0])
        },
    )?;

    let two = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)];
    let one = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[3, 4], -1.5, 1.5)];
    let pos = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[3, 4], 0.3, 1.5)];
    s.second("mul", two, |g, t| g.mul(t[0], t[1]))?;
    s.second("sigmoid", one, |g, t| Ok(g.sigmoid(t[0])))?;
    s.second("gelu", one, |g, t| Ok(g.gelu(t[0])))?;
    s.second("softmax", one, |g, t| g.softmax(t[0]))?;
    s.second("pow", pos, |g, t| Ok(g.pow(t[0], 3.0)))?;
    s.second("sqrt", pos, |g, t| Ok(g.sqrt(t[0])))?;
    // Piecewise linear: zero curvature, but a nonzero mixed term.
    s.second(
        "leaky_relu",
        |rng| vec![off_zero(rng, &[3, 4]), uniform(rng, &[3, 4], -1.0, 1.0)],
        |g, t| {
            let a = g.leaky_relu(t[0], 0.2);
            let b = g.mul(a, t[1])?;
            g.mul(b, t[0])
        },
    )?;
    s.second(
        "matmul",
        |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[3, 2], -1.0, 1.0)],
        |g, t| {
            let y = g.matmul(t[0], t[1])?;
            g.mul(y, y)
        },
    )?;
    s.second(
        "conv2d",
        |rng| {
            vec![
                uniform(rng, &[1, 2, 4, 4], -1.0, 1.0),
                uniform(rng, &[2, 2, 3, 3], -1.0, 1.0),
            ]
        },
        |g, t| {
            let y = g.conv2d(t[0], t[1], None, 2, 1)?;
            Ok(g.sigmoid(y))
        },
    )?;
    s.second(
        "layer_norm",
        |rng| {
            vec![
                uniform(rng, &[2, 5], -1.0, 1.0),
                uniform(rng, &[5], 0.5, 1.5),
                uniform(rng, &[5], -0.5, 0.5),
            ]
        },
        |g, t| g.layer_norm(t[0], t[1], t[2], 1, 1e-5),
    )?;
    s.second(
        "reshape/permute/slice",
        |rng| vec![uniform(rng, &[2, 3, 2], -1.0, 1.0)],
        |g, t| {
            let p = g.permute(t[0], &[2, 0, 1])?;
            let q = g.slice(p, 2, 1, 2)?;
            let r = g.reshape(q, &[8])?;
            g.mul(r, r)
        },
    )?;
    s.second(
        "channel_mul/upsample",
        |rng| {
            vec![
                uniform(rng, &[1, 2, 2, 2], -1.0, 1.0),
                uniform(rng, &[1, 1, 4, 4], -1.0, 1.0),
            ]
        },
        |g, t| {
            let u = g.upsample_nearest(t[0], 2)?;
            let y = g.channel_mul(u, t[1])?;
            Ok(g.sigmoid(y))
        },
    )?;
    Ok(s.reports)
}
