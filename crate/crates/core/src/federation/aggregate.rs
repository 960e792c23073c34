use rand::seq::index;

use crate::models::ParamVector;
use crate::rng::{rng_for, TAG_SAMPLE};

use super::FedError;

/// Number of clients drawn per round: `ceil(α·n)`, at least 1.
pub fn clients_per_round(num_clients: usize, fraction: f64) -> usize {
    // Tolerate products like 0.7 * 10 = 7.000000000000001.
    let k = (fraction * num_clients as f64 - 1e-9).ceil() as usize;
    k.clamp(1, num_clients)
}

/// Distinct client ids drawn uniformly without replacement for `round`,
/// returned in ascending order.
pub fn sample_clients(num_clients: usize, fraction: f64, seed: u64, round: usize) -> Result<Vec<usize>, FedError> {
    if num_clients == 0 {
        return Err(FedError::Invalid("num_clients must be at least 1".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FedError::Invalid(format!("client fraction {fraction} outside (0, 1]")));
    }
    let k = clients_per_round(num_clients, fraction);
    if k == num_clients {
        return Ok((0..num_clients).collect());
    }
    let mut rng = rng_for(seed, &[TAG_SAMPLE, round as u64]);
    let mut ids = index::sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// A weighted average and the coefficient given to each contribution, in
/// input order.
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub params: ParamVector,
    pub weights: Vec<f64>,
}

/// Sample-count-weighted mean of client vectors.
///
/// Contributions are summed in a canonical order (by count, then checksum),
/// so the result does not depend on arrival order. The sum is taken relative
/// to the first canonical vector, which makes identical inputs and single
/// clients reproduce their input exactly, and every coordinate is clamped to
/// the inputs' range.
pub fn fedavg_aggregate(contributions: &[(usize, &ParamVector)]) -> Result<Aggregate, FedError> {
    let Some(&(_, first)) = contributions.first() else {
        return Err(FedError::Invalid("no contributions to aggregate".into()));
    };
    for (i, (n, pv)) in contributions.iter().enumerate() {
        if *n == 0 {
            return Err(FedError::Invalid(format!("contribution {i} has zero samples")));
        }
        if pv.layout() != first.layout() {
            let detail = pv
                .layout()
                .iter()
                .zip(first.layout())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("`{}` {:?} vs `{}` {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("{} vs {} entries", pv.layout().len(), first.layout().len()));
            return Err(FedError::Invalid(format!(
                "contribution {i} has a different layout: {detail}"
            )));
        }
    }
    let total: usize = contributions.iter().map(|(n, _)| n).sum();
    let weights: Vec<f64> = contributions.iter().map(|(n, _)| *n as f64 / total as f64).collect();

    let mut order: Vec<usize> = (0..contributions.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, pa) = contributions[a];
        let (nb, pb) = contributions[b];
        na.cmp(&nb).then_with(|| pa.checksum().cmp(pb.checksum()))
    });
    let anchor = contributions[order[0]].1.values();
    let mut out = anchor.to_vec();
    let mut lo = anchor.to_vec();
    let mut hi = anchor.to_vec();
    for &i in &order[1..] {
        let w = weights[i];
        for (j, &v) in contributions[i].1.values().iter().enumerate() {
            out[j] += w * (v - anchor[j]);
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for j in 0..out.len() {
        out[j] = out[j].clamp(lo[j], hi[j]);
    }
    Ok(Aggregate {
        params: first.with_values(out)?,
        weights,
    })
}
