use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::rng::{rng_for, TAG_PARTITION};

use super::FedError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PartitionMode {
    Iid,
    /// Each client's majority-class fraction is drawn uniformly from
    /// `[low, high]`. Even-numbered clients are class-0 majority.
    NonIid {
        low: f64,
        high: f64,
    },
}

impl PartitionMode {
    pub fn non_iid(ratio: f64) -> Self {
        PartitionMode::NonIid {
            low: ratio,
            high: ratio,
        }
    }
}

/// Sample indices per client, each list ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    /// Requested majority fraction per client (`None` for IID).
    pub targets: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientComposition {
    pub client: usize,
    pub class_counts: Vec<usize>,
    pub majority_class: usize,
    pub majority_fraction: f64,
    pub target: Option<f64>,
}

impl Partition {
    pub fn composition(&self, set: &LabeledImageSet) -> Vec<ClientComposition> {
        self.clients
            .iter()
            .enumerate()
            .map(|(client, idx)| {
                let mut class_counts = vec![0; set.num_classes()];
                for &i in idx {
                    class_counts[set.labels[i]] += 1;
                }
                let majority_class = match self.targets[client] {
                    Some(_) => client % 2,
                    None => (0..class_counts.len())
                        .max_by_key(|&c| (class_counts[c], usize::MAX - c))
                        .unwrap_or(0),
                };
                let size = idx.len().max(1);
                ClientComposition {
                    client,
                    majority_fraction: class_counts[majority_class] as f64 / size as f64,
                    class_counts,
                    majority_class,
                    target: self.targets[client],
                }
            })
            .collect()
    }

    pub fn summary_csv(&self, set: &LabeledImageSet) -> String {
        let mut out = String::from("client");
        for name in &set.class_names {
            let _ = write!(out, ",{name}");
        }
        out.push_str(",majority_class,majority_fraction,target\n");
        for c in self.composition(set) {
            let _ = write!(out, "{}", c.client);
            for n in &c.class_counts {
                let _ = write!(out, ",{n}");
            }
            let target = c.target.map(|t| format!("{t:.6}")).unwrap_or_default();
            let _ = writeln!(out, ",{},{:.6},{target}", c.majority_class, c.majority_fraction);
        }
        out
    }

    pub fn subsets(&self, set: &LabeledImageSet) -> Vec<LabeledImageSet> {
        self.clients.iter().map(|idx| set.subset(idx)).collect()
    }
}

/// Splits `set` among `num_clients`. IID splits are random with sizes
/// differing by at most one. Non-IID splits need two classes and give every
/// client its target majority fraction to within one sample while using
/// every sample exactly once.
pub fn partition(
    set: &LabeledImageSet,
    num_clients: usize,
    mode: &PartitionMode,
    seed: u64,
) -> Result<Partition, FedError> {
    if num_clients == 0 || num_clients > set.len() {
        return Err(FedError::Invalid(format!(
            "cannot split {} samples among {num_clients} clients",
            set.len()
        )));
    }
    match *mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..set.len()).collect();
            idx.shuffle(&mut rng_for(seed, &[TAG_PARTITION, 0]));
            let (base, extra) = (set.len() / num_clients, set.len() % num_clients);
            let mut clients = Vec::with_capacity(num_clients);
            let mut start = 0;
            for c in 0..num_clients {
                let n = base + usize::from(c < extra);
                let mut part = idx[start..start + n].to_vec();
                part.sort_unstable();
                clients.push(part);
                start += n;
            }
            Ok(Partition {
                clients,
                targets: vec![None; num_clients],
            })
        }
        PartitionMode::NonIid { low, high } => non_iid(set, num_clients, low, high, seed),
    }
}

fn non_iid(set: &LabeledImageSet, k: usize, low: f64, high: f64, seed: u64) -> Result<Partition, FedError> {
    if set.num_classes() != 2 {
        return Err(FedError::Invalid(format!(
            "non-iid partitioning needs exactly 2 classes, got {}",
            set.num_classes()
        )));
    }
    if !(0.5..1.0).contains(&low) || !(0.5..1.0).contains(&high) || low > high {
        return Err(FedError::Invalid(format!(
            "majority ratio range [{low}, {high}] must lie within [0.5, 1.0)"
        )));
    }
    let mut rng = rng_for(seed, &[TAG_PARTITION, 1]);
    let ratios: Vec<f64> = (0..k)
        .map(|_| if low == high { low } else { rng.random_range(low..=high) })
        .collect();
    let counts = set.class_counts();
    let (n0, n1) = (counts[0] as f64, counts[1] as f64);

    // Clients in the same majority group share one size. Solve
    //   a·Σ_A r + b·Σ_B (1−r) = n0
    //   a·Σ_A (1−r) + b·Σ_B r = n1
    // for the group sizes a (class-0 majority) and b.
    let sum = |group: usize, f: &dyn Fn(f64) -> f64| -> f64 {
        ratios
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == group)
            .map(|(_, &r)| f(r))
            .sum()
    };
    let (ra, qa) = (sum(0, &|r| r), sum(0, &|r| 1.0 - r));
    let (rb, qb) = (sum(1, &|r| r), sum(1, &|r| 1.0 - r));
    let det = ra * rb - qb * qa;
    let (a, b) = if k == 1 {
        (n0 + n1, 0.0)
    } else if det.abs() < 1e-12 {
        // All ratios at 0.5: any common size works.
        let s = (n0 + n1) / k as f64;
        (s, s)
    } else {
        ((n0 * rb - qb * n1) / det, (ra * n1 - qa * n0) / det)
    };
    if a <= 0.0 || b < 0.0 || (k > 1 && b <= 0.0) {
        return Err(FedError::Invalid(format!(
            "infeasible non-iid split: class counts {n0}+{n1} over {k} clients with ratios {ratios:.3?} \
             require group sizes {a:.2} (class-0 majority) and {b:.2} (class-1 majority)"
        )));
    }

    let ideal: Vec<[f64; 2]> = ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if i % 2 == 0 {
                [r * a, (1.0 - r) * a]
            } else {
                [(1.0 - r) * b, r * b]
            }
        })
        .collect();
    let mut alloc = vec![[0usize; 2]; k];
    for class in 0..2 {
        let column: Vec<f64> = ideal.iter().map(|v| v[class]).collect();
        for (c, n) in largest_remainder(&column, counts[class]).into_iter().enumerate() {
            alloc[c][class] = n;
        }
    }

    let mut pools: Vec<Vec<usize>> = (0..2)
        .map(|class| {
            let mut v: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
            v.shuffle(&mut rng_for(seed, &[TAG_PARTITION, 2, class as u64]));
            v
        })
        .collect();
    let mut clients = Vec::with_capacity(k);
    for (i, counts) in alloc.iter().enumerate() {
        let mut part = Vec::with_capacity(counts[0] + counts[1]);
        for class in 0..2 {
            let pool = &mut pools[class];
            part.extend(pool.drain(pool.len() - counts[class]..));
        }
        if part.is_empty() {
            return Err(FedError::Invalid(format!(
                "non-iid split leaves client {i} without samples"
            )));
        }
        part.sort_unstable();
        clients.push(part);
    }
    let partition = Partition {
        clients,
        targets: ratios.iter().map(|&r| Some(r)).collect(),
    };
    for c in partition.composition(set) {
        let size: usize = c.class_counts.iter().sum();
        let target = c.target.unwrap_or(0.5) * size as f64;
        if (c.class_counts[c.majority_class] as f64 - target).abs() > 1.0 + 1e-9 {
            return Err(FedError::Invalid(format!(
                "client {} cannot reach majority fraction {:.3}: {} of {size} samples",
                c.client,
                c.target.unwrap_or(0.5),
                c.class_counts[c.majority_class]
            )));
        }
    }
    Ok(partition)
}

/// Rounds non-negative `shares` to integers summing to `total`, giving the
/// leftover units to the largest fractional parts (ties to the lower index).
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let scaled: Vec<f64> = shares
        .iter()
        .map(|s| if sum > 0.0 { s * total as f64 / sum } else { 0.0 })
        .collect();
    let mut out: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&x, &y| {
        let fx = scaled[x] - scaled[x].floor();
        let fy = scaled[y] - scaled[y].floor();
        fy.total_cmp(&fx).then(x.cmp(&y))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;

    fn two_class(n0: usize, n1: usize) -> LabeledImageSet {
        let n = n0 + n1;
        let labels = (0..n).map(|i| usize::from(i >= n0)).collect();
        LabeledImageSet::new(
            Array::new(vec![n, 1, 1, 1], vec![0.5; n]),
            labels,
            vec!["a".into(), "b".into()],
            "test",
        )
        .unwrap()
    }

    #[test]
    fn sixty_forty_by_counting() {
        let set = two_class(100, 100);
        let p = partition(&set, 2, &PartitionMode::non_iid(0.6), 5).unwrap();
        let comp = p.composition(&set);
        assert_eq!(comp[0].class_counts, vec![60, 40]);
        assert_eq!(comp[1].class_counts, vec![40, 60]);
    }

    #[test]
    fn iid_sizes() {
        let set = two_class(51, 50);
        let p = partition(&set, 4, &PartitionMode::Iid, 1).unwrap();
        let sizes: Vec<usize> = p.clients.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![26, 25, 25, 25]);
    }

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(&[1.5, 1.5, 1.0], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 0), vec![0, 0]);
    }

    #[test]
    fn infeasible_reported() {
        let set = two_class(190, 10);
        let err = partition(&set, 2, &PartitionMode::non_iid(0.9), 0).unwrap_err();
        assert!(err.to_string().contains("infeasible"), "{err}");
        assert!(partition(&set, 2, &PartitionMode::non_iid(1.0), 0).is_err());
    }
}
