//! Memorization and mode-collapse audits, and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Array;

use super::MetricsError;

#[derive(Clone, Debug, PartialEq)]
pub struct NearestMatch {
    pub index: usize,
    pub score: f64,
}

fn rows(a: &Array) -> Result<(usize, usize), MetricsError> {
    let s = a.shape();
    if s.is_empty() || s[0] == 0 {
        return Err(MetricsError::Invalid("reference set is empty".into()));
    }
    Ok((s[0], a.len() / s[0]))
}

/// Real image with the smallest summed pixel L1 distance to `query`. Ties go
/// to the lowest index.
pub fn nearest_l1(query: &[f64], real: &Array) -> Result<NearestMatch, MetricsError> {
    let (n, per) = rows(real)?;
    if query.len() != per {
        return Err(MetricsError::Invalid(format!(
            "query has {} pixels, references {per}",
            query.len()
        )));
    }
    let mut best = NearestMatch {
        index: 0,
        score: f64::INFINITY,
    };
    for (i, r) in real.data().chunks(per).enumerate().take(n) {
        let d: f64 = r.iter().zip(query).map(|(a, b)| (a - b).abs()).sum();
        if d < best.score {
            best = NearestMatch { index: i, score: d };
        }
    }
    Ok(best)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Reference embedding with the largest cosine similarity to `query`.
pub fn nearest_cosine(query: &[f64], embeddings: &Array) -> Result<NearestMatch, MetricsError> {
    let (n, d) = rows(embeddings)?;
    if query.len() != d {
        return Err(MetricsError::Invalid(format!(
            "query has dimension {}, references {d}",
            query.len()
        )));
    }
    let mut best = NearestMatch {
        index: 0,
        score: f64::NEG_INFINITY,
    };
    for (i, r) in embeddings.data().chunks(d).enumerate().take(n) {
        let c = cosine(query, r);
        if c > best.score {
            best = NearestMatch { index: i, score: c };
        }
    }
    Ok(best)
}

/// Both nearest matches for one generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestReal {
    pub l1: NearestMatch,
    pub cosine: NearestMatch,
}

pub fn nearest_real(
    query: &[f64],
    query_embedding: &[f64],
    real: &Array,
    real_embeddings: &Array,
) -> Result<NearestReal, MetricsError> {
    Ok(NearestReal {
        l1: nearest_l1(query, real)?,
        cosine: nearest_cosine(query_embedding, real_embeddings)?,
    })
}

/// Mean pairwise per-pixel L1 distance within each class.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityReport {
    /// `None` for classes with fewer than two samples.
    pub per_class: Vec<Option<f64>>,
}

impl DiversityReport {
    /// Classes whose diversity is below `fraction` of the reference's.
    pub fn alarms(&self, reference: &DiversityReport, fraction: f64) -> Vec<bool> {
        self.per_class
            .iter()
            .zip(&reference.per_class)
            .map(|(v, r)| match (v, r) {
                (Some(v), Some(r)) => *v < fraction * r || (*r == 0.0 && *v == 0.0),
                _ => false,
            })
            .collect()
    }

    pub fn any_alarm(&self, reference: &DiversityReport, fraction: f64) -> bool {
        self.alarms(reference, fraction).into_iter().any(|a| a)
    }
}

pub const DEFAULT_ALARM_FRACTION: f64 = 0.25;

pub fn diversity(images: &Array, labels: &[usize], classes: usize) -> Result<DiversityReport, MetricsError> {
    let (n, per) = rows(images)?;
    if labels.len() != n {
        return Err(MetricsError::Invalid(format!("{n} images but {} labels", labels.len())));
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let members: Vec<&[f64]> = (0..n)
            .filter(|&i| labels[i] == c)
            .map(|i| &images.data()[i * per..(i + 1) * per])
            .collect();
        if members.len() < 2 {
            log::warn!("diversity: class {c} has {} sample(s); skipped", members.len());
            per_class.push(None);
            continue;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let d: f64 = members[i].iter().zip(members[j]).map(|(a, b)| (a - b).abs()).sum();
                total += d / per as f64;
                pairs += 1;
            }
        }
        per_class.push(Some(total / pairs as f64));
    }
    Ok(DiversityReport { per_class })
}

/// CSV rows `id,label,origin,e0..` for external 2-D projection.
pub fn embeddings_csv(features: &Array, labels: &[usize], origins: &[&str]) -> Result<String, MetricsError> {
    let (n, d) = rows(features)?;
    if labels.len() != n || origins.len() != n {
        return Err(MetricsError::Invalid(
            "embedding, label and origin counts differ".into(),
        ));
    }
    let mut out = String::from("id,label,origin");
    for j in 0..d {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for i in 0..n {
        let _ = write!(out, "{i},{},{}", labels[i], origins[i]);
        for v in &features.data()[i * d..(i + 1) * d] {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(
    features: &Array,
    labels: &[usize],
    origins: &[&str],
    path: &Path,
) -> Result<(), MetricsError> {
    let csv = embeddings_csv(features, labels, origins)?;
    std::fs::write(path, csv).map_err(|e| MetricsError::Invalid(format!("{}: {e}", path.display())))
}
