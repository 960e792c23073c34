use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use fedgan::autodiff::Array;
use fedgan::data::save_grid;
use fedgan::gan::generate_set;
use fedgan::metrics::{diversity, embeddings_csv, feature_stats, fid, nearest_cosine, nearest_l1, train_classifier};
use serde::Serialize;

use super::{load_gan, stream, test_set, train_set, STREAM_EXTRACTOR, STREAM_GENERATE};
use crate::config::Config;
use crate::run::Run;

/// Epoch (or round) number embedded in a checkpoint file name, if any.
fn epoch_of(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

#[derive(Serialize)]
struct Summary {
    checkpoints: usize,
    first_epoch: Option<usize>,
    last_epoch: Option<usize>,
    fid_first: f64,
    fid_last: f64,
    best_epoch: Option<usize>,
    best_fid: f64,
    /// Final FID below the first checkpoint's.
    improved: bool,
    /// Epoch-to-epoch FID decreases among consecutive checkpoints.
    decreases: usize,
    any_diversity_alarm_last: bool,
    min_nearest_l1_last: f64,
}

pub fn run(cfg: &Config, checkpoints: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if checkpoints.is_empty() {
        bail!("evaluate needs at least one --checkpoint");
    }
    let mut order: Vec<(Option<usize>, usize, &PathBuf)> = checkpoints
        .iter()
        .enumerate()
        .map(|(i, p)| (epoch_of(p), i, p))
        .collect();
    order.sort();
    // Load everything first so a bad checkpoint fails before any training.
    let gans = order
        .iter()
        .map(|(_, _, p)| load_gan(cfg, p))
        .collect::<Result<Vec<_>>>()?;

    let train = train_set(cfg)?;
    let test = test_set(cfg)?;
    let ext = &cfg.eval.extractor;
    let extractor = train_classifier(
        &ext.spec(&cfg.data)?,
        &train,
        &ext.policy(),
        &ext.train_config(stream(cfg, STREAM_EXTRACTOR)),
    )?;
    let test_feats = extractor.features(&test.images)?;
    let real_stats = feature_stats(&test_feats)?;
    let train_feats = extractor.features(&train.images)?;
    let classes = train.num_classes();
    let real_div = diversity(&train.images, &train.labels, classes)?;
    log::info!(
        "extractor accuracy on test {:.3}; real diversity {:?}",
        extractor.evaluate(&test, None)?.accuracy,
        real_div.per_class
    );

    let mut run = Run::create(cfg, "evaluate", out)?;
    let mut fid_csv = String::from("checkpoint,epoch,fid");
    for c in 0..classes {
        let _ = write!(fid_csv, ",diversity_{c},alarm_{c}");
    }
    fid_csv.push_str(",min_nearest_l1\n");
    let mut audit_csv = String::from("checkpoint,sample,label,l1_index,l1,cosine_index,cosine\n");
    let mut fids = Vec::new();
    let mut last = (false, f64::INFINITY);
    let mut last_generated = None;
    for ((epoch, _, path), gan) in order.iter().zip(&gans) {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint")
            .to_string();
        let generated = generate_set(
            &gan.generator,
            cfg.eval.samples_per_class,
            &train.class_names,
            stream(cfg, STREAM_GENERATE),
        )?;
        let gen_feats = extractor.features(&generated.images)?;
        let score = fid(&real_stats, &feature_stats(&gen_feats)?)?;
        let div = diversity(&generated.images, &generated.labels, classes)?;
        let alarms = div.alarms(&real_div, cfg.eval.alarm_fraction);

        // Memorization audit: spread the audited samples over all classes.
        let n = generated.len();
        let audited: Vec<usize> = (0..cfg.eval.audit_samples.min(n))
            .map(|k| k * n / cfg.eval.audit_samples.min(n))
            .collect();
        let per = generated.pixels_per_image();
        let d = gen_feats.shape()[1];
        let mut pairs = Vec::with_capacity(audited.len() * 3 * per);
        let mut min_l1 = f64::INFINITY;
        for &i in &audited {
            let query = generated.image(i);
            let l1 = nearest_l1(query, &train.images)?;
            let cos = nearest_cosine(&gen_feats.data()[i * d..(i + 1) * d], &train_feats)?;
            min_l1 = min_l1.min(l1.score);
            let _ = writeln!(
                audit_csv,
                "{name},{i},{},{},{:e},{},{:e}",
                generated.labels[i], l1.index, l1.score, cos.index, cos.score
            );
            pairs.extend_from_slice(query);
            pairs.extend_from_slice(train.image(l1.index));
            pairs.extend_from_slice(train.image(cos.index));
        }
        let (c, h, w) = generated.image_dims();
        let grid = Array::new(vec![audited.len() * 3, c, h, w], pairs);
        let rel = format!("audit/{name}.png");
        save_grid(&grid, 3, &run.prepare(&rel)?)?;
        run.record(&rel, true)?;

        let _ = write!(
            fid_csv,
            "{name},{},{score:e}",
            epoch.map(|e| e.to_string()).unwrap_or_default()
        );
        for (v, a) in div.per_class.iter().zip(&alarms) {
            let _ = write!(fid_csv, ",{},{a}", v.map(|v| format!("{v:e}")).unwrap_or_default());
        }
        let _ = writeln!(fid_csv, ",{min_l1:e}");
        log::info!(
            "{name}: FID {score:.4}, diversity {:?}, alarms {alarms:?}, min nearest L1 {min_l1:.4}",
            div.per_class
        );
        fids.push((*epoch, score));
        last = (alarms.iter().any(|&a| a), min_l1);
        last_generated = Some((generated, gen_feats));
    }

    let (first_epoch, fid_first) = fids[0];
    let (last_epoch, fid_last) = *fids.last().expect("at least one checkpoint");
    let &(best_epoch, best_fid) = fids
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one checkpoint");
    let summary = Summary {
        checkpoints: fids.len(),
        first_epoch,
        last_epoch,
        fid_first,
        fid_last,
        best_epoch,
        best_fid,
        improved: fids.len() > 1 && fid_last < fid_first,
        decreases: fids.windows(2).filter(|w| w[1].1 < w[0].1).count(),
        any_diversity_alarm_last: last.0,
        min_nearest_l1_last: last.1,
    };
    println!(
        "FID {fid_first:.4} (first) -> {fid_last:.4} (last), best {best_fid:.4}; {} of {} steps decreased",
        summary.decreases,
        fids.len().saturating_sub(1)
    );

    let (generated, gen_feats) = last_generated.expect("at least one checkpoint");
    let all_feats = Array::new(
        vec![test.len() + generated.len(), test_feats.shape()[1]],
        [test_feats.data(), gen_feats.data()].concat(),
    );
    let labels = [test.labels.clone(), generated.labels.clone()].concat();
    let origins: Vec<&str> = std::iter::repeat_n("real", test.len())
        .chain(std::iter::repeat_n("fake", generated.len()))
        .collect();
    run.write("embeddings.csv", embeddings_csv(&all_feats, &labels, &origins)?, true)?;
    run.write("fid.csv", fid_csv, true)?;
    run.write("audit.csv", audit_csv, true)?;
    run.write("summary.json", serde_json::to_string_pretty(&summary)?, true)?;
    run.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_from_file_names() {
        assert_eq!(epoch_of(Path::new("ckpt/epoch-0030.fgpv")), Some(30));
        assert_eq!(epoch_of(Path::new("round-0002.fgpv")), Some(2));
        assert_eq!(epoch_of(Path::new("final.fgpv")), None);
    }
}
