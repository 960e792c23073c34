use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use fedgan::gan::generate_set;
use fedgan::metrics::{augmented_classification, ClassificationReport, Composition};
use fedgan::rng::derive_seed;

use super::{load_gan, stream, test_set, train_set, STREAM_CLASSIFIER, STREAM_GENERATE};
use crate::config::{Config, ConfigError};
use crate::run::Run;

fn confusion_cell(confusion: &[Vec<usize>]) -> String {
    confusion
        .iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(";")
}

/// Trains the downstream classifier on only-real, only-generated and
/// generated+real data for every configured seed and scores on the test set.
pub fn run(cfg: &Config, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let Some(checkpoint) = checkpoint else {
        return Err(ConfigError("augment-classify needs --checkpoint <generator checkpoint>".into()).into());
    };
    let gan = load_gan(cfg, checkpoint)?;
    let real = train_set(cfg)?;
    let test = test_set(cfg)?;
    let generated = generate_set(
        &gan.generator,
        cfg.classify.generated_per_class,
        &real.class_names,
        stream(cfg, STREAM_GENERATE),
    )?;
    let clf = &cfg.classify.classifier;
    let spec = clf.spec(&cfg.data)?;
    let policy = clf.policy();

    let mut run = Run::create(cfg, "augment-classify", out)?;
    let mut csv = String::from("seed,composition,accuracy,precision,recall,f1,confusion\n");
    let mut reports: Vec<(u64, ClassificationReport)> = Vec::new();
    for &seed in &cfg.classify.seeds {
        let train_cfg = clf.train_config(derive_seed(stream(cfg, STREAM_CLASSIFIER), &[seed]));
        for comp in Composition::ALL {
            let r = augmented_classification(&real, &generated, &test, comp, &spec, &policy, &train_cfg)?;
            log::info!("seed {seed} {}: accuracy {:.4} f1 {:.4}", comp.name(), r.accuracy, r.f1);
            let _ = writeln!(
                csv,
                "{seed},{},{:e},{:e},{:e},{:e},{}",
                comp.name(),
                r.accuracy,
                r.precision,
                r.recall,
                r.f1,
                confusion_cell(&r.confusion)
            );
            reports.push((seed, r));
        }
    }

    let mut summary = String::from("composition,runs,mean_accuracy,mean_precision,mean_recall,mean_f1\n");
    println!(
        "{:<16} {:>9} {:>9} {:>9} {:>9}",
        "composition", "accuracy", "precision", "recall", "f1"
    );
    for comp in Composition::ALL {
        let rs: Vec<&ClassificationReport> = reports
            .iter()
            .filter(|(_, r)| r.composition == Some(comp))
            .map(|(_, r)| r)
            .collect();
        let n = rs.len() as f64;
        let mean = |f: fn(&ClassificationReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let (a, p, r, f) = (
            mean(|r| r.accuracy),
            mean(|r| r.precision),
            mean(|r| r.recall),
            mean(|r| r.f1),
        );
        let _ = writeln!(summary, "{},{},{a:e},{p:e},{r:e},{f:e}", comp.name(), rs.len());
        println!("{:<16} {a:>9.4} {p:>9.4} {r:>9.4} {f:>9.4}", comp.name());
    }
    run.write("classification.csv", csv, true)?;
    run.write("summary.csv", summary, true)?;
    run.finish()?;
    Ok(())
}
