use std::path::Path;

use anyhow::Result;
use fedgan::data::save_directory;
use fedgan::federation::partition;

use super::train_set;
use crate::config::Config;
use crate::run::Run;

/// Splits the training set among `federation.num_clients` clients and
/// writes one image tree per client plus a composition summary.
pub fn run(cfg: &Config, out: Option<&Path>) -> Result<()> {
    let set = train_set(cfg)?;
    let p = partition(&set, cfg.federation.num_clients, &cfg.partition_mode()?, cfg.seed)?;
    let mut run = Run::create(cfg, "partition", out)?;
    for (i, subset) in p.subsets(&set).iter().enumerate() {
        let rel = format!("client-{i:02}");
        save_directory(subset, &run.path(&rel))?;
        run.record_tree(&rel, true)?;
    }
    let summary = p.summary_csv(&set);
    print!("{summary}");
    run.write("composition.csv", summary, true)?;
    run.finish()?;
    Ok(())
}
