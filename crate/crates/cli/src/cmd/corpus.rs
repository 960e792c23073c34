use std::path::Path;

use anyhow::Result;
use fedgan::data::save_directory;

use super::{test_set, train_set};
use crate::config::Config;
use crate::run::Run;

/// Exports the configured train and test sets as `<split>/<class>/<n>.png`.
pub fn run(cfg: &Config, out: Option<&Path>) -> Result<()> {
    let mut run = Run::create(cfg, "make-corpus", out)?;
    for (split, set) in [("train", train_set(cfg)?), ("test", test_set(cfg)?)] {
        save_directory(&set, &run.path(split))?;
        run.record_tree(split, true)?;
        log::info!("{split}: {} images, class counts {:?}", set.len(), set.class_counts());
    }
    run.finish()?;
    Ok(())
}
