use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use fedgan::data::LabeledImageSet;
use fedgan::federation::{local_train, partition, run_training, write_audit_line, FedError, TransportMode};
use fedgan::models::ParamVector;
use fedgan::transport::{client_run, serve, ClientOptions, LocalResult, ServerConfig};

use super::{load_dir, new_gan, train_set};
use crate::config::Config;
use crate::run::Run;

/// Environment hook for fault-injection tests: the client process exits
/// abruptly when asked to train this round.
pub const CRASH_ENV: &str = "FEDGAN_CRASH_AT_ROUND";

fn client_partitions(cfg: &Config) -> Result<(LabeledImageSet, Vec<LabeledImageSet>)> {
    let set = train_set(cfg)?;
    let p = partition(&set, cfg.federation.num_clients, &cfg.partition_mode()?, cfg.seed)?;
    let subsets = p.subsets(&set);
    Ok((set, subsets))
}

fn write_rounds(run: &mut Run, rounds: &[fedgan::federation::RoundResult]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rounds {
        write_audit_line(&mut buf, &r.audit())?;
    }
    run.write("rounds.ndjson", buf, true)?;
    Ok(())
}

/// In-process federation: every client trains on its own partition in a
/// worker thread and the aggregate is checkpointed after each round.
pub fn simulate(cfg: &Config, out: Option<&Path>) -> Result<()> {
    let (set, clients) = client_partitions(cfg)?;
    let p = partition(&set, cfg.federation.num_clients, &cfg.partition_mode()?, cfg.seed)?;
    let template = new_gan(cfg)?;
    let mut run = Run::create(cfg, "federate-simulate", out)?;
    run.write("composition.csv", p.summary_csv(&set), true)?;
    let fed = cfg.fed_config();
    let gan_cfg = cfg.gan_config();
    let mut saved = Vec::new();
    let outcome = run_training(&template, &clients, &fed, &gan_cfg, &mut |r| {
        let rel = format!("checkpoints/round-{:04}.fgpv", r.round);
        let save = || -> Result<()> {
            let p = run.prepare(&rel)?;
            r.aggregate
                .save(&p)
                .with_context(|| format!("writing {}", p.display()))?;
            Ok(())
        };
        save().map_err(|e| FedError::Invalid(format!("{e:#}")))?;
        saved.push(rel);
        Ok(())
    })?;
    for rel in &saved {
        run.record(rel, true)?;
    }
    write_rounds(&mut run, &outcome.rounds)?;
    let p = run.prepare("final.fgpv")?;
    outcome.final_params.save(&p)?;
    run.record("final.fgpv", true)?;
    println!("final aggregate {}", outcome.final_params.checksum_hex());
    run.finish()?;
    Ok(())
}

pub fn server(cfg: &Config, bind: &str, out: Option<&Path>) -> Result<()> {
    let template = new_gan(cfg)?;
    let mut run = Run::create(cfg, "federate-server", out)?;
    let net = &cfg.network;
    let fed = fedgan::federation::FedConfig {
        mode: TransportMode::Networked,
        ..cfg.fed_config()
    };
    let mut scfg = ServerConfig::new(fed, cfg.digest());
    scfg.startup_timeout = Duration::from_secs(net.startup_timeout_secs);
    scfg.reconnect_timeout = Duration::from_secs(net.reconnect_timeout_secs);
    scfg.round_timeout_floor = Duration::from_secs(net.round_timeout_floor_secs);
    scfg.max_retries = net.max_retries;
    let listener = TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
    let audit_path = run.prepare("audit.ndjson")?;
    let mut audit = BufWriter::new(File::create(&audit_path)?);
    let served = serve(listener, &scfg, &template.flatten(), &mut audit);
    audit.flush()?;
    drop(audit);
    run.record("audit.ndjson", false)?;
    let outcome = served?;
    write_rounds(&mut run, &outcome.rounds)?;
    let p = run.prepare("final.fgpv")?;
    outcome.final_params.save(&p)?;
    run.record("final.fgpv", true)?;
    println!("final aggregate {}", outcome.final_params.checksum_hex());
    run.finish()?;
    Ok(())
}

pub fn client(cfg: &Config, id: usize, server: &str, data: Option<&PathBuf>, out: Option<&Path>) -> Result<()> {
    let local = match data {
        Some(dir) => load_dir(dir, cfg)?,
        None => {
            let (_, mut subsets) = client_partitions(cfg)?;
            anyhow::ensure!(
                id < subsets.len(),
                "client id {id} out of range for {} clients",
                subsets.len()
            );
            subsets.swap_remove(id)
        }
    };
    let crash_at: Option<usize> = std::env::var(CRASH_ENV).ok().and_then(|v| v.parse().ok());
    let template = new_gan(cfg)?;
    let gan_cfg = cfg.gan_config();
    let mut opts = ClientOptions::new(id as u32, cfg.digest(), local.len() as u64);
    opts.connect_timeout = Duration::from_secs(cfg.network.connect_timeout_secs);
    let mut last: Option<ParamVector> = None;
    let mut trainer = |round: usize, epochs: usize, global: &ParamVector| -> Result<LocalResult, String> {
        if crash_at == Some(round) {
            log::error!("client {id}: simulated crash at round {round}");
            std::process::exit(101);
        }
        let u = local_train(&template, global, &local, &gan_cfg, round, epochs, id).map_err(|e| e.to_string())?;
        last = Some(u.params.clone());
        Ok(LocalResult {
            params: u.params,
            loss_d: u.loss_d,
            loss_g: u.loss_g,
        })
    };
    let summary = client_run(server, &opts, &mut trainer)?;
    let mut run = Run::create(cfg, &format!("federate-client-{id}"), out)?;
    run.write(
        "client.json",
        serde_json::to_string_pretty(&serde_json::json!({
            "client": id,
            "samples": local.len(),
            "rounds_completed": summary.rounds_completed,
            "aborts_seen": summary.aborts_seen,
        }))?,
        false,
    )?;
    if let Some(pv) = last {
        let p = run.prepare("last-update.fgpv")?;
        pv.save(&p)?;
        run.record("last-update.fgpv", false)?;
    }
    run.finish()?;
    Ok(())
}
