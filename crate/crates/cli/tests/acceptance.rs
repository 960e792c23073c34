//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the binary exits nonzero if any criterion fails.
//!
//! Criteria 5 and 8-10 drive the `fedgan` binary as separate processes.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::Instant;

use fedgan::autodiff::gradcheck::operator_sweep;
use fedgan::data::make_texture_corpus;
use fedgan::federation::{centralized_equivalent, fedavg_aggregate, partition, run_training, FedConfig, PartitionMode};
use fedgan::gan::check::{linear_critic_penalty, penalty_gradient_check};
use fedgan::gan::{train, Gan, GanConfig, NoSink, Variant};
use fedgan::metrics::{fid, matrix_sqrt, FidStats};
use fedgan::models::{LayoutEntry, ModelKind, ModelSpec, ParamVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_fedgan");

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

fn write_config(name: &str, body: &str) -> PathBuf {
    let p = scratch().join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn fedgan(config: &Path, args: &[&str]) -> Command {
    let mut c = Command::new(BIN);
    c.arg("--config").arg(config).args(args).env("RUST_LOG", "warn");
    c
}

fn check_output(what: &str, out: Output) -> Output {
    assert!(
        out.status.success(),
        "{what} exited with {}:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run(config: &Path, args: &[&str]) -> Output {
    check_output(&args.join(" "), fedgan(config, args).output().unwrap())
}

fn free_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn final_checksum(dir: &Path) -> String {
    ParamVector::load(&dir.join("final.fgpv")).unwrap().checksum_hex()
}

// ---- criteria 1-4, 6, 7: library oracles ----

fn criterion_1() -> String {
    let t = Instant::now();
    let reports = operator_sweep(20).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    assert!(reports.len() >= 40, "only {} operator sweeps", reports.len());
    assert!(reports.iter().all(|r| r.fixtures >= 20));
    assert!(
        worst.worst < 1e-6,
        "{} (order {}): {:e}",
        worst.name,
        worst.order,
        worst.worst
    );
    assert!(secs < 60.0, "sweep took {secs:.1}s");
    format!(
        "{} sweeps x 20 fixtures, worst {:.1e} ({}), {secs:.1}s",
        reports.len(),
        worst.worst,
        worst.name
    )
}

fn criterion_2() -> String {
    let err = penalty_gradient_check(20, 3.0).unwrap();
    assert!(err < 1e-4, "nested FD relative error {err:e}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let w: Vec<f64> = (0..rng.random_range(1..9))
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = linear_critic_penalty(&w, 5, 3.0, k).unwrap();
        let want = 3.0 * (norm - 1.0).powi(2);
        worst = worst.max((got - want).abs() / want.max(1e-300));
    }
    // (3, 4) has norm exactly 5, so the penalty is exactly 3 * 16.
    let exact = linear_critic_penalty(&[3.0, 4.0], 5, 3.0, 0).unwrap();
    assert_eq!(exact, 48.0);
    assert!(worst < 1e-12, "linear penalty off by {worst:e}");
    format!("nested FD rel error {err:.1e}; linear penalty exact (3,4) -> {exact}, random worst {worst:.0e}")
}

fn pv(values: Vec<f64>) -> ParamVector {
    let layout = vec![LayoutEntry {
        name: "w".into(),
        shape: vec![values.len()],
    }];
    ParamVector::new(layout, values).unwrap()
}

fn criterion_3() -> String {
    let (a, b) = (pv(vec![2.0]), pv(vec![6.0]));
    let agg = fedavg_aggregate(&[(1, &a), (3, &b)]).unwrap();
    assert!(
        (agg.params.values()[0] - 5.0).abs() <= 1e-12,
        "{:?}",
        agg.params.values()
    );
    assert_eq!(agg.weights, vec![0.25, 0.75]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let k = rng.random_range(1..9);
        let dim = rng.random_range(1..12);
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..200)).collect();
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-1e3..1e3)).collect())
            .collect();
        let vectors: Vec<ParamVector> = rows.iter().cloned().map(pv).collect();
        let contributions: Vec<(usize, &ParamVector)> = counts.iter().copied().zip(&vectors).collect();
        let agg = fedavg_aggregate(&contributions).unwrap();
        assert!((agg.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12, "case {case}");
        let total: usize = counts.iter().sum();
        for j in 0..dim {
            let by_hand: f64 = counts.iter().zip(&rows).map(|(&n, r)| n as f64 * r[j]).sum::<f64>() / total as f64;
            let v = agg.params.values()[j];
            assert!(
                (v - by_hand).abs() <= 1e-12 * by_hand.abs().max(1.0),
                "case {case} coord {j}"
            );
            let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= v && v <= hi, "case {case}: {lo} <= {v} <= {hi}");
        }
    }
    "[2.0]x1 + [6.0]x3 -> [5.0]; weights sum to 1 and stay in the hull over 100 fixtures".into()
}

fn criterion_4() -> String {
    let t = Instant::now();
    let data = make_texture_corpus(16, 16, 4).unwrap();
    let mut g = ModelSpec::new(ModelKind::Generator);
    g.width = 8;
    let mut d = ModelSpec::new(ModelKind::DiscCnn);
    d.width = 8;
    let template = Gan::new(Variant::Acgan, &g, &Variant::Acgan.critic_spec(&d), 4).unwrap();
    let fed = FedConfig {
        num_clients: 1,
        rounds: 3,
        local_epochs: 2,
        client_fraction: 1.0,
        seed: 4,
        ..Default::default()
    };
    let gan_cfg = GanConfig {
        batch_size: 8,
        seed: 4,
        ..Default::default()
    };
    let outcome = run_training(&template, std::slice::from_ref(&data), &fed, &gan_cfg, &mut |_| Ok(())).unwrap();
    let mut central = template.clone();
    let h = train(
        &mut central,
        &data,
        &centralized_equivalent(&fed, &gan_cfg),
        0,
        &mut NoSink,
    )
    .unwrap();
    assert_eq!(h.records.len(), fed.rounds * fed.local_epochs);
    let diff = outcome.final_params.max_abs_diff(&central.flatten());
    let secs = t.elapsed().as_secs_f64();
    assert!(diff <= 1e-9, "max abs diff {diff:e}");
    assert!(secs < 300.0, "{secs:.1}s");
    format!("R=3 E=2 one client vs 6 central epochs: max abs diff {diff:.1e}, {secs:.1}s")
}

fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> FidStats {
    FidStats {
        mean: DVector::from_vec(mean),
        cov,
        count: 2,
    }
}

fn criterion_6() -> String {
    let one = |m: f64| stats(vec![m], DMatrix::identity(1, 1));
    let f1 = fid(&one(0.0), &one(1.0)).unwrap();
    let a = stats(vec![0.0, 0.0], DMatrix::identity(2, 2));
    let b = stats(
        vec![1.0, 0.0],
        DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
    );
    let f2 = fid(&a, &b).unwrap();
    assert!((f1 - 1.0).abs() < 1e-8, "1-D fixture {f1}");
    assert!((f2 - 2.0).abs() < 1e-8, "2-D fixture {f2}");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for d in [1usize, 2, 3, 8, 16, 32, 48, 64] {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let s = m.transpose() * m;
        let r = matrix_sqrt(&s).unwrap();
        worst = worst.max((&r * &r - &s).norm() / s.norm());
    }
    assert!(worst < 1e-8, "sqrt reconstruction {worst:e}");
    format!("FID 1-D {f1:.12}, 2-D {f2:.12}; sqrt reconstruction worst {worst:.1e} up to 64x64")
}

fn criterion_7() -> String {
    let set = make_texture_corpus(150, 4, 7).unwrap();
    let mut worst = 0.0f64;
    for ratio in [0.6, 0.7, 0.8, 0.9] {
        for clients in [2usize, 4, 6] {
            let p = partition(&set, clients, &PartitionMode::non_iid(ratio), 7).unwrap();
            for c in p.composition(&set) {
                let size: usize = c.class_counts.iter().sum();
                let off = (c.class_counts[c.majority_class] as f64 - ratio * size as f64).abs();
                worst = worst.max(off);
                assert!(off <= 1.0, "ratio {ratio} client {}: {c:?}", c.client);
            }
            let mut all: Vec<usize> = p.clients.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(
                all,
                (0..set.len()).collect::<Vec<_>>(),
                "ratio {ratio}: not disjoint and exhaustive"
            );
        }
    }
    format!("ratios 0.6-0.9 with 2/4/6 clients: worst majority deviation {worst:.2} samples; disjoint and exhaustive")
}

// ---- criterion 5: networked federation ----

const NET_CONFIG: &str = r#"
version = 1
seed = 5
[data]
n_per_class = 16
test_per_class = 4
[gan]
variant = "acgan"
batch_size = 8
[federation]
num_clients = 4
rounds = 3
local_epochs = 1
[network]
startup_timeout_secs = 60
reconnect_timeout_secs = 60
round_timeout_floor_secs = 60
connect_timeout_secs = 30
"#;

fn spawn_client(config: &Path, id: usize, addr: &str, crash_at: Option<usize>, out: &Path) -> Child {
    let mut c = fedgan(
        config,
        &["federate", "client", "--client-id", &id.to_string(), "--server", addr],
    );
    c.arg("--out").arg(out).stdout(Stdio::piped()).stderr(Stdio::piped());
    if let Some(r) = crash_at {
        c.env("FEDGAN_CRASH_AT_ROUND", r.to_string());
    }
    c.spawn().unwrap()
}

/// Runs a server and four client processes; client 2 optionally dies on
/// entering `crash_at` and is restarted once it has exited.
fn networked(config: &Path, out: &Path, crash_at: Option<usize>) -> PathBuf {
    let addr = free_port();
    let server_dir = out.join("server");
    let server = fedgan(config, &["federate", "server", "--bind", &addr, "--out"])
        .arg(&server_dir)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut clients: Vec<Child> = (0..4)
        .map(|id| {
            spawn_client(
                config,
                id,
                &addr,
                if id == 2 { crash_at } else { None },
                &out.join(format!("client-{id}")),
            )
        })
        .collect();
    if crash_at.is_some() {
        let crashed = clients.remove(2).wait_with_output().unwrap();
        assert_eq!(crashed.status.code(), Some(101), "client 2 should have crashed");
        clients.push(spawn_client(config, 2, &addr, None, &out.join("client-2")));
    }
    check_output("federate server", server.wait_with_output().unwrap());
    for c in clients {
        check_output("federate client", c.wait_with_output().unwrap());
    }
    server_dir
}

fn criterion_5() -> String {
    let config = write_config("net.toml", NET_CONFIG);
    let sim_dir = scratch().join("c5-sim");
    run(&config, &["federate", "simulate", "--out", sim_dir.to_str().unwrap()]);
    let sim = final_checksum(&sim_dir);

    let clean = networked(&config, &scratch().join("c5-clean"), None);
    let clean_sum = final_checksum(&clean);
    assert_eq!(clean_sum, sim, "networked checksum differs from in-process");
    assert_eq!(
        std::fs::read(clean.join("rounds.ndjson")).unwrap(),
        std::fs::read(sim_dir.join("rounds.ndjson")).unwrap(),
        "round records differ"
    );

    let killed = networked(&config, &scratch().join("c5-kill"), Some(2));
    let killed_sum = final_checksum(&killed);
    let audit = std::fs::read_to_string(killed.join("audit.ndjson")).unwrap();
    let events: Vec<Value> = audit.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let aborted = events.iter().any(|e| e["event"] == "abort" && e["round"] == 2);
    let retried = events
        .iter()
        .any(|e| e["event"] == "round-start" && e["round"] == 2 && e["attempt"] == 2);
    assert!(aborted && retried, "no abort/retry of round 2 in audit:\n{audit}");
    assert_eq!(killed_sum, sim, "checksum after retry differs from in-process");
    format!(
        "4 client processes + server == simulate ({}); client kill at round 2 retried, same checksum",
        &sim[..16]
    )
}

// ---- criteria 8, 9: learning and augmentation smoke tests ----

const LEARN_CONFIG: &str = r#"
version = 1
seed = 0
[data]
source = "texture"
image_size = 16
n_per_class = 200
test_per_class = 100
[gan]
variant = "acgan"
epochs = 30
batch_size = 16
lr = 5e-4
checkpoint_every = 10
grid_every = 10
[eval]
samples_per_class = 100
audit_samples = 200
[classify]
seeds = [0, 1, 2]
"#;

struct Learned {
    config: PathBuf,
    last_checkpoint: PathBuf,
}

fn learned() -> &'static Learned {
    static RUN: OnceLock<Learned> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = write_config("learn.toml", LEARN_CONFIG);
        let dir = scratch().join("c8-train");
        run(&config, &["train-gan", "--out", dir.to_str().unwrap()]);
        Learned {
            config,
            last_checkpoint: dir.join("checkpoints/epoch-0030.fgpv"),
        }
    })
}

fn criterion_8() -> String {
    let t = Instant::now();
    let l = learned();
    let first = l.last_checkpoint.with_file_name("epoch-0001.fgpv");
    let eval_dir = scratch().join("c8-eval");
    run(
        &l.config,
        &[
            "evaluate",
            "--checkpoint",
            first.to_str().unwrap(),
            "--checkpoint",
            l.last_checkpoint.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ],
    );
    let secs = t.elapsed().as_secs_f64();
    let s = read_json(&eval_dir.join("summary.json"));
    let (f1, f30) = (s["fid_first"].as_f64().unwrap(), s["fid_last"].as_f64().unwrap());
    let alarm = s["any_diversity_alarm_last"].as_bool().unwrap();
    let min_l1 = s["min_nearest_l1_last"].as_f64().unwrap();
    assert_eq!(s["last_epoch"], 30);
    assert!(f30 < f1, "FID did not drop: epoch 1 {f1}, epoch 30 {f30}");
    assert!(!alarm, "diversity alarm raised at epoch 30");
    assert!(min_l1 > 0.0, "a generated sample equals a training image");
    assert!(secs < 900.0, "{secs:.0}s");
    format!("FID {f1:.3} (epoch 1) -> {f30:.3} (epoch 30), no diversity alarm, min nearest L1 {min_l1:.3} over 200 fakes, {secs:.0}s")
}

fn criterion_9() -> String {
    let l = learned();
    let dir = scratch().join("c9-classify");
    run(
        &l.config,
        &[
            "augment-classify",
            "--checkpoint",
            l.last_checkpoint.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ],
    );
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let mean_f1: BTreeMap<String, f64> = summary
        .lines()
        .skip(1)
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            assert_eq!(cells[1], "3", "expected 3 seeds: {l}");
            (cells[0].to_string(), cells[5].parse().unwrap())
        })
        .collect();
    let (mixed, real) = (mean_f1["generated+real"], mean_f1["only-real"]);
    assert!(mixed >= real - 0.02, "generated+real F1 {mixed} vs only-real {real}");
    format!(
        "mean F1 over 3 seeds: generated+real {mixed:.4}, only-real {real:.4}, only-generated {:.4}",
        mean_f1["only-generated"]
    )
}

// ---- criterion 10: determinism ----

const DET_CONFIG: &str = r#"
version = 1
seed = 10
[data]
n_per_class = 12
test_per_class = 6
[gan]
variant = "wgan-gp"
epochs = 2
batch_size = 6
n_critic = 2
lambda_gp = 3.0
[federation]
num_clients = 2
rounds = 2
local_epochs = 1
partition = "non-iid"
[eval]
samples_per_class = 6
audit_samples = 4
[eval.extractor]
max_epochs = 2
[classify]
generated_per_class = 6
seeds = [0, 1]
[classify.classifier]
max_epochs = 2
[network]
connect_timeout_secs = 30
"#;

/// Deterministic artifacts of a run directory by relative path.
fn checksums(dir: &Path) -> (Value, BTreeMap<String, String>) {
    let m = read_json(&dir.join("manifest.json"));
    let sums = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["deterministic"].as_bool().unwrap())
        .map(|a| {
            (
                a["path"].as_str().unwrap().to_string(),
                a["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    (m, sums)
}

fn criterion_10() -> String {
    let config = write_config("det.toml", DET_CONFIG);
    let base = scratch().join("c10");
    let ckpt_dir = base.join("train-input");
    run(&config, &["train-gan", "--out", ckpt_dir.to_str().unwrap()]);
    let ckpt = ckpt_dir.join("checkpoints/epoch-0002.fgpv");
    let ckpt = ckpt.to_str().unwrap();
    let jobs: Vec<(&str, Vec<&str>)> = vec![
        ("make-corpus", vec!["make-corpus"]),
        ("partition", vec!["partition"]),
        ("train-gan", vec!["train-gan"]),
        ("federate-simulate", vec!["federate", "simulate"]),
        ("evaluate", vec!["evaluate", "--checkpoint", ckpt]),
        ("augment-classify", vec!["augment-classify", "--checkpoint", ckpt]),
    ];
    let mut lines = Vec::new();
    let mut compare = |name: &str, a: &Path, b: &Path| {
        let (ma, sa) = checksums(a);
        let (mb, sb) = checksums(b);
        assert_eq!(ma["config_digest"], mb["config_digest"], "{name}");
        assert_eq!(ma["seed"], mb["seed"], "{name}");
        assert_eq!(sa, sb, "{name}: deterministic artifacts differ");
        lines.push(format!("{name} ({} files)", sa.len()));
    };
    for (name, args) in &jobs {
        let dirs: Vec<PathBuf> = (0..2).map(|k| base.join(format!("{name}-{k}"))).collect();
        for d in &dirs {
            let mut a = args.clone();
            a.extend(["--out", d.to_str().unwrap()]);
            run(&config, &a);
        }
        compare(name, &dirs[0], &dirs[1]);
    }
    let net: Vec<PathBuf> = (0..2)
        .map(|k| {
            let out = base.join(format!("network-{k}"));
            let addr = free_port();
            let server = fedgan(&config, &["federate", "server", "--bind", &addr, "--out"])
                .arg(out.join("server"))
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap();
            let clients: Vec<Child> = (0..2)
                .map(|id| spawn_client(&config, id, &addr, None, &out.join(format!("client-{id}"))))
                .collect();
            check_output("federate server", server.wait_with_output().unwrap());
            for c in clients {
                check_output("federate client", c.wait_with_output().unwrap());
            }
            out
        })
        .collect();
    compare("federate-server", &net[0].join("server"), &net[1].join("server"));
    for id in 0..2 {
        let sub = format!("client-{id}");
        compare(&format!("federate-client-{id}"), &net[0].join(&sub), &net[1].join(&sub));
    }
    format!("identical manifest checksums on rerun: {}", lines.join(", "))
}

fn main() {
    type Criterion = fn() -> String;
    let criteria: [(usize, &str, Criterion); 10] = [
        (1, "autodiff vs finite differences", criterion_1),
        (2, "gradient penalty double backprop", criterion_2),
        (3, "FedAvg arithmetic", criterion_3),
        (4, "federated == centralized", criterion_4),
        (5, "transport equivalence and retry", criterion_5),
        (6, "FID closed forms", criterion_6),
        (7, "non-IID partition contract", criterion_7),
        (8, "ACGAN learning smoke test", criterion_8),
        (9, "augmentation harness", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let secs = t.elapsed().as_secs_f64();
        let line = match result {
            Ok(detail) => format!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                let why = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                failed.push(n);
                format!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]")
            }
        };
        println!("{line}");
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
