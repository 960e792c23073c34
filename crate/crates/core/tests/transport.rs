use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;
use std::time::Duration;

use fedgan::data::{make_texture_corpus, LabeledImageSet};
use fedgan::federation::{local_train, partition, run_training, FedConfig, PartitionMode};
use fedgan::gan::{Gan, GanConfig, Variant};
use fedgan::models::{LayoutEntry, ModelKind, ModelSpec, ParamVector};
use fedgan::transport::wire::encode_with_version;
use fedgan::transport::{
    client_run, decode, encode, read_message, serve, ClientOptions, Decoder, LocalResult, Message, ServerConfig,
    ServerOutcome, TransportError,
};
use proptest::prelude::*;

const DIGEST: [u8; 32] = [7; 32];

fn small_gan() -> Gan {
    let mut g = ModelSpec::new(ModelKind::Generator);
    g.width = 8;
    let mut d = ModelSpec::new(ModelKind::DiscCnn);
    d.width = 8;
    Gan::new(Variant::Acgan, &g, &Variant::Acgan.critic_spec(&d), 4).unwrap()
}

fn gan_cfg() -> GanConfig {
    GanConfig {
        batch_size: 8,
        seed: 3,
        ..Default::default()
    }
}

fn fed() -> FedConfig {
    FedConfig {
        num_clients: 4,
        rounds: 3,
        local_epochs: 1,
        client_fraction: 1.0,
        seed: 8,
        ..Default::default()
    }
}

fn parts() -> Vec<LabeledImageSet> {
    let data = make_texture_corpus(16, 16, 5).unwrap();
    partition(&data, 4, &PartitionMode::Iid, 2).unwrap().subsets(&data)
}

fn trainer<'a>(
    template: &'a Gan,
    data: &'a LabeledImageSet,
    client: usize,
) -> impl FnMut(usize, usize, &ParamVector) -> Result<LocalResult, String> + 'a {
    move |round, epochs, global| {
        let u = local_train(template, global, data, &gan_cfg(), round, epochs, client).map_err(|e| e.to_string())?;
        Ok(LocalResult {
            params: u.params,
            loss_d: u.loss_d,
            loss_g: u.loss_g,
        })
    }
}

type ServerThread = thread::JoinHandle<(Result<ServerOutcome, TransportError>, String)>;

fn run_server(cfg: ServerConfig, initial: ParamVector) -> (String, ServerThread) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let mut audit = Vec::new();
        let r = serve(listener, &cfg, &initial, &mut audit);
        (r, String::from_utf8(audit).unwrap())
    });
    (addr, handle)
}

#[test]
fn loopback_federation_matches_in_process_bit_for_bit() {
    let template = small_gan();
    let parts = parts();
    let local = run_training(&template, &parts, &fed(), &gan_cfg(), &mut |_| Ok(())).unwrap();
    let (addr, server) = run_server(ServerConfig::new(fed(), DIGEST), template.flatten());
    thread::scope(|s| {
        for (c, data) in parts.iter().enumerate() {
            let (addr, template) = (&addr, &template);
            s.spawn(move || {
                let opts = ClientOptions::new(c as u32, DIGEST, data.len() as u64);
                let summary = client_run(addr, &opts, &mut trainer(template, data, c)).unwrap();
                assert_eq!(summary.rounds_completed, 3);
            });
        }
    });
    let (outcome, audit) = server.join().unwrap();
    let outcome = outcome.unwrap();
    assert_eq!(outcome.final_params.checksum(), local.final_params.checksum());
    for (a, b) in outcome.rounds.iter().zip(&local.rounds) {
        assert_eq!(a.audit(), b.audit());
    }
    assert_eq!(audit.lines().filter(|l| l.contains("\"round-done\"")).count(), 3);
    assert!(audit.lines().last().unwrap().contains("\"shutdown\""));
}

#[test]
fn killed_client_is_retried_after_reconnect() {
    let template = small_gan();
    let parts = parts();
    let local = run_training(&template, &parts, &fed(), &gan_cfg(), &mut |_| Ok(())).unwrap();
    let (addr, server) = run_server(ServerConfig::new(fed(), DIGEST), template.flatten());
    thread::scope(|s| {
        for (c, data) in parts.iter().enumerate() {
            let (addr, template) = (&addr, &template);
            s.spawn(move || {
                let opts = ClientOptions::new(c as u32, DIGEST, data.len() as u64);
                if c == 1 {
                    let mut inner = trainer(template, data, c);
                    let mut crashing = |round: usize, epochs: usize, global: &ParamVector| {
                        if round == 2 {
                            panic!("injected crash");
                        }
                        inner(round, epochs, global)
                    };
                    // Unwinding drops the socket, as a killed process would.
                    let crashed = catch_unwind(AssertUnwindSafe(|| client_run(addr, &opts, &mut crashing)));
                    assert!(crashed.is_err());
                }
                client_run(addr, &opts, &mut trainer(template, data, c)).unwrap();
            });
        }
    });
    let (outcome, audit) = server.join().unwrap();
    let outcome = outcome.unwrap();
    assert_eq!(outcome.rounds[1].attempts, 2);
    assert_eq!(outcome.rounds[0].attempts, 1);
    assert!(audit
        .lines()
        .any(|l| l.contains("\"abort\"") && l.contains("\"round\":2")));
    assert_eq!(outcome.final_params.checksum(), local.final_params.checksum());
}

#[test]
fn missing_client_hits_startup_timeout() {
    let mut cfg = ServerConfig::new(fed(), DIGEST);
    cfg.startup_timeout = Duration::from_millis(300);
    let (_, server) = run_server(cfg, small_gan().flatten());
    let (r, audit) = server.join().unwrap();
    let err = r.unwrap_err();
    assert!(matches!(err, TransportError::Timeout(_)), "{err}");
    assert!(audit.contains("\"failed\""));
}

#[test]
fn wrong_protocol_version_rejected_at_hello() {
    let mut cfg = ServerConfig::new(fed(), DIGEST);
    cfg.startup_timeout = Duration::from_millis(500);
    let (addr, server) = run_server(cfg, small_gan().flatten());
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(&encode(&Message::Hello {
        client_id: 0,
        protocol_version: 9,
    }))
    .unwrap();
    let reply = read_message(&mut s, 1 << 20);
    assert!(matches!(reply, Ok(Message::Abort { .. })), "{reply:?}");
    let (_, audit) = server.join().unwrap();
    assert!(audit.contains("\"rejected\""));

    let frame = encode_with_version(&Message::Shutdown, 2);
    assert!(matches!(decode(&frame), Err(TransportError::BadVersion(2))));
}

#[test]
fn mismatched_config_digest_stops_the_client() {
    let (addr, server) = run_server(
        ServerConfig::new(
            FedConfig {
                num_clients: 1,
                ..fed()
            },
            DIGEST,
        ),
        small_gan().flatten(),
    );
    let opts = ClientOptions::new(0, [1; 32], 10);
    let r = client_run(&addr, &opts, &mut |_, _, g| {
        Ok(LocalResult {
            params: g.clone(),
            loss_d: 0.0,
            loss_g: 0.0,
        })
    });
    assert!(
        matches!(r, Err(TransportError::Protocol(ref m)) if m.contains("digest")),
        "{r:?}"
    );
    assert!(server.join().unwrap().0.is_err());
}

/// Every field any message can carry. Adding a variant breaks this match,
/// forcing a decision about whether it could leak sample data.
#[test]
fn message_schema_has_no_sample_payload() {
    fn fields(m: &Message) -> Vec<&'static str> {
        match m {
            Message::Hello {
                client_id: _,
                protocol_version: _,
            } => vec!["u32", "u8"],
            Message::RoundStart {
                round: _,
                attempt: _,
                config_digest: _,
                local_epochs: _,
                global: _,
            } => vec!["u32", "u32", "digest", "u32", "weights"],
            Message::RoundDone {
                round: _,
                attempt: _,
                samples: _,
                params: _,
                loss_d: _,
                loss_g: _,
            } => vec!["u32", "u32", "u64", "weights", "f64", "f64"],
            Message::Abort { reason: _ } => vec!["text"],
            Message::Shutdown => vec![],
        }
    }
    let done = Message::RoundDone {
        round: 1,
        attempt: 1,
        samples: 3,
        params: small_gan().flatten(),
        loss_d: 0.0,
        loss_g: 0.0,
    };
    assert!(fields(&done)
        .iter()
        .all(|f| ["u32", "u64", "weights", "f64"].contains(f)));
}

fn arb_params() -> impl Strategy<Value = ParamVector> {
    prop::collection::vec(prop::collection::vec(any::<f64>(), 1..20), 1..4).prop_map(|chunks| {
        let layout = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| LayoutEntry {
                name: format!("p{i}"),
                shape: vec![c.len()],
            })
            .collect();
        ParamVector::new(layout, chunks.concat()).unwrap()
    })
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u32>(), any::<u8>()).prop_map(|(client_id, protocol_version)| Message::Hello {
            client_id,
            protocol_version
        }),
        (
            any::<u32>(),
            any::<u32>(),
            any::<[u8; 32]>(),
            any::<u32>(),
            arb_params()
        )
            .prop_map(
                |(round, attempt, config_digest, local_epochs, global)| Message::RoundStart {
                    round,
                    attempt,
                    config_digest,
                    local_epochs,
                    global
                }
            ),
        (
            any::<u32>(),
            any::<u32>(),
            any::<u64>(),
            arb_params(),
            any::<f64>(),
            any::<f64>()
        )
            .prop_map(|(round, attempt, samples, params, loss_d, loss_g)| Message::RoundDone {
                round,
                attempt,
                samples,
                params,
                loss_d,
                loss_g
            }),
        ".{0,40}".prop_map(|reason| Message::Abort { reason }),
        Just(Message::Shutdown),
    ]
}

fn same(a: &Message, b: &Message) -> bool {
    // Bitwise comparison so NaN payloads count as equal.
    encode(a) == encode(b)
}

proptest! {
    #[test]
    fn frames_round_trip(m in arb_message()) {
        let bytes = encode(&m);
        prop_assert_eq!(&bytes, &encode(&m));
        let back = decode(&bytes).unwrap();
        prop_assert!(same(&back, &m));
    }

    #[test]
    fn decoder_handles_any_chunking(ms in prop::collection::vec(arb_message(), 1..5), cuts in prop::collection::vec(1usize..64, 1..50)) {
        let stream: Vec<u8> = ms.iter().flat_map(encode).collect();
        let mut dec = Decoder::new(1 << 20);
        let mut out = Vec::new();
        let mut pos = 0;
        let mut i = 0;
        while pos < stream.len() {
            let end = (pos + cuts[i % cuts.len()]).min(stream.len());
            out.extend(dec.feed_all(&stream[pos..end]).unwrap());
            pos = end;
            i += 1;
        }
        prop_assert_eq!(dec.buffered(), 0);
        prop_assert_eq!(out.len(), ms.len());
        for (a, b) in out.iter().zip(&ms) {
            prop_assert!(same(a, b));
        }
    }

    #[test]
    fn any_single_byte_flip_is_detected(m in arb_message(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode(&m);
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes).is_err());
    }

    #[test]
    fn param_vectors_round_trip_through_bytes(pv in arb_params()) {
        let back = ParamVector::from_bytes(&pv.to_bytes()).unwrap();
        prop_assert_eq!(back.checksum(), pv.checksum());
        prop_assert_eq!(back.layout(), pv.layout());
        prop_assert!(back.values().iter().zip(pv.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
