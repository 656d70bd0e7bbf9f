use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use pragcap::issue::{partition_by_attribute, Context};
use pragcap::rsa::{decode_beam, decode_greedy, Model, RsaConfig};
use pragcap::speaker::*;
use pragcap::world::shapes6;
use pragcap::Error;
use serde_json::{json, Value};

const VOCAB: [&str; 4] = ["a", "b", "c", "</s>"];

/// Accept one connection and answer each request line with `handler`;
/// `None` closes the connection.
fn mock<F>(handler: F) -> String
where
    F: Fn(usize, &Value) -> Option<String> + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        for (n, line) in BufReader::new(stream).lines().enumerate() {
            let Ok(line) = line else { return };
            let req: Value = serde_json::from_str(&line).unwrap();
            match handler(n, &req) {
                Some(reply) => {
                    writer.write_all(reply.as_bytes()).unwrap();
                    writer.write_all(b"\n").unwrap();
                }
                None => return,
            }
        }
    });
    addr
}

fn vocab_reply() -> String {
    json!({"type": "vocab", "tokens": VOCAB, "eos": "</s>"}).to_string()
}

fn dist_reply(probs: &[f64]) -> String {
    let logp: Vec<Value> = probs
        .iter()
        .map(|p| if *p == 0.0 { Value::Null } else { json!(p.ln()) })
        .collect();
    json!({"type": "dist", "logp": logp}).to_string()
}

/// A server that answers the handshake and then replies `probs` to every step.
fn fixed(probs: Vec<f64>) -> String {
    mock(move |_, req| match req["type"].as_str() {
        Some("hello") => Some(vocab_reply()),
        _ => Some(dist_reply(&probs)),
    })
}

fn toks(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Serve an in-process backend over TCP, one connection per accept.
fn serve<B: SpeakerBackend + 'static>(backend: B) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let backend = Arc::new(backend);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let backend = backend.clone();
            let stream = stream.unwrap();
            thread::spawn(move || serve_connection(stream, backend.as_ref()));
        }
    });
    addr
}

#[test]
fn uniform_server() {
    let addr = fixed(vec![0.25; 4]);
    let sp = remote_speaker(&addr).unwrap();
    assert_eq!(sp.vocabulary().to_vec(), toks(&VOCAB));
    assert_eq!(sp.eos(), "</s>");
    let d = sp.next_token_logprobs("x", &[]).unwrap();
    for p in d.probs() {
        assert!((p - 0.25).abs() < 1e-12);
    }
    let lp = caption_logprob(&sp, "x", &toks(&["a", "b", "</s>"])).unwrap();
    assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-9);
}

#[test]
fn requests_follow_the_wire_format() {
    let addr = mock(|n, req| {
        if n == 0 {
            assert_eq!(req, &json!({"type": "hello"}));
            return Some(vocab_reply());
        }
        assert_eq!(req, &json!({"type": "next", "image": "img7", "prefix": ["a", "c"]}));
        Some(dist_reply(&[0.5, 0.0, 0.0, 0.5]))
    });
    let sp = remote_speaker(&addr).unwrap();
    let d = sp.next_token_logprobs("img7", &toks(&["a", "c"])).unwrap();
    assert_eq!(d.logp()[1], f64::NEG_INFINITY);
    assert!((d.prob(0) - 0.5).abs() < 1e-12);
}

#[test]
fn unnormalized_distribution_is_rejected() {
    let addr = fixed(vec![0.3, 0.3, 0.22, 0.2]);
    let sp = remote_speaker(&addr).unwrap();
    assert!(matches!(sp.next_token_logprobs("x", &[]), Err(Error::Protocol(_))));
}

#[test]
fn wrong_length_is_a_vocab_mismatch() {
    let addr = fixed(vec![0.5, 0.5]);
    let sp = remote_speaker(&addr).unwrap();
    assert!(matches!(
        sp.next_token_logprobs("x", &[]),
        Err(Error::VocabMismatch { expected: 4, got: 2 })
    ));
}

#[test]
fn server_closing_mid_request_is_an_error() {
    let addr = mock(|n, _| (n == 0).then(vocab_reply));
    let sp = remote_speaker(&addr).unwrap();
    assert!(matches!(sp.next_token_logprobs("x", &[]), Err(Error::Protocol(_))));
}

#[test]
fn server_error_message_is_surfaced() {
    let addr = mock(|n, _| {
        Some(if n == 0 {
            vocab_reply()
        } else {
            json!({"type": "error", "message": "no such image"}).to_string()
        })
    });
    let sp = remote_speaker(&addr).unwrap();
    match sp.next_token_logprobs("x", &[]) {
        Err(Error::Protocol(m)) => assert!(m.contains("no such image")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn silent_server_times_out() {
    let addr = mock(|n, _| {
        if n > 0 {
            thread::sleep(Duration::from_secs(2));
        }
        Some(vocab_reply())
    });
    let sp = RemoteSpeaker::connect(&addr, Duration::from_millis(200)).unwrap();
    assert!(matches!(sp.next_token_logprobs("x", &[]), Err(Error::Timeout)));
}

#[test]
fn handshake_without_eos_is_rejected() {
    let addr = mock(|_, _| Some(json!({"type": "vocab", "tokens": ["a", "b"], "eos": "</s>"}).to_string()));
    assert!(matches!(remote_speaker(&addr), Err(Error::Protocol(_))));
}

#[test]
fn unreachable_endpoint_is_an_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert!(remote_speaker(&addr).is_err());
    assert!(remote_speaker("not an endpoint").is_err());
}

#[test]
fn remote_template_speaker_matches_in_process() {
    let world = shapes6();
    let params = TemplateSpeakerParams::default();
    let local = template_speaker(&world, &world.lexicon, params).unwrap();
    let remote = remote_speaker(&serve(template_speaker(&world, &world.lexicon, params).unwrap())).unwrap();
    assert_eq!(remote.vocabulary(), local.vocabulary());

    for prefix in [vec![], toks(&["red"]), toks(&["a", "small", "red"])] {
        for img in world.image_ids() {
            let a = local.next_token_logprobs(&img, &prefix).unwrap();
            let b = remote.next_token_logprobs(&img, &prefix).unwrap();
            for (x, y) in a.logp().iter().zip(b.logp()) {
                assert!((x - y).abs() < 1e-9 || (x.is_infinite() && y.is_infinite()));
            }
        }
    }

    let issue = partition_by_attribute(&world, "color").unwrap();
    for img in world.image_ids() {
        let ctx = Context::full(&issue, &img).unwrap();
        for m in Model::ALL {
            let cfg = RsaConfig::tuned_for(m);
            assert_eq!(
                decode_greedy(&local, &ctx, &cfg, m).unwrap().tokens,
                decode_greedy(&remote, &ctx, &cfg, m).unwrap().tokens
            );
        }
        let cfg = RsaConfig::default();
        assert_eq!(
            decode_beam(&local, &ctx, &cfg, Model::S1CH, 3).unwrap().tokens,
            decode_beam(&remote, &ctx, &cfg, Model::S1CH, 3).unwrap().tokens
        );
    }
}

#[test]
fn unknown_image_is_reported_by_the_server() {
    let world = shapes6();
    let sp = template_speaker(&world, &world.lexicon, TemplateSpeakerParams::default()).unwrap();
    let remote = remote_speaker(&serve(sp)).unwrap();
    assert!(matches!(
        remote.next_token_logprobs("nope", &[]),
        Err(Error::Protocol(_))
    ));
}

/// Every backend returns a normalized distribution over its vocabulary,
/// deterministically.
fn check_conformance(backend: &dyn SpeakerBackend, image: &str) {
    let vocab = backend.vocabulary().clone();
    assert_eq!(vocab.iter().filter(|t| *t == backend.eos()).count(), 1);
    for prefix in [vec![], vec![vocab[0].clone()], vec![vocab[1].clone(), vocab[0].clone()]] {
        let d = backend.next_token_logprobs(image, &prefix).unwrap();
        assert_eq!(d.support(), &vocab);
        let mass: f64 = d.probs().iter().sum();
        assert!((mass - 1.0).abs() < 1e-9);
        assert_eq!(d, backend.next_token_logprobs(image, &prefix).unwrap());
    }
}

#[test]
fn backends_conform() {
    let world = shapes6();
    let params = TemplateSpeakerParams::default();
    let template = template_speaker(&world, &world.lexicon, params).unwrap();
    let cell: BTreeSet<String> = ["o1", "o2"].iter().map(|s| s.to_string()).collect();
    let avg = avg_feature_speaker(&world, &world.lexicon, params, &cell).unwrap();
    let remote = remote_speaker(&serve(template_speaker(&world, &world.lexicon, params).unwrap())).unwrap();
    let backends: [&dyn SpeakerBackend; 3] = [&template, &avg, &remote];
    for b in backends {
        check_conformance(b, "o1");
    }
}
