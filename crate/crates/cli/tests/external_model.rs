//! Wire-protocol tests against the shipped simulator double.

use pkcal_core::model::{builtin, external_model, BuiltinConfig, ExternalModelSpec};
use pkcal_core::Error;
use std::time::Duration;

const DOUBLE: &str = env!("CARGO_BIN_EXE_pkcal-sim-double");

fn spec(args: &str, timeout_ms: u64) -> ExternalModelSpec {
    ExternalModelSpec {
        command: format!("{DOUBLE} {args}"),
        timeout: Duration::from_millis(timeout_ms),
        protocol_version: 1,
    }
}

#[test]
fn echo_double_returns_first_parameter() {
    let model = external_model(&spec("--mode echo", 2000), 1, vec![(-10.0, 10.0)]).unwrap();
    assert_eq!(model.eval(&[0.4], &[3.0]).unwrap(), 3.0);
    assert_eq!(model.eval(&[0.9], &[-2.5]).unwrap(), -2.5);
}

#[test]
fn gradient_capable_double_returns_length_q() {
    let model = external_model(
        &spec("--mode sine-freq", 2000),
        2,
        vec![(0.1, 5.0), (0.5, 8.0)],
    )
    .unwrap();
    let g = model.grad_theta(&[0.3], &[1.5, 2.5]).unwrap();
    assert_eq!(g.len(), 2);
    // Analytic gradient of t1 sin(t2 x).
    assert!((g[0] - (2.5f64 * 0.3).sin()).abs() < 1e-12);
    assert!((g[1] - 1.5 * 0.3 * (2.5f64 * 0.3).cos()).abs() < 1e-12);
}

#[test]
fn external_double_matches_builtin_sine_freq() {
    use rand::prelude::*;
    let external = external_model(
        &spec("--mode sine-freq", 2000),
        2,
        vec![(0.1, 5.0), (0.5, 8.0)],
    )
    .unwrap();
    let native = builtin("sine-freq", &BuiltinConfig::default()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let x = [rng.random_range(0.0..1.0)];
        let theta = [rng.random_range(0.2..4.5), rng.random_range(0.6..7.5)];
        let a = external.eval(&x, &theta).unwrap();
        let b = native.eval(&x, &theta).unwrap();
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn declining_double_falls_back_to_finite_differences() {
    let model = external_model(
        &spec("--mode no-grad", 2000),
        2,
        vec![(0.1, 5.0), (0.5, 8.0)],
    )
    .unwrap();
    let g = model.grad_theta(&[0.4], &[1.2, 3.0]).unwrap();
    let native = builtin("sine-freq", &BuiltinConfig::default()).unwrap();
    let exact = native.grad_theta(&[0.4], &[1.2, 3.0]).unwrap();
    for (a, b) in g.iter().zip(&exact) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn reported_error_is_process_error() {
    let model = external_model(&spec("--mode error", 2000), 1, vec![(0.0, 1.0)]).unwrap();
    match model.eval(&[0.1], &[0.5]) {
        Err(Error::Process(msg)) => assert!(msg.contains("simulated failure"), "{msg}"),
        other => panic!("expected process error, got {other:?}"),
    }
}

#[test]
fn malformed_response_is_protocol_error_with_line() {
    let model = external_model(&spec("--mode garbage", 2000), 1, vec![(0.0, 1.0)]).unwrap();
    match model.eval(&[0.1], &[0.5]) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("not json at all"), "{msg}"),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn slow_double_times_out_as_transport_error() {
    let model = external_model(
        &spec("--mode slow --delay-ms 400", 50),
        2,
        vec![(0.1, 5.0), (0.5, 8.0)],
    )
    .unwrap();
    match model.eval(&[0.1], &[1.0, 2.0]) {
        Err(Error::Transport(msg)) => assert!(msg.contains("timed out"), "{msg}"),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn responses_follow_request_order() {
    let model = external_model(&spec("--mode echo", 2000), 1, vec![(-10.0, 10.0)]).unwrap();
    for i in 0..50 {
        let v = i as f64 / 7.0 - 3.0;
        assert_eq!(model.eval(&[0.0], &[v]).unwrap(), v);
    }
}
