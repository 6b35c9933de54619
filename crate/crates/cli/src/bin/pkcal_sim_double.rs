//! Line-protocol simulator double for tests and demos.
//!
//! Reads one JSON request per line (`{"v":1,"x":[...],"theta":[...],
//! "want_grad":false}`) and answers with `{"y":...}`, optionally with a
//! `grad` array. Modes:
//!
//! - `echo`      `y = theta[0]`; never returns gradients
//! - `sine-freq` `y = theta[0] * sin(theta[1] * x[0])`; analytic gradients
//! - `no-grad`   sine-freq values, gradients declined
//! - `error`     always answers {"error": ...}
//! - `slow`      sine-freq after a delay (--delay-ms)
//! - `garbage`   answers a non-JSON line

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Deserialize)]
struct Request {
    #[allow(dead_code)]
    v: u32,
    x: Vec<f64>,
    theta: Vec<f64>,
    #[serde(default)]
    want_grad: bool,
}

#[derive(Serialize)]
struct Response {
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn main() {
    let mut mode = "sine-freq".to_string();
    let mut delay_ms = 0u64;
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--mode" => mode = args.next().unwrap_or_default(),
            "--delay-ms" => {
                delay_ms = args.next().and_then(|v| v.parse().ok()).unwrap_or(0)
            }
            other => {
                eprintln!("unknown argument {other}");
                std::process::exit(2);
            }
        }
    }

    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        if mode == "garbage" {
            let _ = writeln!(out, "not json at all");
            let _ = out.flush();
            continue;
        }
        if delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(delay_ms));
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Err(e) => Response {
                y: None,
                grad: None,
                error: Some(format!("bad request: {e}")),
            },
            Ok(req) => match mode.as_str() {
                "error" => Response {
                    y: None,
                    grad: None,
                    error: Some("simulated failure".into()),
                },
                "echo" => Response {
                    y: Some(req.theta.first().copied().unwrap_or(0.0)),
                    grad: None,
                    error: None,
                },
                _ => {
                    // sine-freq family: y = t1 sin(t2 x).
                    let (t1, t2) = (req.theta[0], req.theta[1]);
                    let x = req.x[0];
                    let grad = if req.want_grad && mode != "no-grad" {
                        Some(vec![(t2 * x).sin(), t1 * x * (t2 * x).cos()])
                    } else {
                        None
                    };
                    Response {
                        y: Some(t1 * (t2 * x).sin()),
                        grad,
                        error: None,
                    }
                }
            },
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&response).unwrap());
        let _ = out.flush();
    }
}
