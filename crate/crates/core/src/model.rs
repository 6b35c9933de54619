//! The computer-model abstraction: `y_s(x, theta)` with theta-gradients.
//!
//! Models are cheap-to-evaluate functions (the expensive-code surrogate
//! setting is out of scope). Two built-ins ship: `linear-features`
//! (`y_s = theta . phi(x)` with polynomial features, theta-independent
//! sensitivities) and `sine-freq` (`y_s = theta_1 sin(theta_2 x)`, whose
//! sensitivity span moves with theta). External simulators attach over a
//! newline-delimited JSON protocol on stdin/stdout.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// A deterministic simulator with calibration-parameter gradients.
pub trait ComputerModel: Send + Sync {
    /// Simulator output at control point `x` and parameter `theta`.
    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64>;

    /// Gradient of the output in `theta`; finite differences by default.
    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        fd_gradient(
            &|th: &[f64]| self.eval(x, th),
            theta,
            self.theta_bounds(),
            None,
        )
    }

    /// Parameter dimension.
    fn q(&self) -> usize;

    /// The parameter box Theta.
    fn theta_bounds(&self) -> &[(f64, f64)];

    /// Feature map when the model is linear in theta; enables closed-form
    /// oracles and fixed-basis fast paths.
    fn linear_features(&self) -> Option<&PolyFeatures> {
        None
    }

    /// Whether the sensitivity span is the same at every theta.
    fn constant_sensitivities(&self) -> bool {
        self.linear_features().is_some()
    }
}

fn check_theta(model: &dyn ComputerModel, theta: &[f64]) -> Result<()> {
    if theta.len() != model.q() {
        return Err(Error::Validation(format!(
            "theta has dimension {}, expected {}",
            theta.len(),
            model.q()
        )));
    }
    for (i, (&t, &(a, b))) in theta.iter().zip(model.theta_bounds()).enumerate() {
        if !(t >= a && t <= b) {
            return Err(Error::Validation(format!(
                "theta[{i}] = {t} lies outside its bound [{a}, {b}]"
            )));
        }
    }
    Ok(())
}

/// Central-difference gradient with steps clipped inward at the parameter
/// box; falls back to a one-sided difference on a boundary coordinate.
/// Never evaluates outside the box.
pub(crate) fn fd_gradient(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    bounds: &[(f64, f64)],
    h: Option<f64>,
) -> Result<Vec<f64>> {
    let base_h = h.unwrap_or(f64::EPSILON.cbrt());
    let mut grad = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        let (a, b) = bounds[i];
        let hi = base_h * (1.0 + theta[i].abs());
        let up = hi.min(b - theta[i]);
        let down = hi.min(theta[i] - a);
        if up <= 0.0 && down <= 0.0 {
            return Err(Error::Validation(format!(
                "parameter box collapses at coordinate {i}"
            )));
        }
        let f_up = if up > 0.0 {
            work[i] = theta[i] + up;
            let v = f(&work)?;
            work[i] = theta[i];
            Some(v)
        } else {
            None
        };
        let f_down = if down > 0.0 {
            work[i] = theta[i] - down;
            let v = f(&work)?;
            work[i] = theta[i];
            Some(v)
        } else {
            None
        };
        let g = match (f_up, f_down) {
            (Some(u), Some(d)) => (u - d) / (up + down),
            (Some(u), None) => (u - f(&work)?) / up,
            (None, Some(d)) => (f(&work)? - d) / down,
            (None, None) => unreachable!(),
        };
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite finite-difference gradient component {i}: {g}"
            )));
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Finite-difference gradient of a model; `h` overrides the base step
/// `eps^(1/3) * (1 + |theta_i|)`.
pub fn grad_fd(
    model: &dyn ComputerModel,
    x: &[f64],
    theta: &[f64],
    h: Option<f64>,
) -> Result<Vec<f64>> {
    check_theta(model, theta)?;
    fd_gradient(
        &|th: &[f64]| model.eval(x, th),
        theta,
        model.theta_bounds(),
        h,
    )
}

/// Multivariate monomial features up to a total degree, constant term first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyFeatures {
    dim: usize,
    exponents: Vec<Vec<u32>>,
}

impl PolyFeatures {
    pub fn new(dim: usize, degree: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("feature dimension must be >= 1".into()));
        }
        let mut exponents = Vec::new();
        let mut current = vec![0u32; dim];
        for total in 0..=degree {
            enumerate_exponents(dim, total, 0, total, &mut current, &mut exponents);
        }
        Ok(PolyFeatures { dim, exponents })
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.exponents
            .iter()
            .map(|e| {
                e.iter()
                    .zip(x)
                    .map(|(&p, &xi)| xi.powi(p as i32))
                    .product()
            })
            .collect()
    }

    pub fn eval_one(&self, k: usize, x: &[f64]) -> f64 {
        self.exponents[k]
            .iter()
            .zip(x)
            .map(|(&p, &xi)| xi.powi(p as i32))
            .product()
    }
}

fn enumerate_exponents(
    dim: usize,
    total: u32,
    pos: usize,
    remaining: u32,
    current: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
) {
    if pos == dim - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    let _ = total;
    for p in (0..=remaining).rev() {
        current[pos] = p;
        enumerate_exponents(dim, total, pos + 1, remaining - p, current, out);
        current[pos] = 0;
    }
}

/// `y_s(x, theta) = theta . phi(x)` with polynomial features.
pub struct LinearFeaturesModel {
    features: PolyFeatures,
    bounds: Vec<(f64, f64)>,
}

impl ComputerModel for LinearFeaturesModel {
    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        check_theta(self, theta)?;
        Ok(self
            .features
            .eval(x)
            .iter()
            .zip(theta)
            .map(|(f, t)| f * t)
            .sum())
    }

    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_theta(self, theta)?;
        Ok(self.features.eval(x))
    }

    fn q(&self) -> usize {
        self.features.len()
    }

    fn theta_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn linear_features(&self) -> Option<&PolyFeatures> {
        Some(&self.features)
    }
}

/// `y_s(x, theta) = theta_1 sin(theta_2 x)` on a one-dimensional region.
/// Its sensitivity span {sin(theta_2 x), theta_1 x cos(theta_2 x)} moves
/// with theta, exercising per-theta reprojection.
pub struct SineFreqModel {
    bounds: Vec<(f64, f64)>,
}

impl ComputerModel for SineFreqModel {
    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        check_theta(self, theta)?;
        Ok(theta[0] * (theta[1] * x[0]).sin())
    }

    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_theta(self, theta)?;
        Ok(vec![
            (theta[1] * x[0]).sin(),
            theta[0] * x[0] * (theta[1] * x[0]).cos(),
        ])
    }

    fn q(&self) -> usize {
        2
    }

    fn theta_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
}

/// Configuration for [`builtin`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuiltinConfig {
    /// Control-variable dimension (linear-features only).
    pub dim: usize,
    /// Total polynomial degree of the feature map (linear-features only).
    pub degree: u32,
    /// Parameter box; a registry default applies when absent.
    pub theta_bounds: Option<Vec<(f64, f64)>>,
}

impl Default for BuiltinConfig {
    fn default() -> Self {
        BuiltinConfig {
            dim: 1,
            degree: 1,
            theta_bounds: None,
        }
    }
}

pub const BUILTIN_NAMES: [&str; 2] = ["linear-features", "sine-freq"];

/// Instantiates a built-in model by name.
pub fn builtin(name: &str, config: &BuiltinConfig) -> Result<Arc<dyn ComputerModel>> {
    match name {
        "linear-features" => {
            let features = PolyFeatures::new(config.dim, config.degree)?;
            let q = features.len();
            let bounds = match &config.theta_bounds {
                Some(b) => validate_bounds(b, q)?,
                None => vec![(-10.0, 10.0); q],
            };
            Ok(Arc::new(LinearFeaturesModel { features, bounds }))
        }
        "sine-freq" => {
            let bounds = match &config.theta_bounds {
                Some(b) => validate_bounds(b, 2)?,
                None => vec![(0.1, 5.0), (0.5, 8.0)],
            };
            Ok(Arc::new(SineFreqModel { bounds }))
        }
        other => Err(Error::Validation(format!(
            "unknown built-in model '{other}'; registry: {BUILTIN_NAMES:?}"
        ))),
    }
}

fn validate_bounds(bounds: &[(f64, f64)], q: usize) -> Result<Vec<(f64, f64)>> {
    if bounds.len() != q {
        return Err(Error::Validation(format!(
            "theta_bounds has length {}, expected {q}",
            bounds.len()
        )));
    }
    for (i, &(a, b)) in bounds.iter().enumerate() {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::Validation(format!(
                "theta bound {i} must satisfy a < b, got [{a}, {b}]"
            )));
        }
    }
    Ok(bounds.to_vec())
}

/// How to reach an external simulator process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalModelSpec {
    /// Executable invocation; split on whitespace with quote support.
    pub command: String,
    /// Per-request timeout.
    pub timeout: Duration,
    pub protocol_version: u32,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    v: u32,
    x: &'a [f64],
    theta: &'a [f64],
    want_grad: bool,
}

#[derive(Deserialize)]
struct WireResponse {
    y: Option<f64>,
    grad: Option<Vec<f64>>,
    error: Option<String>,
}

struct ExternalIo {
    child: Child,
    stdin: std::process::ChildStdin,
    lines: mpsc::Receiver<std::io::Result<String>>,
}

/// Client for a line-protocol simulator subprocess. Requests are strictly
/// serial: one in flight per handle.
pub struct ExternalModel {
    spec: ExternalModelSpec,
    q: usize,
    bounds: Vec<(f64, f64)>,
    io: Mutex<ExternalIo>,
}

/// Spawns the external process and wraps it as a [`ComputerModel`].
///
/// `q` and `theta_bounds` come from configuration; the wire protocol does
/// not negotiate them.
pub fn external_model(
    spec: &ExternalModelSpec,
    q: usize,
    theta_bounds: Vec<(f64, f64)>,
) -> Result<Arc<dyn ComputerModel>> {
    if spec.timeout.is_zero() {
        return Err(Error::Validation("external model timeout must be positive".into()));
    }
    let bounds = validate_bounds(&theta_bounds, q)?;
    let argv = split_command(&spec.command)?;
    let (prog, args) = argv
        .split_first()
        .ok_or_else(|| Error::Validation("external model command is empty".into()))?;
    let mut child = Command::new(prog)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Process(format!("failed to spawn '{}': {e}", spec.command)))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let reader = BufReader::new(stdout);
        for line in reader.lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    Ok(Arc::new(ExternalModel {
        spec: spec.clone(),
        q,
        bounds,
        io: Mutex::new(ExternalIo {
            child,
            stdin,
            lines: rx,
        }),
    }))
}

impl ExternalModel {
    fn request(&self, x: &[f64], theta: &[f64], want_grad: bool) -> Result<WireResponse> {
        let mut io = self.io.lock().expect("external model mutex poisoned");
        let req = WireRequest {
            v: self.spec.protocol_version,
            x,
            theta,
            want_grad,
        };
        let mut line = serde_json::to_string(&req).expect("request serializes");
        line.push('\n');
        if let Err(e) = io.stdin.write_all(line.as_bytes()).and_then(|_| io.stdin.flush()) {
            return Err(self.process_failure(&mut io, &format!("write failed: {e}")));
        }
        match io.lines.recv_timeout(self.spec.timeout) {
            Ok(Ok(text)) => {
                let resp: WireResponse = serde_json::from_str(&text).map_err(|e| {
                    Error::Protocol(format!("malformed response line '{text}': {e}"))
                })?;
                if let Some(msg) = resp.error {
                    return Err(Error::Process(format!("external model error: {msg}")));
                }
                if resp.y.is_none() {
                    return Err(Error::Protocol(format!(
                        "response line '{text}' carries neither y nor error"
                    )));
                }
                Ok(resp)
            }
            Ok(Err(e)) => Err(Error::Transport(format!("read failed: {e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(Error::Transport(format!(
                "external model timed out after {:?}",
                self.spec.timeout
            ))),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(self.process_failure(&mut io, "stdout closed"))
            }
        }
    }

    fn process_failure(&self, io: &mut ExternalIo, context: &str) -> Error {
        match io.child.try_wait() {
            Ok(Some(status)) => Error::Process(format!(
                "external model exited with {status} ({context})"
            )),
            _ => Error::Transport(format!("external model unavailable ({context})")),
        }
    }
}

impl ComputerModel for ExternalModel {
    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        check_theta(self, theta)?;
        let resp = self.request(x, theta, false)?;
        Ok(resp.y.expect("checked in request"))
    }

    fn grad_theta(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_theta(self, theta)?;
        let resp = self.request(x, theta, true)?;
        match resp.grad {
            Some(g) if g.len() == self.q => Ok(g),
            Some(g) => Err(Error::Protocol(format!(
                "gradient has length {}, expected {}",
                g.len(),
                self.q
            ))),
            // The process declined to differentiate; fall back to central
            // differences over the wire.
            None => fd_gradient(
                &|th: &[f64]| self.eval(x, th),
                theta,
                &self.bounds,
                None,
            ),
        }
    }

    fn q(&self) -> usize {
        self.q
    }

    fn theta_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
}

impl Drop for ExternalModel {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

/// Splits a command string on whitespace, honoring single and double quotes.
fn split_command(cmd: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    let mut has_token = false;
    for c in cmd.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => current.push(c),
            None if c == '"' || c == '\'' => {
                quote = Some(c);
                has_token = true;
            }
            None if c.is_whitespace() => {
                if has_token {
                    out.push(std::mem::take(&mut current));
                    has_token = false;
                }
            }
            None => {
                current.push(c);
                has_token = true;
            }
        }
    }
    if quote.is_some() {
        return Err(Error::Validation(format!("unbalanced quote in command '{cmd}'")));
    }
    if has_token {
        out.push(current);
    }
    if out.is_empty() {
        return Err(Error::Validation("external model command is empty".into()));
    }
    Ok(out)
}
