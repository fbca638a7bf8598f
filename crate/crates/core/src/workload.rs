//! Request streams: synthetic generation and CSV trace ingestion.
//!
//! Random draws come from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`. Only `next_u64` is consumed, and values are mapped
//! with fixed formulas so another implementation can reproduce a workload
//! bit for bit:
//!
//! * uniform integer in `[min, max]`: let `span = max - min + 1`; draw `x`,
//!   reject while `x >= 2^64 - (2^64 mod span)`, return `min + x mod span`;
//! * exponential inter-arrival with rate `λ`: `u = (x >> 11) * 2^-53`,
//!   `dt = -ln(1 - u) / λ`.
//!
//! Per request, draws happen in the order input tokens, output tokens,
//! inter-arrival gap; fixed quantities consume no draws.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type RequestId = u64;

pub const TRACE_HEADER: &str = "id,arrival_s,input_tokens,output_tokens";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Waiting,
    Prompting,
    Generating,
    Finished,
}

impl RequestState {
    fn successor(self) -> Option<RequestState> {
        match self {
            RequestState::Waiting => Some(RequestState::Prompting),
            RequestState::Prompting => Some(RequestState::Generating),
            RequestState::Generating => Some(RequestState::Finished),
            RequestState::Finished => None,
        }
    }
}

/// One inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub state: RequestState,
}

impl Request {
    pub fn new(id: RequestId, arrival_s: f64, input_tokens: u32, output_tokens: u32) -> Result<Self> {
        if !arrival_s.is_finite() || arrival_s < 0.0 {
            return Err(Error::Validation(format!(
                "request {id}: arrival_s must be finite and non-negative, got {arrival_s}"
            )));
        }
        if input_tokens == 0 || output_tokens == 0 {
            return Err(Error::Validation(format!(
                "request {id}: token counts must be >= 1 (input {input_tokens}, output {output_tokens})"
            )));
        }
        Ok(Request {
            id,
            arrival_s,
            input_tokens,
            output_tokens,
            state: RequestState::Waiting,
        })
    }

    /// Moves one step along Waiting -> Prompting -> Generating -> Finished.
    pub fn advance(&mut self, to: RequestState) -> Result<()> {
        if self.state.successor() != Some(to) {
            return Err(Error::contract(format!(
                "request {}: illegal transition {:?} -> {:?}",
                self.id, self.state, to
            )));
        }
        self.state = to;
        Ok(())
    }
}

/// A token count that is either fixed or drawn uniformly from `[min, max]`.
///
/// In JSON a fixed count is a bare integer and a range is `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenCount {
    Fixed(u32),
    Range(u32, u32),
}

impl TokenCount {
    fn validate(&self, field: &str) -> Result<()> {
        match *self {
            TokenCount::Fixed(n) if n < 1 => Err(Error::config(field, "count must be >= 1")),
            TokenCount::Range(min, _) if min < 1 => {
                Err(Error::config(field, format!("range min must be >= 1, got {min}")))
            }
            TokenCount::Range(min, max) if min > max => Err(Error::config(
                field,
                format!("range min {min} exceeds max {max}"),
            )),
            _ => Ok(()),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            TokenCount::Fixed(n) => n,
            TokenCount::Range(min, max) => uniform_inclusive(rng, min as u64, max as u64) as u32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    AllAtZero,
    FixedInterval(f64),
    PoissonRate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_requests: usize,
    pub input_tokens: TokenCount,
    pub output_tokens: TokenCount,
    #[serde(default = "default_arrival")]
    pub arrival: Arrival,
    #[serde(default)]
    pub seed: u64,
}

fn default_arrival() -> Arrival {
    Arrival::AllAtZero
}

impl WorkloadSpec {
    /// Closed batch of identical requests, all arriving at t = 0.
    pub fn closed_batch(n_requests: usize, input_tokens: u32, output_tokens: u32) -> Self {
        WorkloadSpec {
            n_requests,
            input_tokens: TokenCount::Fixed(input_tokens),
            output_tokens: TokenCount::Fixed(output_tokens),
            arrival: Arrival::AllAtZero,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.input_tokens.validate("workload.input_tokens")?;
        self.output_tokens.validate("workload.output_tokens")?;
        match self.arrival {
            Arrival::AllAtZero => {}
            Arrival::FixedInterval(dt) if !(dt.is_finite() && dt >= 0.0) => {
                return Err(Error::config(
                    "workload.arrival",
                    format!("fixed interval must be finite and >= 0, got {dt}"),
                ))
            }
            Arrival::PoissonRate(rate) if !(rate.is_finite() && rate > 0.0) => {
                return Err(Error::config(
                    "workload.arrival",
                    format!("poisson rate must be finite and > 0, got {rate}"),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

fn uniform_inclusive(rng: &mut ChaCha8Rng, min: u64, max: u64) -> u64 {
    let span = max - min + 1;
    // 2^64 mod span, computed without overflow
    let rem = (u64::MAX % span + 1) % span;
    loop {
        let x = rng.next_u64();
        if rem == 0 || x < u64::MAX - rem + 1 {
            return min + x % span;
        }
    }
}

fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Generates `spec.n_requests` requests with ids `0..n`, sorted by arrival.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clock = 0.0_f64;
    let mut out = Vec::with_capacity(spec.n_requests);
    for i in 0..spec.n_requests {
        let input = spec.input_tokens.draw(&mut rng);
        let output = spec.output_tokens.draw(&mut rng);
        let arrival = match spec.arrival {
            Arrival::AllAtZero => 0.0,
            Arrival::FixedInterval(dt) => i as f64 * dt,
            Arrival::PoissonRate(rate) => {
                clock += -(1.0 - unit_open(&mut rng)).ln() / rate;
                clock
            }
        };
        out.push(Request::new(i as RequestId, arrival, input, output)?);
    }
    Ok(out)
}

/// Renders requests in the trace CSV format. Floats use the shortest
/// representation that parses back to the same value.
pub fn to_trace_csv(requests: &[Request]) -> String {
    let mut s = String::with_capacity(32 * (requests.len() + 1));
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in requests {
        let _ = writeln!(
            s,
            "{},{:?},{},{}",
            r.id, r.arrival_s, r.input_tokens, r.output_tokens
        );
    }
    s
}

/// Parses trace CSV text. Output is sorted by arrival, ties broken by id.
pub fn parse_trace(text: &str) -> Result<Vec<Request>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == TRACE_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{TRACE_HEADER}`, found `{}`", header.trim()),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let id: RequestId = fields[0]
            .parse()
            .map_err(|e| bad(format!("id `{}`: {e}", fields[0])))?;
        let arrival: f64 = fields[1]
            .parse()
            .map_err(|e| bad(format!("arrival_s `{}`: {e}", fields[1])))?;
        let input: u32 = fields[2]
            .parse()
            .map_err(|e| bad(format!("input_tokens `{}`: {e}", fields[2])))?;
        let output: u32 = fields[3]
            .parse()
            .map_err(|e| bad(format!("output_tokens `{}`: {e}", fields[3])))?;
        let req = Request::new(id, arrival, input, output).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(id) {
            return Err(Error::Validation(format!(
                "duplicate request id {id} on line {line_no}"
            )));
        }
        out.push(req);
    }
    out.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.id.cmp(&b.id)));
    Ok(out)
}
