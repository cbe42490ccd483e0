//! Request traces: a line-oriented file format and a synthetic generator.
//!
//! Each non-empty line holds one record with `arrival_ms`, `input_tokens` and
//! `output_tokens`. Either strict JSON or the relaxed form
//! `{arrival_ms:0, input_tokens:1024, output_tokens:128}` is accepted.
//! Text after `#` is ignored.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{Request, OUTPUT_SHARE};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace contains no requests")]
    EmptyTrace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    arrival_ms: f64,
    input_tokens: i64,
    output_tokens: i64,
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>, TraceError> {
    parse_trace(&std::fs::read_to_string(path)?)
}

pub fn parse_trace(text: &str) -> Result<Vec<Request>, TraceError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let rec = parse_record(body).map_err(|msg| TraceError::Parse { line, msg })?;
        let err = |msg: &str| TraceError::Parse {
            line,
            msg: msg.to_string(),
        };
        if !(rec.arrival_ms >= 0.0 && rec.arrival_ms.is_finite()) {
            return Err(err("arrival_ms must be a non-negative number"));
        }
        if rec.input_tokens < 1 || rec.output_tokens < 1 {
            return Err(err("token counts must be at least 1"));
        }
        out.push(Request {
            id: out.len() as u64,
            arrival_time: rec.arrival_ms / 1000.0,
            input_tokens: rec.input_tokens as u64,
            output_tokens: rec.output_tokens as u64,
        });
    }
    if out.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(out)
}

fn parse_record(body: &str) -> Result<Record, String> {
    if let Ok(r) = serde_json::from_str::<Record>(body) {
        return Ok(r);
    }
    let inner = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| "expected a {...} record".to_string())?;
    let mut quoted = String::from("{");
    for (n, field) in inner
        .split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .enumerate()
    {
        let (k, v) = field
            .split_once(':')
            .ok_or_else(|| format!("field {field:?} has no ':'"))?;
        if n > 0 {
            quoted.push(',');
        }
        let key = k.trim().trim_matches('"');
        quoted.push_str(&format!("\"{key}\":{}", v.trim()));
    }
    quoted.push('}');
    serde_json::from_str::<Record>(&quoted).map_err(|e| e.to_string())
}

/// Serialize requests back into the line format.
pub fn write_trace(requests: &[Request]) -> String {
    let mut s = String::new();
    for r in requests {
        s.push_str(&format!(
            "{{\"arrival_ms\":{},\"input_tokens\":{},\"output_tokens\":{}}}\n",
            r.arrival_time * 1000.0,
            r.input_tokens,
            r.output_tokens
        ));
    }
    s
}

/// Output length matching the production output share for `input` tokens.
pub fn share_output(input: u64) -> u64 {
    ((input as f64 * OUTPUT_SHARE / (1.0 - OUTPUT_SHARE)).round() as u64).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Queries per minute.
    pub short_rate: f64,
    pub long_rate: f64,
    pub short_len: u64,
    pub long_len: u64,
    /// Output lengths; `None` uses the production output share.
    pub short_out: Option<u64>,
    pub long_out: Option<u64>,
    pub duration: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            short_rate: 60.0,
            long_rate: 1.0,
            short_len: 1_000,
            long_len: 50_000,
            short_out: None,
            long_out: None,
            duration: 600.0,
            seed: 42,
        }
    }
}

fn poisson_arrivals(rng: &mut ChaCha8Rng, per_minute: f64, duration: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if per_minute <= 0.0 || duration <= 0.0 {
        return out;
    }
    let exp = Exp::new(per_minute / 60.0).expect("positive rate");
    let mut t = exp.sample(rng);
    while t < duration {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}

/// Two Poisson streams of fixed-length requests, merged by arrival time.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shorts = poisson_arrivals(&mut rng, cfg.short_rate, cfg.duration);
    let longs = poisson_arrivals(&mut rng, cfg.long_rate, cfg.duration);
    let mk = |t: f64, input: u64, out: Option<u64>| Request {
        id: 0,
        arrival_time: t,
        input_tokens: input.max(1),
        output_tokens: out.unwrap_or_else(|| share_output(input)).max(1),
    };
    let mut reqs: Vec<Request> = shorts
        .into_iter()
        .map(|t| mk(t, cfg.short_len, cfg.short_out))
        .chain(longs.into_iter().map(|t| mk(t, cfg.long_len, cfg.long_out)))
        .collect();
    reqs.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    for (i, r) in reqs.iter_mut().enumerate() {
        r.id = i as u64;
    }
    reqs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailConfig {
    pub rate: f64,
    pub median_len: f64,
    /// Log-space standard deviation.
    pub sigma: f64,
    pub max_len: u64,
    pub duration: f64,
    pub seed: u64,
}

/// Poisson arrivals with log-normal input lengths, truncated at `max_len`.
/// Most requests are short and a thin tail runs long.
pub fn gen_long_tail(cfg: &LongTailConfig) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arrivals = poisson_arrivals(&mut rng, cfg.rate, cfg.duration);
    let dist = LogNormal::new(cfg.median_len.max(1.0).ln(), cfg.sigma.max(0.0))
        .expect("finite parameters");
    arrivals
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let input = (dist.sample(&mut rng).round() as u64).clamp(1, cfg.max_len.max(1));
            // output jitters around the production share
            let jitter: f64 = rng.random_range(0.5..1.5);
            let output = ((share_output(input) as f64 * jitter).round() as u64).max(1);
            Request {
                id: i as u64,
                arrival_time: t,
                input_tokens: input,
                output_tokens: output,
            }
        })
        .collect()
}
