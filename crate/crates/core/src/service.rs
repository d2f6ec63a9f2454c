//! Line-protocol sidecar: an external process sends base-model logits (or
//! lets the sidecar use its own base model) and receives adjusted logits or
//! a sampled token.
//!
//! One JSON object per line in each direction. Request:
//!
//! ```text
//! {"request_id": <any>, "prefix_ids": [0, 17, 4],
//!  "base_logits": ["-1.5e0", "-inf", ...],      optional; numbers also accepted
//!  "mode": "linear" | "rank" | "none", "alpha_or_k": 5,
//!  "want": "logits" | "token", "seed": 7,
//!  "temperature": 1.0, "top_k": 40, "top_p": 0.9}  sampling options, optional
//! ```
//!
//! Response: `{"request_id", "adjusted_logits" | "token_id", "masked_count"}`
//! or `{"request_id", "error": {"code": "bad_request" | "vocab_mismatch",
//! "message"}}`. Logits travel as decimal strings with 17 significant
//! digits, `-inf` for masked entries. Errors never end the stream.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::corpus::TokenId;
use crate::decode::{adjust, sample_next, AdjustMode, DecodeError, Sampler, Truncation};
use crate::logits::LogitSource;

/// Formats a logit for the wire.
pub fn format_logit(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x > 0.0 {
        "inf".to_owned()
    } else if x < 0.0 {
        "-inf".to_owned()
    } else {
        "nan".to_owned()
    }
}

/// Parses a wire logit written by [`format_logit`] or any decimal float.
pub fn parse_logit(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireFloat {
    Number(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum WireMode {
    None,
    Linear,
    Rank,
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum Want {
    Logits,
    Token,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    #[allow(dead_code)]
    request_id: Value,
    prefix_ids: Vec<TokenId>,
    #[serde(default)]
    base_logits: Option<Vec<WireFloat>>,
    mode: WireMode,
    #[serde(default)]
    alpha_or_k: Option<f64>,
    want: Want,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    top_k: Option<usize>,
    #[serde(default)]
    top_p: Option<f64>,
}

enum Failure {
    BadRequest(String),
    VocabMismatch(String),
}

impl From<DecodeError> for Failure {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::LengthMismatch { .. } | DecodeError::VocabMismatch(_) => Failure::VocabMismatch(e.to_string()),
            other => Failure::BadRequest(other.to_string()),
        }
    }
}

/// Adjusts logits for independent requests. Holds only read-only models.
pub struct Sidecar<'a> {
    base: Option<&'a dyn LogitSource>,
    forget_side: &'a dyn LogitSource,
    retain_side: &'a dyn LogitSource,
}

impl<'a> Sidecar<'a> {
    /// Fails if the auxiliary models (and base, if given) disagree on the
    /// vocabulary size.
    pub fn new(
        base: Option<&'a dyn LogitSource>,
        forget_side: &'a dyn LogitSource,
        retain_side: &'a dyn LogitSource,
    ) -> Result<Self, DecodeError> {
        let v = forget_side.vocab_size();
        let b = base.map_or(v, |b| b.vocab_size());
        if retain_side.vocab_size() != v || b != v {
            return Err(DecodeError::VocabMismatch([b, v, retain_side.vocab_size()]));
        }
        Ok(Self { base, forget_side, retain_side })
    }

    pub fn vocab_size(&self) -> usize {
        self.forget_side.vocab_size()
    }

    /// Handles one request line and returns the response line (without the
    /// trailing newline).
    pub fn handle_line(&self, line: &str) -> String {
        let parsed: Result<Value, _> = serde_json::from_str(line);
        let value = match parsed {
            Ok(v @ Value::Object(_)) => v,
            Ok(_) => return error_response(&Value::Null, Failure::BadRequest("request must be a JSON object".into())),
            Err(e) => return error_response(&Value::Null, Failure::BadRequest(format!("invalid JSON: {e}"))),
        };
        let id = value.get("request_id").cloned().unwrap_or(Value::Null);
        let response = serde_json::from_value::<Request>(value)
            .map_err(|e| Failure::BadRequest(e.to_string()))
            .and_then(|req| self.respond(req));
        match response {
            Ok(mut body) => {
                body["request_id"] = id;
                body.to_string()
            }
            Err(f) => error_response(&id, f),
        }
    }

    fn respond(&self, req: Request) -> Result<Value, Failure> {
        let v = self.vocab_size();
        if req.prefix_ids.is_empty() {
            return Err(Failure::BadRequest("prefix_ids must not be empty".into()));
        }
        if let Some(&id) = req.prefix_ids.iter().find(|&&id| id as usize >= v) {
            return Err(Failure::BadRequest(format!("token id {id} outside vocabulary of size {v}")));
        }
        let mode = match (req.mode, req.alpha_or_k) {
            (WireMode::None, _) => AdjustMode::None,
            (_, None) => return Err(Failure::BadRequest("alpha_or_k is required".into())),
            (WireMode::Linear, Some(alpha)) => AdjustMode::Linear { alpha },
            (WireMode::Rank, Some(k)) if k >= 0.0 && k.fract() == 0.0 => AdjustMode::Rank { k: k as usize },
            (WireMode::Rank, Some(k)) => return Err(Failure::BadRequest(format!("rank k must be a non-negative integer, got {k}"))),
        };
        mode.validate(v)?;

        let base: Vec<f64> = match req.base_logits {
            Some(wire) => {
                if wire.len() != v {
                    return Err(Failure::VocabMismatch(format!("base_logits has {} entries, vocabulary has {v}", wire.len())));
                }
                wire.into_iter()
                    .enumerate()
                    .map(|(i, w)| {
                        let x = match w {
                            WireFloat::Number(x) => Some(x),
                            WireFloat::Text(s) => parse_logit(&s),
                        };
                        match x {
                            Some(x) if x.is_finite() || x == f64::NEG_INFINITY => Ok(x),
                            _ => Err(Failure::BadRequest(format!("base_logits[{i}] is not a finite number or -inf"))),
                        }
                    })
                    .collect::<Result<_, _>>()?
            }
            None => match self.base {
                Some(b) => b.logits(&req.prefix_ids).map_err(DecodeError::from)?.into_values(),
                None => return Err(Failure::BadRequest("base_logits missing and no base model loaded".into())),
            },
        };
        let forget = self.forget_side.logits(&req.prefix_ids).map_err(DecodeError::from)?;
        let retain = self.retain_side.logits(&req.prefix_ids).map_err(DecodeError::from)?;
        let adjusted = adjust(&base, &forget, &retain, mode)?;
        let masked = adjusted.masked_count();

        match req.want {
            Want::Logits => {
                let logits: Vec<String> = adjusted.iter().map(|&x| format_logit(x)).collect();
                Ok(json!({ "adjusted_logits": logits, "masked_count": masked }))
            }
            Want::Token => {
                let truncation = match (req.top_k, req.top_p) {
                    (Some(_), Some(_)) => return Err(Failure::BadRequest("give at most one of top_k and top_p".into())),
                    (Some(m), None) => Truncation::TopK(m),
                    (None, Some(p)) => Truncation::TopP(p),
                    (None, None) => Truncation::None,
                };
                let sampler = Sampler { temperature: req.temperature.unwrap_or(1.0), truncation };
                let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
                let token = sample_next(&adjusted, &sampler, &mut rng)?;
                Ok(json!({ "token_id": token, "masked_count": masked }))
            }
        }
    }

    /// Answers every request line from `input` in order. Blank lines are
    /// skipped.
    pub fn serve_stream<R: BufRead, W: Write>(&self, input: R, mut output: W) -> io::Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(output, "{}", self.handle_line(&line))?;
            output.flush()?;
        }
        Ok(())
    }

    /// Serves each accepted connection on its own thread. Stops after
    /// `max_connections` connections when given.
    pub fn serve_tcp(&self, listener: &TcpListener, max_connections: Option<usize>) -> io::Result<()> {
        std::thread::scope(|scope| {
            for (n, stream) in listener.incoming().enumerate() {
                let stream = stream?;
                scope.spawn(move || {
                    let reader = match stream.try_clone() {
                        Ok(s) => BufReader::new(s),
                        Err(_) => return,
                    };
                    // A client hanging up mid-stream only ends its own connection.
                    let _ = self.serve_stream(reader, BufWriter::new(stream));
                });
                if max_connections.is_some_and(|m| n + 1 >= m) {
                    break;
                }
            }
            Ok(())
        })
    }
}

fn error_response(id: &Value, failure: Failure) -> String {
    let (code, message) = match failure {
        Failure::BadRequest(m) => ("bad_request", m),
        Failure::VocabMismatch(m) => ("vocab_mismatch", m),
    };
    json!({ "request_id": id, "error": { "code": code, "message": message } }).to_string()
}
