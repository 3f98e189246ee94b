//! Conformance run of a backend against the golden request suite.

use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use regprompt::segmenter::{ExternalSegmenter, SegmenterSpec};
use serde::Deserialize;
use serde_json::Value;

use crate::args::ProtocolCheckArgs;
use crate::error::CliError;

const REQUESTS: &str = include_str!("../fixtures/protocol/requests.jsonl");
const EXPECTED: &str = include_str!("../fixtures/protocol/expected.jsonl");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Expectation {
    request_id: Option<u64>,
    outcome: Outcome,
    #[serde(default)]
    pixels: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Outcome {
    Mask,
    Error,
}

/// Checks one reply line; `Err` carries the first violation found.
fn check(reply: &str, want: &Expectation) -> Result<(), String> {
    let v: Value = serde_json::from_str(reply).map_err(|e| format!("reply is not JSON: {e}"))?;
    let obj = v.as_object().ok_or("reply is not a JSON object")?;
    let echoed = obj.get("request_id").ok_or("reply has no request_id")?;
    let id_ok = match want.request_id {
        Some(id) => echoed.as_u64() == Some(id),
        None => echoed.is_null(),
    };
    if !id_ok {
        return Err(format!("request_id {echoed} does not echo {:?}", want.request_id));
    }
    match want.outcome {
        Outcome::Error => match obj.get("error") {
            Some(Value::String(_)) if !obj.contains_key("mask_b64") => Ok(()),
            _ => Err("expected an error object".into()),
        },
        Outcome::Mask => {
            if let Some(e) = obj.get("error") {
                return Err(format!("unexpected error: {e}"));
            }
            let b64 = obj
                .get("mask_b64")
                .and_then(Value::as_str)
                .ok_or("reply has no mask_b64 string")?;
            let mask = STANDARD.decode(b64).map_err(|e| format!("mask_b64: {e}"))?;
            if let Some(n) = want.pixels {
                if mask.len() != n {
                    return Err(format!("mask has {} pixels, expected {n}", mask.len()));
                }
            }
            if mask.iter().any(|&m| m > 1) {
                return Err("mask values must be 0 or 1".into());
            }
            match obj.get("score") {
                None | Some(Value::Number(_)) => Ok(()),
                Some(other) => Err(format!("score {other} is not a number")),
            }
        }
    }
}

fn read_suite(dir: Option<&Path>) -> Result<(Vec<String>, Vec<Expectation>), CliError> {
    let (requests, expected) = match dir {
        Some(d) => {
            let read = |name: &str| {
                let p = d.join(name);
                std::fs::read_to_string(&p).map_err(|e| CliError::data(&p, e))
            };
            (read("requests.jsonl")?, read("expected.jsonl")?)
        }
        None => (REQUESTS.to_string(), EXPECTED.to_string()),
    };
    let requests: Vec<String> = requests
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect();
    let expected = expected
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<Expectation>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("expected.jsonl: {e}")))?;
    if requests.len() != expected.len() {
        return Err(CliError::Data(format!(
            "fixture suite has {} requests but {} expectations",
            requests.len(),
            expected.len()
        )));
    }
    Ok((requests, expected))
}

pub fn run(args: &ProtocolCheckArgs) -> Result<(), CliError> {
    let (requests, expected) = read_suite(args.fixtures.as_deref())?;
    let timeout = Duration::from_secs_f64(args.timeout);
    let mut backend = match &args.segmenter {
        SegmenterSpec::Exec { command } => ExternalSegmenter::spawn(command, timeout),
        SegmenterSpec::Tcp { address } => ExternalSegmenter::connect(address, timeout),
        SegmenterSpec::Toy { .. } => {
            return Err(CliError::Usage("protocol-check needs an exec: or tcp: backend".into()))
        }
    }
    .map_err(|e| CliError::Backend(e.to_string()))?;
    let mut failed = 0;
    for (n, (line, want)) in requests.iter().zip(&expected).enumerate() {
        let id = want.request_id.map_or_else(|| "null".to_string(), |i| i.to_string());
        let verdict = backend
            .exchange(line, want.request_id)
            .map_err(|e| e.to_string())
            .and_then(|reply| check(&reply, want));
        match verdict {
            Ok(()) => println!("PASS {:>2} request_id={id}", n + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} request_id={id}: {msg}", n + 1);
            }
        }
    }
    println!("{}/{} fixtures passed", requests.len() - failed, requests.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Backend(format!("{failed} protocol fixture(s) failed")))
    }
}
