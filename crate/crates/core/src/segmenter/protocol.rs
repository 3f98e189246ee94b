//! Line-delimited JSON wire format.
//!
//! Request: `{"request_id", "structure", "width", "height", "spacing": [sx, sy], "pixels_b64",
//! "points": [{"x", "y", "polarity": "pos"|"neg"}]}` with pixels as little-endian `f32`,
//! row-major. Response: `{"request_id", "mask_b64", "score"?}` with one byte (0 or 1) per pixel,
//! row-major, or `{"request_id", "error"}`; `request_id` is `null` when the request could not
//! be parsed.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{SegmenterError, SlicePoint, SliceRequest, SliceResponse};
use crate::prompts::{Polarity, StructureId};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WirePoint {
    x: f64,
    y: f64,
    polarity: Polarity,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRequest {
    request_id: u64,
    structure: StructureId,
    width: usize,
    height: usize,
    spacing: [f64; 2],
    pixels_b64: String,
    points: Vec<WirePoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireResponse {
    request_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn protocol(msg: impl Into<String>) -> SegmenterError {
    SegmenterError::Protocol(msg.into())
}

/// Serializes a request as one JSON line (without the trailing newline).
pub fn encode_request(req: &SliceRequest) -> String {
    let mut bytes = vec![0u8; 4 * req.pixels.len()];
    LittleEndian::write_f32_into(&req.pixels, &mut bytes);
    let wire = WireRequest {
        request_id: req.request_id,
        structure: req.structure.clone(),
        width: req.width,
        height: req.height,
        spacing: req.spacing,
        pixels_b64: STANDARD.encode(bytes),
        points: req
            .points
            .iter()
            .map(|p| WirePoint {
                x: p.x,
                y: p.y,
                polarity: p.polarity,
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("requests always serialize")
}

/// Parses and validates one request line. On failure the request id is returned when it could
/// be recovered, so the error reply can echo it.
pub fn decode_request(line: &str) -> Result<SliceRequest, (Option<u64>, SegmenterError)> {
    let wire: WireRequest = serde_json::from_str(line).map_err(|e| {
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("request_id").and_then(|id| id.as_u64()));
        (id, protocol(e.to_string()))
    })?;
    let id = Some(wire.request_id);
    let bytes = STANDARD
        .decode(&wire.pixels_b64)
        .map_err(|e| (id, protocol(format!("pixels_b64: {e}"))))?;
    if bytes.len() % 4 != 0 {
        return Err((id, protocol("pixels_b64 length is not a multiple of 4")));
    }
    let mut pixels = vec![0f32; bytes.len() / 4];
    LittleEndian::read_f32_into(&bytes, &mut pixels);
    let req = SliceRequest {
        request_id: wire.request_id,
        structure: wire.structure,
        width: wire.width,
        height: wire.height,
        spacing: wire.spacing,
        pixels,
        points: wire
            .points
            .into_iter()
            .map(|p| SlicePoint {
                x: p.x,
                y: p.y,
                polarity: p.polarity,
            })
            .collect(),
    };
    req.validate().map_err(|e| (id, e))?;
    Ok(req)
}

pub fn encode_response(resp: &SliceResponse) -> String {
    let wire = WireResponse {
        request_id: Some(resp.request_id),
        mask_b64: Some(STANDARD.encode(&resp.mask)),
        score: resp.score,
        error: None,
    };
    serde_json::to_string(&wire).expect("responses always serialize")
}

pub fn encode_error(request_id: Option<u64>, message: &str) -> String {
    let wire = WireResponse {
        request_id,
        mask_b64: None,
        score: None,
        error: Some(message.to_string()),
    };
    serde_json::to_string(&wire).expect("responses always serialize")
}

/// Parses a response line and checks it against the request it answers.
pub fn decode_response(line: &str, req: &SliceRequest) -> Result<SliceResponse, SegmenterError> {
    let wire: WireResponse = serde_json::from_str(line).map_err(|e| protocol(e.to_string()))?;
    let got = wire.request_id.ok_or_else(|| protocol("response without request_id"))?;
    if got != req.request_id {
        return Err(SegmenterError::RequestIdMismatch {
            expected: req.request_id,
            got,
        });
    }
    if let Some(message) = wire.error {
        return Err(SegmenterError::Backend {
            request_id: got,
            message,
        });
    }
    let b64 = wire.mask_b64.ok_or_else(|| protocol("response without mask_b64"))?;
    let mask = STANDARD.decode(b64).map_err(|e| protocol(format!("mask_b64: {e}")))?;
    if mask.len() != req.width * req.height {
        return Err(SegmenterError::DimensionMismatch {
            expected: req.width * req.height,
            got: mask.len(),
        });
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(protocol("mask values must be 0 or 1"));
    }
    Ok(SliceResponse {
        request_id: got,
        mask,
        score: wire.score,
    })
}
