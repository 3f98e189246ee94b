//! Slice-wise promptable segmentation: the [`Segmenter`] interface, a deterministic
//! region-growing implementation and a client for external backends speaking the
//! line-delimited JSON protocol.

mod external;
pub mod protocol;
mod spec;
mod toy;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use external::ExternalSegmenter;
pub use spec::SegmenterSpec;
pub use toy::ToySegmenter;

use crate::prompts::{Polarity, PromptSet, StructureId};
use crate::scalar::Real;
use crate::volume::{Grid, Volume, VolumeKind};

#[derive(Debug, Error)]
pub enum SegmenterError {
    #[error("request has no positive point")]
    NoPositivePoints,
    #[error("point ({x}, {y}) lies outside the {width}×{height} slice")]
    PointOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("pixel buffer holds {got} values, expected {expected}")]
    PixelCount { expected: usize, got: usize },
    #[error("cannot start backend `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot connect to backend at {address}: {source}")]
    Connect {
        address: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("backend did not answer request {request_id} within {seconds} s")]
    Timeout { request_id: u64, seconds: f64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("response echoes request id {got}, expected {expected}")]
    RequestIdMismatch { expected: u64, got: u64 },
    #[error("mask has {got} pixels, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backend reported an error for request {request_id}: {message}")]
    Backend { request_id: u64, message: String },
    #[error("invalid segmenter spec `{0}` (expected toy[:tau], exec:<command> or tcp:<host>:<port>)")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capabilities {
    pub name: String,
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePoint {
    /// Continuous pixel coordinates: `x` along the row, `y` down the columns.
    pub x: f64,
    pub y: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRequest {
    pub request_id: u64,
    pub structure: StructureId,
    pub width: usize,
    pub height: usize,
    pub spacing: [f64; 2],
    /// Row-major, `height` rows of `width` pixels.
    pub pixels: Vec<f32>,
    pub points: Vec<SlicePoint>,
}

static NEXT_REQUEST_ID: AtomicU64 = AtomicU64::new(1);

/// Process-wide unique request id.
pub fn next_request_id() -> u64 {
    NEXT_REQUEST_ID.fetch_add(1, Ordering::Relaxed)
}

impl SliceRequest {
    /// Checks the request invariants: matching pixel count, at least one positive point and
    /// every point inside the slice.
    pub fn validate(&self) -> Result<(), SegmenterError> {
        if self.pixels.len() != self.width * self.height {
            return Err(SegmenterError::PixelCount {
                expected: self.width * self.height,
                got: self.pixels.len(),
            });
        }
        if !self.points.iter().any(|p| p.polarity == Polarity::Positive) {
            return Err(SegmenterError::NoPositivePoints);
        }
        for p in &self.points {
            if self.pixel_of(p).is_none() {
                return Err(SegmenterError::PointOutOfBounds {
                    x: p.x,
                    y: p.y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }

    /// Row-major index of the pixel nearest to `p`.
    pub fn pixel_of(&self, p: &SlicePoint) -> Option<usize> {
        let (x, y) = (p.x.round(), p.y.round());
        let inside = x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height;
        (p.x.is_finite() && p.y.is_finite() && inside).then(|| y as usize * self.width + x as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceResponse {
    pub request_id: u64,
    /// Row-major 0/1 values.
    pub mask: Vec<u8>,
    pub score: Option<f64>,
}

pub trait Segmenter {
    fn capabilities(&self) -> Capabilities;

    fn segment_slice(&mut self, req: &SliceRequest) -> Result<SliceResponse, SegmenterError>;
}

impl<S: Segmenter + ?Sized> Segmenter for Box<S> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn segment_slice(&mut self, req: &SliceRequest) -> Result<SliceResponse, SegmenterError> {
        (**self).segment_slice(req)
    }
}

#[derive(Debug, Error)]
pub enum SegmentVolumeError {
    #[error("no positive prompt for {0}")]
    StructureEmpty(StructureId),
    #[error("slice {slice}: {source}")]
    Slice {
        slice: usize,
        #[source]
        source: SegmenterError,
    },
}

/// Segments every slice that carries a positive prompt of `structure`, using only that slice's
/// prompts; other slices stay empty. The result is a binary mask on `vol`'s grid.
pub fn segment_volume<T: Real, S: Segmenter + ?Sized>(
    seg: &mut S,
    vol: &Volume<T>,
    ps: &PromptSet,
    structure: &StructureId,
) -> Result<Volume<f32>, SegmentVolumeError> {
    let grid: &Grid = vol.grid();
    let [nx, ny, nz] = grid.dims;
    let mut by_slice: BTreeMap<usize, Vec<SlicePoint>> = BTreeMap::new();
    for p in ps.for_structure(structure) {
        let k = p.slice();
        if k < 0 || k >= nz as i64 {
            continue;
        }
        by_slice.entry(k as usize).or_default().push(SlicePoint {
            x: p.position.0[0],
            y: p.position.0[1],
            polarity: p.polarity,
        });
    }
    by_slice.retain(|_, pts| pts.iter().any(|p| p.polarity == Polarity::Positive));
    if by_slice.is_empty() {
        return Err(SegmentVolumeError::StructureEmpty(structure.clone()));
    }
    let mut data = vec![0f32; grid.len()];
    for (k, points) in by_slice {
        let req = SliceRequest {
            request_id: next_request_id(),
            structure: structure.clone(),
            width: nx,
            height: ny,
            spacing: [grid.spacing[0], grid.spacing[1]],
            pixels: vol.slice_z(k).iter().map(|v| v.as_f64() as f32).collect(),
            points,
        };
        let wrap = |source| SegmentVolumeError::Slice { slice: k, source };
        req.validate().map_err(wrap)?;
        let resp = seg.segment_slice(&req).map_err(wrap)?;
        if resp.mask.len() != nx * ny {
            return Err(wrap(SegmenterError::DimensionMismatch {
                expected: nx * ny,
                got: resp.mask.len(),
            }));
        }
        let out = &mut data[k * nx * ny..(k + 1) * nx * ny];
        for (o, m) in out.iter_mut().zip(&resp.mask) {
            *o = if *m != 0 { 1.0 } else { 0.0 };
        }
    }
    Ok(Volume::new(grid.clone(), data, VolumeKind::Mask).expect("grid-sized buffer"))
}

#[cfg(test)]
mod tests;
