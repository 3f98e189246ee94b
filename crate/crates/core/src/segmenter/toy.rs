use std::collections::VecDeque;

use super::{Capabilities, Segmenter, SegmenterError, SliceRequest, SliceResponse};
use crate::prompts::Polarity;

/// Seeded region growing: 4-connected flood fill from each positive point over pixels within
/// `tau` of the seed intensity, united over seeds; connected components of the union that
/// contain a negative point are then removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySegmenter {
    pub tau: f64,
}

impl Default for ToySegmenter {
    fn default() -> Self {
        Self { tau: 150.0 }
    }
}

impl ToySegmenter {
    pub fn new(tau: f64) -> Self {
        Self { tau }
    }

    /// Grown region before negative-component removal.
    pub fn grow(&self, req: &SliceRequest) -> Result<Vec<bool>, SegmenterError> {
        req.validate()?;
        let (w, h) = (req.width, req.height);
        let mut grown = vec![false; w * h];
        let mut queue = VecDeque::new();
        for p in req.points.iter().filter(|p| p.polarity == Polarity::Positive) {
            let seed = req.pixel_of(p).expect("validated");
            let base = f64::from(req.pixels[seed]);
            let mut seen = vec![false; w * h];
            seen[seed] = true;
            queue.push_back(seed);
            while let Some(i) = queue.pop_front() {
                grown[i] = true;
                for n in neighbours(i, w, h) {
                    if !seen[n] && (f64::from(req.pixels[n]) - base).abs() <= self.tau {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        Ok(grown)
    }
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

impl Segmenter for ToySegmenter {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            name: format!("toy(tau={})", self.tau),
            deterministic: true,
        }
    }

    fn segment_slice(&mut self, req: &SliceRequest) -> Result<SliceResponse, SegmenterError> {
        let mut mask = self.grow(req)?;
        let (w, h) = (req.width, req.height);
        let mut queue = VecDeque::new();
        for p in req.points.iter().filter(|p| p.polarity == Polarity::Negative) {
            let start = req.pixel_of(p).expect("validated");
            if !mask[start] {
                continue;
            }
            mask[start] = false;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for n in neighbours(i, w, h) {
                    if mask[n] {
                        mask[n] = false;
                        queue.push_back(n);
                    }
                }
            }
        }
        Ok(SliceResponse {
            request_id: req.request_id,
            mask: mask.into_iter().map(u8::from).collect(),
            score: None,
        })
    }
}
