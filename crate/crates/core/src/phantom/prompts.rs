use std::collections::BTreeMap;

use crate::metrics::squared_distance_transform;
use crate::prompts::{PointPrompt, Polarity, PromptSet, StructureId};
use crate::volume::Volume;

/// Positive points per structure and slice.
const POSITIVES: usize = 3;
const NEGATIVES: usize = 2;
/// Positives are drawn from pixels at least this fraction of the slice's deepest interior distance.
const DEPTH_FRACTION: f64 = 0.7;
/// Negatives keep at least this distance (mm) from every structure.
const NEGATIVE_CLEARANCE_MM: f64 = 6.0;

/// Per slice and structure: up to 3 positive points spread over the deepest interior pixels
/// (farthest-point sampling) and 2 negative points in clear background near the structure.
pub fn default_prompts(masks: &BTreeMap<StructureId, Volume<f32>>, image_id: &str) -> PromptSet {
    let mut prompts = Vec::new();
    let Some(first) = masks.values().next() else {
        return PromptSet::new(image_id, prompts);
    };
    let [nx, ny, nz] = first.dims();
    let sp = first.spacing();
    let plane = [nx, ny, 1];
    let pixel_dist = |a: usize, b: usize| {
        let (dx, dy) = ((a % nx) as f64 - (b % nx) as f64, (a / nx) as f64 - (b / nx) as f64);
        (dx * sp[0]).powi(2) + (dy * sp[1]).powi(2)
    };
    for k in 0..nz {
        let any_fg: Vec<bool> = (0..nx * ny)
            .map(|p| masks.values().any(|m| m.slice_z(k)[p] != 0.0))
            .collect();
        let clearance = squared_distance_transform(plane, sp, &any_fg);
        let clear: Vec<usize> = (0..nx * ny)
            .filter(|&p| clearance[p] >= NEGATIVE_CLEARANCE_MM * NEGATIVE_CLEARANCE_MM)
            .collect();
        for (s, m) in masks {
            let fg = m.slice_z(k);
            if fg.iter().all(|v| *v == 0.0) {
                continue;
            }
            let outside: Vec<bool> = fg.iter().map(|v| *v == 0.0).collect();
            let depth = squared_distance_transform(plane, sp, &outside);
            let deepest = (0..nx * ny)
                .filter(|&p| !outside[p])
                .map(|p| depth[p])
                .fold(0.0, f64::max);
            // squared distances, so the depth fraction is squared too
            let candidates: Vec<usize> = (0..nx * ny)
                .filter(|&p| !outside[p] && depth[p] >= DEPTH_FRACTION * DEPTH_FRACTION * deepest)
                .collect();
            let mut chosen: Vec<usize> = Vec::new();
            let start = *candidates
                .iter()
                .max_by(|a, b| depth[**a].total_cmp(&depth[**b]).then(b.cmp(a)))
                .unwrap();
            chosen.push(start);
            while chosen.len() < POSITIVES {
                let next = candidates
                    .iter()
                    .map(|&p| {
                        (
                            p,
                            chosen.iter().map(|&c| pixel_dist(p, c)).fold(f64::INFINITY, f64::min),
                        )
                    })
                    .filter(|(_, d)| *d > 0.0)
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                match next {
                    Some((p, _)) => chosen.push(p),
                    None => break,
                }
            }
            for p in &chosen {
                prompts.push(PointPrompt::new(
                    s.clone(),
                    Polarity::Positive,
                    [(p % nx) as f64, (p / nx) as f64, k as f64],
                ));
            }
            let n = (nx * ny - outside.iter().filter(|&&o| o).count()) as f64;
            let centroid = (0..nx * ny).filter(|&p| !outside[p]).fold([0.0, 0.0], |acc, p| {
                [acc[0] + (p % nx) as f64 / n, acc[1] + (p / nx) as f64 / n]
            });
            let nearest = |target: [f64; 2], exclude: &[usize]| {
                clear
                    .iter()
                    .filter(|p| !exclude.contains(p))
                    .map(|&p| {
                        let d = ((p % nx) as f64 - target[0]).powi(2) * sp[0] * sp[0]
                            + ((p / nx) as f64 - target[1]).powi(2) * sp[1] * sp[1];
                        (p, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .map(|(p, _)| p)
            };
            let mut negatives = Vec::new();
            if let Some(a) = nearest(centroid, &[]) {
                negatives.push(a);
                let mirror = [2.0 * centroid[0] - (a % nx) as f64, 2.0 * centroid[1] - (a / nx) as f64];
                if let Some(b) = nearest(mirror, &negatives) {
                    negatives.push(b);
                }
            }
            for p in negatives.into_iter().take(NEGATIVES) {
                prompts.push(PointPrompt::new(
                    s.clone(),
                    Polarity::Negative,
                    [(p % nx) as f64, (p / nx) as f64, k as f64],
                ));
            }
        }
    }
    PromptSet::new(image_id, prompts)
}
