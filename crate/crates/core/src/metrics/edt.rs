//! Exact Euclidean distance transform (separable lower-envelope algorithm) with anisotropic
//! spacing.

/// Squared distance (mm²) from every voxel center to the nearest feature voxel center.
/// Without any feature voxel every entry is `+∞`.
pub fn squared_distance_transform(dims: [usize; 3], spacing: [f64; 3], feature: &[bool]) -> Vec<f64> {
    assert_eq!(feature.len(), dims.iter().product::<usize>());
    let mut d: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut scratch = Envelope::default();
    for axis in 0..3 {
        let n = dims[axis];
        if n == 0 {
            continue;
        }
        let s2 = spacing[axis] * spacing[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..n).map(|q| d[base + q * strides[axis]]));
                out.resize(n, 0.0);
                scratch.transform(&line, s2, &mut out);
                for q in 0..n {
                    d[base + q * strides[axis]] = out[q];
                }
            }
        }
    }
    d
}

#[derive(Default)]
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    /// `out[q] = min_p f[p] + s2·(q − p)²` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], s2: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            let qf = q as f64;
            while let Some(&p) = self.sites.last() {
                let pf = p as f64;
                let x = ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                if x <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(x);
                    break;
                }
            }
            if self.sites.is_empty() {
                self.sites.push(q);
                self.bounds.push(f64::NEG_INFINITY);
            }
        }
        if self.sites.is_empty() {
            out.iter_mut().for_each(|v| *v = f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < qf {
                k += 1;
            }
            let p = self.sites[k];
            let dq = qf - p as f64;
            *o = f[p] + s2 * dq * dq;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(dims: [usize; 3], spacing: [f64; 3], feature: &[bool]) -> Vec<f64> {
        let coords = |i: usize| [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        (0..feature.len())
            .map(|i| {
                let a = coords(i);
                (0..feature.len())
                    .filter(|&j| feature[j])
                    .map(|j| {
                        let b = coords(j);
                        (0..3)
                            .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn empty_feature_set_is_infinite() {
        let d = squared_distance_transform([3, 2, 1], [1.0; 3], &[false; 6]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn single_point_anisotropic() {
        let mut f = vec![false; 5 * 5 * 5];
        f[2 + 5 * 2 + 25 * 2] = true;
        let d = squared_distance_transform([5; 3], [1.0, 2.0, 3.0], &f);
        assert_eq!(d[0], 4.0 + 16.0 + 36.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            dims in prop::array::uniform3(1usize..7),
            spacing in prop::array::uniform3(0.5f64..3.0),
            bits in prop::collection::vec(prop::bool::weighted(0.15), 216),
        ) {
            let n = dims.iter().product::<usize>();
            let feature = &bits[..n];
            let fast = squared_distance_transform(dims, spacing, feature);
            let slow = brute(dims, spacing, feature);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!(a == b || (a - b).abs() <= 1e-9 * b.max(1.0), "{} vs {}", a, b);
            }
        }
    }
}
