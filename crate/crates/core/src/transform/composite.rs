use serde::{Deserialize, Serialize};

use super::{Affine, Ffd, SpatialTransform, TransformError};
use crate::scalar::Real;

/// Affine followed by an optional FFD refinement in the affine-mapped frame:
/// `T(x) = A(x) + ffd(A(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite<S> {
    pub affine: Affine<S>,
    pub ffd: Option<Ffd<S>>,
}

impl<S: Real> Composite<S> {
    pub fn identity() -> Self {
        Self::from_affine(Affine::identity())
    }

    pub fn from_affine(affine: Affine<S>) -> Self {
        Self { affine, ffd: None }
    }

    pub fn with_ffd(affine: Affine<S>, ffd: Ffd<S>) -> Self {
        Self { affine, ffd: Some(ffd) }
    }

    /// Jacobian of the full map at `x`.
    pub fn jacobian(&self, x: [S; 3]) -> [[S; 3]; 3] {
        let a = self.affine.matrix;
        match &self.ffd {
            None => a,
            Some(f) => {
                let mut j = f.jacobian(self.affine.apply(x));
                for (r, row) in j.iter_mut().enumerate() {
                    row[r] = row[r] + S::one();
                }
                super::affine::mat_mul(&j, &a)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TransformFile::from(self)).expect("transform serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TransformError> {
        let file: TransformFile = serde_json::from_str(text).map_err(|e| TransformError::Parse(e.to_string()))?;
        file.try_into()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TransformError> {
        std::fs::write(path, self.to_json()).map_err(|e| TransformError::Io(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TransformError> {
        let text = std::fs::read_to_string(path).map_err(|e| TransformError::Io(e.to_string()))?;
        Self::from_json(&text)
    }
}

impl<S: Real> SpatialTransform<S> for Composite<S> {
    #[inline]
    fn apply_point(&self, x: [S; 3]) -> [S; 3] {
        let a = self.affine.apply(x);
        match &self.ffd {
            None => a,
            Some(f) => {
                let d = f.displacement(a);
                [a[0] + d[0], a[1] + d[1], a[2] + d[2]]
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AffineFile {
    matrix: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct FfdFile {
    grid_dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    displacements: Vec<f64>,
}

/// On-disk transform layout: row-major matrix, interleaved control displacements.
#[derive(Serialize, Deserialize)]
struct TransformFile {
    affine: AffineFile,
    #[serde(default)]
    ffd: Option<FfdFile>,
}

impl<S: Real> From<&Composite<S>> for TransformFile {
    fn from(t: &Composite<S>) -> Self {
        let m = t.affine.matrix;
        let mut matrix = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                matrix[3 * r + c] = m[r][c].as_f64();
            }
        }
        Self {
            affine: AffineFile {
                matrix,
                translation: t.affine.translation.map(|v| v.as_f64()),
            },
            ffd: t.ffd.as_ref().map(|f| FfdFile {
                grid_dims: f.dims(),
                spacing: f.spacing().map(|v| v.as_f64()),
                origin: f.origin().map(|v| v.as_f64()),
                displacements: f.coeffs().iter().flat_map(|c| c.iter().map(|v| v.as_f64())).collect(),
            }),
        }
    }
}

impl<S: Real> TryFrom<TransformFile> for Composite<S> {
    type Error = TransformError;

    fn try_from(f: TransformFile) -> Result<Self, Self::Error> {
        let m = f.affine.matrix;
        let matrix = [0, 1, 2].map(|r| [0, 1, 2].map(|c| S::lit(m[3 * r + c])));
        let affine = Affine::new(matrix, f.affine.translation.map(S::lit))?;
        let ffd = match f.ffd {
            None => None,
            Some(g) => {
                if g.displacements.len() % 3 != 0 {
                    return Err(TransformError::Parse(
                        "displacement list length is not a multiple of 3".into(),
                    ));
                }
                let coeffs = g
                    .displacements
                    .chunks_exact(3)
                    .map(|c| [S::lit(c[0]), S::lit(c[1]), S::lit(c[2])])
                    .collect();
                Some(Ffd::new(
                    g.grid_dims,
                    g.spacing.map(S::lit),
                    g.origin.map(S::lit),
                    coeffs,
                )?)
            }
        };
        Ok(Self { affine, ffd })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_transform() -> Composite<f64> {
        let affine = Affine::rotation_about([0.05, -0.02, 0.1], [30.0, 30.0, 10.0])
            .after(&Affine::translation([1.5, -0.5, 2.0]));
        let mut ffd = Ffd::zeros([5, 6, 4], [10.0, 10.0, 15.0], [-10.0, -10.0, -15.0]).unwrap();
        let c = (0..ffd.len())
            .map(|i| [(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos(), 0.1 * i as f64 % 1.0])
            .collect();
        ffd = ffd.with_coeffs(c).unwrap();
        Composite::with_ffd(affine, ffd)
    }

    #[test]
    fn affine_only_matches_affine() {
        let a = Affine::rotation_about([0.1, 0.2, 0.3], [1.0, 2.0, 3.0]);
        let c = Composite::from_affine(a);
        let x = [4.0, -5.0, 6.5];
        assert_eq!(c.apply_point(x), a.apply(x));
    }

    #[test]
    fn matches_manual_evaluation() {
        let t = sample_transform();
        for x in [[0.0, 0.0, 0.0], [12.5, 7.25, 3.0], [33.3, 41.0, 20.0]] {
            let a = t.affine.apply(x);
            let d = t.ffd.as_ref().unwrap().displacement(a);
            let y = t.apply_point(x);
            for k in 0..3 {
                assert!((y[k] - (a[k] + d[k])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let t = sample_transform();
        let back: Composite<f64> = Composite::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let text = t.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["affine"]["matrix"].as_array().unwrap().len(), 9);
        assert_eq!(v["ffd"]["displacements"].as_array().unwrap().len(), 3 * 5 * 6 * 4);
        let affine_only = Composite::<f64>::identity().to_json();
        let v: serde_json::Value = serde_json::from_str(&affine_only).unwrap();
        assert!(v["ffd"].is_null());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let t = sample_transform();
        let x = [14.0, 22.0, 9.0];
        let j = t.jacobian(x);
        let h = 1e-6;
        for c in 0..3 {
            let mut p = x;
            let mut m = x;
            p[c] += h;
            m[c] -= h;
            let (yp, ym) = (t.apply_point(p), t.apply_point(m));
            for r in 0..3 {
                assert!(((yp[r] - ym[r]) / (2.0 * h) - j[r][c]).abs() < 1e-6);
            }
        }
    }
}
