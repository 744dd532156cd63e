use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, StudyCase};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Raw labels of the nested regions, outermost first.
const REGION_LABELS: [u8; 3] = [2, 1, 4];

/// Synthetic tumour: three nested axis-aligned ellipsoids on background.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub id: String,
    pub shape: [usize; 3],
    /// Semi-axes in voxels for the outer, middle and core regions.
    pub radii: [[f64; 3]; 3],
    /// `(offset, slope)` per modality; intensity = offset + slope * depth,
    /// where depth counts how many regions contain the voxel.
    pub intensity: [(f64, f64); 4],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Cube of side `n` with radii `0.32n`, `0.2n`, `0.1n`.
    pub fn cube(id: impl Into<String>, n: usize, seed: u64) -> Self {
        let r = |f: f64| [f * n as f64; 3];
        Self {
            id: id.into(),
            shape: [n; 3],
            radii: [r(0.32), r(0.2), r(0.1)],
            intensity: [(0.1, 0.3), (0.8, -0.2), (0.2, 0.15), (0.15, 0.25)],
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.shape.contains(&0) {
            return Err(DataError::PhantomSpec(format!("empty grid {:?}", self.shape)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(DataError::PhantomSpec(format!("noise sigma {}", self.noise_sigma)));
        }
        let [outer, middle, core] = self.radii;
        let positive = self.radii.iter().flatten().all(|&r| r > 0.0 && r.is_finite());
        let nested = (0..3).all(|a| core[a] < middle[a] && middle[a] < outer[a]);
        if !positive || !nested {
            return Err(DataError::PhantomRadii(format!("{:?}", self.radii)));
        }
        Ok(())
    }
}

/// Deterministic in `spec.seed`: the ellipsoid center is jittered by up to
/// an eighth of the slack on each axis and Gaussian noise is added per
/// modality.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<StudyCase, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center: Vec<f64> = (0..3)
        .map(|a| {
            let mid = (spec.shape[a] as f64 - 1.0) / 2.0;
            let slack = (mid - spec.radii[0][a]).max(0.0) / 8.0;
            mid + if slack > 0.0 { rng.random_range(-slack..=slack) } else { 0.0 }
        })
        .collect();
    let [nx, ny, nz] = spec.shape;
    let mut depth = vec![0u8; nx * ny * nz];
    let mut labels = vec![0u8; nx * ny * nz];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let p = [i as f64, j as f64, k as f64];
                let v = (i * ny + j) * nz + k;
                for (d, r) in spec.radii.iter().enumerate() {
                    let q: f64 = (0..3).map(|a| ((p[a] - center[a]) / r[a]).powi(2)).sum();
                    if q <= 1.0 {
                        depth[v] = d as u8 + 1;
                        labels[v] = REGION_LABELS[d];
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::PhantomSpec(e.to_string()))?;
    let shape = spec.shape.to_vec();
    let mut modality = |(offset, slope): (f64, f64)| {
        let data = depth
            .iter()
            .map(|&d| (offset + slope * d as f64 + noise.sample(&mut rng)) as f32)
            .collect();
        Tensor::new(shape.clone(), data)
    };
    Ok(StudyCase {
        id: spec.id.clone(),
        flair: modality(spec.intensity[0])?,
        t1: modality(spec.intensity[1])?,
        t1ce: modality(spec.intensity[2])?,
        t2: modality(spec.intensity[3])?,
        mask: LabelMask::new(shape, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_nested_and_deterministic() {
        let spec = PhantomSpec::cube("p", 24, 4);
        let a = generate_phantom(&spec).unwrap();
        assert_eq!(a, generate_phantom(&spec).unwrap());
        a.validate().unwrap();
        let h = a.mask.histogram();
        assert!(h[0] > 0 && h[1] > 0 && h[2] > 0 && h[4] > 0);
        assert_eq!(h[0] + h[1] + h[2] + h[4], 24 * 24 * 24);
    }

    #[test]
    fn non_nested_radii_rejected() {
        let mut spec = PhantomSpec::cube("p", 16, 0);
        spec.radii[2] = [5.0; 3];
        assert!(matches!(generate_phantom(&spec), Err(DataError::PhantomRadii(_))));
        spec = PhantomSpec::cube("p", 16, 0);
        spec.noise_sigma = -1.0;
        assert!(generate_phantom(&spec).is_err());
    }
}
