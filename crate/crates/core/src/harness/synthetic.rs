use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mesh::{grid, icosphere, MeshTopology};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseShape {
    Icosphere { subdivisions: u32, radius: f64 },
    Grid { width: usize, height: usize, spacing: f64 },
}

impl BaseShape {
    pub fn build(&self) -> MeshTopology {
        match *self {
            BaseShape::Icosphere { subdivisions, radius } => icosphere(subdivisions, radius),
            BaseShape::Grid { width, height, spacing } => grid(width, height, spacing),
        }
    }
}

/// A family of smooth deformations of one base mesh.
///
/// Latent `j` owns a plane wave `sin(f_j * (w_j . u) + phase_j)` over the
/// unit direction (sphere) or normalized position (grid) `u` of each vertex.
/// A coefficient `c_j` in `[-1, 1]` shifts the wave's phase by
/// `phase_shift * c_j` and the difference from the unshifted wave, scaled by
/// `amplitude_j`, displaces the vertex along its normal. Shapes are
/// therefore a nonlinear function of the coefficients and `c = 0` returns
/// the base mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub base: BaseShape,
    pub latent_dim_true: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Standard deviation of Gaussian vertex noise, in mm.
    pub noise_std: f64,
    pub amplitude_range: [f64; 2],
    pub frequency_range: [f64; 2],
    pub phase_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            base: BaseShape::Icosphere {
                subdivisions: 2,
                radius: 100.0,
            },
            latent_dim_true: 8,
            num_train: 2000,
            num_test: 200,
            noise_std: 0.0,
            amplitude_range: [5.0, 10.0],
            frequency_range: [2.0, 4.0],
            phase_shift: 0.75 * PI,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Wave {
    direction: [f64; 3],
    frequency: f64,
    phase: f64,
    amplitude: f64,
}

/// The deformation field of a spec, independent of any sampled coefficients.
#[derive(Debug, Clone)]
pub struct Deformer {
    base: MeshTopology,
    /// Per-vertex wave coordinate and displacement direction.
    frames: Vec<([f64; 3], [f64; 3])>,
    waves: Vec<Wave>,
    phase_shift: f64,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

impl Deformer {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        let [a0, a1] = spec.amplitude_range;
        let [f0, f1] = spec.frequency_range;
        if !(a0 <= a1 && f0 <= f1 && a0 >= 0.0 && f0 >= 0.0) {
            return Err(Error::config("amplitude and frequency ranges must be ordered and non-negative"));
        }
        let base = spec.base.build();
        let pos = base.require_positions()?;
        let frames = match spec.base {
            BaseShape::Icosphere { .. } => pos.iter().map(|&p| (normalize(p), normalize(p))).collect(),
            BaseShape::Grid { width, height, spacing } => {
                let (w, h) = ((width - 1) as f64 * spacing, (height - 1) as f64 * spacing);
                let scale = w.max(h).max(f64::MIN_POSITIVE);
                pos.iter()
                    .map(|p| ([(p[0] - w / 2.0) / scale, (p[1] - h / 2.0) / scale, 0.0], [0.0, 0.0, 1.0]))
                    .collect()
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let gauss = Normal::new(0.0, 1.0).expect("unit normal");
        let waves = (0..spec.latent_dim_true)
            .map(|_| {
                let mut dir = [gauss.sample(&mut rng), gauss.sample(&mut rng), gauss.sample(&mut rng)];
                if matches!(spec.base, BaseShape::Grid { .. }) {
                    dir[2] = 0.0;
                }
                Wave {
                    direction: normalize(dir),
                    frequency: rng.random_range(f0..=f1),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude: rng.random_range(a0..=a1),
                }
            })
            .collect();
        Ok(Deformer {
            base,
            frames,
            waves,
            phase_shift: spec.phase_shift,
        })
    }

    pub fn base(&self) -> &MeshTopology {
        &self.base
    }

    pub fn latent_dim(&self) -> usize {
        self.waves.len()
    }

    /// Vertex positions for coefficients `c`, flattened `[N * 3]`.
    pub fn apply(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.waves.len() {
            return Err(Error::shape(format!("{} coefficients for {} latents", c.len(), self.waves.len())));
        }
        let pos = self.base.require_positions()?;
        let mut out = Vec::with_capacity(pos.len() * 3);
        for (p, (u, normal)) in pos.iter().zip(&self.frames) {
            let mut disp = 0.0;
            for (w, &cj) in self.waves.iter().zip(c) {
                if cj == 0.0 {
                    continue;
                }
                let arg = w.frequency * (w.direction[0] * u[0] + w.direction[1] * u[1] + w.direction[2] * u[2]) + w.phase;
                disp += w.amplitude * ((arg + self.phase_shift * cj).sin() - arg.sin());
            }
            out.extend((0..3).map(|k| p[k] + disp * normal[k]));
        }
        Ok(out)
    }
}

/// Samples train and test sets. Both draw coefficients uniformly from
/// `[-1, 1]`; all randomness derives from `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.latent_dim_true == 0 {
        return Err(Error::config("latent_dim_true must be positive"));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::config("noise_std must be non-negative"));
    }
    let deformer = Deformer::new(spec)?;
    let n = deformer.base().num_vertices();
    let l = spec.latent_dim_true;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut draw = |count: usize| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut verts = Vec::with_capacity(count * n * 3);
        let mut latents = Vec::with_capacity(count * l);
        for _ in 0..count {
            let c: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let mut v = deformer.apply(&c)?;
            if spec.noise_std > 0.0 {
                v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
            verts.extend(v);
            latents.extend(c);
        }
        Ok((Tensor::new(vec![count, n, 3], verts)?, Tensor::new(vec![count, l], latents)?))
    };
    let (train, train_latents) = draw(spec.num_train)?;
    let (test, test_latents) = draw(spec.num_test)?;
    Ok(Dataset {
        template: deformer.base().clone(),
        train,
        test,
        train_latents: Some(train_latents),
        test_latents: Some(test_latents),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_train: 6,
            num_test: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_coefficients_give_the_base_mesh() {
        let d = Deformer::new(&small()).unwrap();
        let flat: Vec<f64> = d.base().positions().unwrap().iter().flatten().copied().collect();
        assert_eq!(d.apply(&[0.0; 8]).unwrap(), flat);
    }

    #[test]
    fn same_coefficients_same_mesh() {
        let d = Deformer::new(&small()).unwrap();
        let c = [0.3, -0.2, 0.9, 0.0, -1.0, 0.5, 0.1, -0.7];
        assert_eq!(d.apply(&c).unwrap(), d.apply(&c).unwrap());
        assert_ne!(d.apply(&c).unwrap(), d.apply(&[0.0; 8]).unwrap());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn displacement_is_bounded_by_amplitudes() {
        let spec = small();
        let ds = generate_synthetic(&spec).unwrap();
        let bound = 2.0 * spec.amplitude_range[1] * spec.latent_dim_true as f64;
        for v in ds.train.data().chunks(3) {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 100.0).abs() <= bound);
        }
    }

    #[test]
    fn grid_base_moves_along_z_only() {
        let spec = SyntheticSpec {
            base: BaseShape::Grid { width: 5, height: 4, spacing: 10.0 },
            ..small()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let base = spec.base.build();
        for s in ds.train.data().chunks(20 * 3) {
            for (v, p) in s.chunks(3).zip(base.positions().unwrap()) {
                assert_eq!((v[0], v[1]), (p[0], p[1]));
            }
        }
    }
}
