//! Small labelled fixtures: thermally jittered B2 crystals with harmonic bond
//! energies, random point clouds, and rigid transforms for invariance checks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_image_vector, norm3, wrap_coordinate};
use crate::scalar::Scalar;
use crate::trajio::AtomicConfiguration;

pub fn species() -> Vec<String> {
    vec!["Cu".into(), "Zr".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonicCrystal {
    /// Unit cells per box edge.
    pub cells: usize,
    pub lattice: f64,
    pub temperatures: Vec<f64>,
    /// Displacement width at the lowest and highest temperature, in Å.
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub cohesive_energy: f64,
    pub spring: f64,
}

impl Default for HarmonicCrystal {
    fn default() -> Self {
        Self {
            cells: 2,
            lattice: 3.2,
            temperatures: vec![700.0, 760.0, 840.0, 920.0, 1000.0],
            sigma_low: 0.03,
            sigma_high: 0.12,
            cohesive_energy: -4.9,
            spring: 1.0,
        }
    }
}

impl HarmonicCrystal {
    pub fn n_atoms(&self) -> usize {
        2 * self.cells.pow(3)
    }

    pub fn box_length(&self) -> f64 {
        self.cells as f64 * self.lattice
    }

    /// Nearest-neighbour bond length `a√3/2`.
    pub fn bond_length(&self) -> f64 {
        self.lattice * 3f64.sqrt() / 2.0
    }

    /// Cutoff that keeps the eight nearest neighbours and drops the six next ones.
    pub fn cutoff(&self) -> f64 {
        0.5 * (self.bond_length() + self.lattice)
    }

    /// Cu on cube corners first, then Zr at the body centres.
    pub fn ideal_positions(&self) -> Vec<[f64; 3]> {
        let a = self.lattice;
        let mut out = Vec::with_capacity(self.n_atoms());
        for shift in [0.0, 0.5] {
            for i in 0..self.cells {
                for j in 0..self.cells {
                    for k in 0..self.cells {
                        out.push([
                            (i as f64 + shift) * a,
                            (j as f64 + shift) * a,
                            (k as f64 + shift) * a,
                        ]);
                    }
                }
            }
        }
        out
    }

    pub fn species_labels(&self) -> Vec<String> {
        let half = self.n_atoms() / 2;
        (0..self.n_atoms())
            .map(|i| if i < half { "Cu" } else { "Zr" }.to_string())
            .collect()
    }

    /// Corner/centre pairs at the bond length in the ideal crystal.
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let ideal = self.ideal_positions();
        let l = [self.box_length(); 3];
        let half = self.n_atoms() / 2;
        let mut out = Vec::new();
        for i in 0..half {
            for j in half..self.n_atoms() {
                let d = norm3(&min_image_vector(&ideal[i], &ideal[j], &l));
                if (d - self.bond_length()).abs() < 1e-9 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn sigma_at(&self, temperature: f64) -> f64 {
        let (t0, t1) = self
            .temperatures
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| {
                (a.min(t), b.max(t))
            });
        let x = if t1 > t0 {
            (temperature - t0) / (t1 - t0)
        } else {
            0.0
        };
        self.sigma_low + x * (self.sigma_high - self.sigma_low)
    }

    /// `N e₀ + ½ k Σ_bonds (d − r₀)²` in eV.
    pub fn energy(&self, positions: &[[f64; 3]], bonds: &[(usize, usize)]) -> f64 {
        let l = [self.box_length(); 3];
        let r0 = self.bond_length();
        let strain: f64 = bonds
            .iter()
            .map(|&(i, j)| {
                let d = norm3(&min_image_vector(&positions[i], &positions[j], &l));
                (d - r0) * (d - r0)
            })
            .sum();
        self.n_atoms() as f64 * self.cohesive_energy + 0.5 * self.spring * strain
    }

    /// `frames` configurations cycling through the temperature list; frame ids
    /// count from zero.
    pub fn generate<S: Scalar>(
        &self,
        frames: usize,
        seed: u64,
    ) -> Result<Vec<AtomicConfiguration<S>>> {
        if self.cells == 0 || !(self.lattice > 0.0) || self.temperatures.is_empty() {
            return Err(Error::arg(
                "crystal needs cells >= 1, a positive lattice and temperatures",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ideal = self.ideal_positions();
        let bonds = self.bonds();
        let l = self.box_length();
        let labels = self.species_labels();
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let t = self.temperatures[f % self.temperatures.len()];
            let jitter =
                Normal::new(0.0, self.sigma_at(t)).map_err(|e| Error::arg(e.to_string()))?;
            let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..l));
            let local: Vec<[f64; 3]> = ideal
                .iter()
                .map(|p| std::array::from_fn(|k| p[k] + jitter.sample(&mut rng)))
                .collect();
            let energy = self.energy(&local, &bonds);
            out.push(AtomicConfiguration {
                positions: local
                    .iter()
                    .map(|p| std::array::from_fn(|k| S::lit(wrap_coordinate(p[k] + shift[k], l))))
                    .collect(),
                species: labels.clone(),
                box_lengths: [S::lit(l); 3],
                energy: Some(S::lit(energy)),
                temperature_tag: S::lit(t),
                frame_id: f as u64,
            });
        }
        Ok(out)
    }
}

/// Uniform random points in a cubic box with pairwise minimum-image separation
/// at least `min_sep`, alternating the given species.
pub fn random_configuration<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    box_length: S,
    min_sep: S,
    species: &[String],
) -> Result<AtomicConfiguration<S>> {
    if species.is_empty() {
        return Err(Error::arg("need at least one species"));
    }
    let l = [box_length; 3];
    let mut positions: Vec<[S; 3]> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while positions.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 1) {
            return Err(Error::arg(format!(
                "could not place {n} atoms {min_sep} apart"
            )));
        }
        let p: [S; 3] = std::array::from_fn(|_| S::lit(rng.random_range(0.0..box_length.as_f64())));
        if positions
            .iter()
            .all(|q| norm3(&min_image_vector(&p, q, &l)) >= min_sep)
        {
            positions.push(p);
        }
    }
    Ok(AtomicConfiguration {
        positions,
        species: (0..n).map(|i| species[i % species.len()].clone()).collect(),
        box_lengths: l,
        energy: None,
        temperature_tag: S::zero(),
        frame_id: 0,
    })
}

/// Atom `k` of the result is atom `perm[k]` of the input.
pub fn permuted<S: Scalar>(
    config: &AtomicConfiguration<S>,
    perm: &[usize],
) -> AtomicConfiguration<S> {
    AtomicConfiguration {
        positions: perm.iter().map(|&k| config.positions[k]).collect(),
        species: perm.iter().map(|&k| config.species[k].clone()).collect(),
        ..config.clone()
    }
}

/// Rigid shift followed by wrapping into the box.
pub fn translated<S: Scalar>(
    config: &AtomicConfiguration<S>,
    shift: [S; 3],
) -> AtomicConfiguration<S> {
    let mut out = config.clone();
    for p in &mut out.positions {
        for k in 0..3 {
            p[k] += shift[k];
        }
    }
    out.wrap();
    out
}

pub fn random_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Uniform random rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rotate<S: Scalar>(positions: &[[S; 3]], r: &[[f64; 3]; 3]) -> Vec<[S; 3]> {
    positions
        .iter()
        .map(|p| std::array::from_fn(|i| (0..3).map(|k| S::lit(r[i][k]) * p[k]).sum()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crystal_geometry() {
        let c = HarmonicCrystal::default();
        assert_eq!(c.n_atoms(), 16);
        assert_eq!(c.bonds().len(), 64);
        assert!(c.cutoff() > c.bond_length() && c.cutoff() < c.lattice);
        let e0 = c.energy(&c.ideal_positions(), &c.bonds());
        assert!((e0 - 16.0 * -4.9).abs() < 1e-12);
    }

    #[test]
    fn frames_cycle_temperatures_and_heat_up() {
        let c = HarmonicCrystal::default();
        let frames = c.generate::<f64>(200, 1).unwrap();
        assert_eq!(frames.len(), 200);
        assert_eq!(frames[3].temperature_tag, 920.0);
        let mean = |t: f64| {
            let e: Vec<f64> = frames
                .iter()
                .filter(|f| f.temperature_tag == t)
                .map(|f| f.energy.unwrap())
                .collect();
            e.iter().sum::<f64>() / e.len() as f64
        };
        assert!(mean(1000.0) > mean(700.0));
        for f in &frames {
            assert!(f
                .positions
                .iter()
                .flatten()
                .all(|&x| (0.0..6.4).contains(&x)));
        }
        assert_eq!(frames, c.generate::<f64>(200, 1).unwrap());
    }

    #[test]
    fn random_configuration_respects_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_configuration(&mut rng, 24, 9.0_f64, 1.5, &species()).unwrap();
        for i in 0..24 {
            for j in (i + 1)..24 {
                assert!(
                    norm3(&min_image_vector(
                        &c.positions[i],
                        &c.positions[j],
                        &c.box_lengths
                    )) >= 1.5
                );
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_rotation(&mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_moves_species_with_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_configuration(&mut rng, 6, 8.0_f64, 1.0, &species()).unwrap();
        let p = permuted(&c, &[5, 4, 3, 2, 1, 0]);
        assert_eq!(p.positions[0], c.positions[5]);
        assert_eq!(p.species[0], c.species[5]);
    }
}
