//! Executable invariance and gradient checks, run on seeded random fixtures or
//! on frames of a prepared dataset.
//!
//! Every check reports the worst error it saw and the seed of the fixture that
//! produced it, so a failure can be replayed in isolation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_check, relative_error, Tape, Tensor};
use crate::batch::GraphBatch;
use crate::error::{Error, Result};
use crate::losses::{
    edge_loss_var, energy_loss_var, kl_loss_var, node_loss_var, objective, rdf_loss_var,
    LossWeights,
};
use crate::model::{encode_with_noise, standard_normal, ModelConfig, ModelParams};
use crate::periodic_graph::{build_graph, free_cell_edges, ConfigGraph, RdfConfig};
use crate::synthetic::{
    permuted, random_configuration, random_permutation, random_rotation, rotate, translated,
};
use crate::trajio::AtomicConfiguration;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckSettings {
    pub n_configs: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Atoms per Å³ for random fixtures.
    pub density: f64,
    pub min_separation: f64,
    pub cutoff: f64,
    pub seed: u64,
    pub encoder_tol: f64,
    pub rotation_tol: f64,
    pub gradient_tol: f64,
    pub fd_step: f64,
    pub gradients: bool,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            n_configs: 20,
            min_atoms: 16,
            max_atoms: 32,
            density: 0.06,
            min_separation: 1.8,
            cutoff: 3.2,
            seed: 0,
            encoder_tol: 1e-6,
            rotation_tol: 1e-12,
            gradient_tol: 1e-4,
            fd_step: 1e-5,
            gradients: true,
        }
    }
}

/// One configuration under test and the seed that drives its transforms.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub seed: u64,
    pub config: AtomicConfiguration<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub fixture_seed: Option<u64>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, worst: Option<(f64, u64)>, tolerance: f64) -> Self {
        let (max_error, fixture_seed) = match worst {
            Some((e, s)) => (e, Some(s)),
            None => (0.0, None),
        };
        Self {
            name: name.into(),
            fixture_seed,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        let seed = self
            .fixture_seed
            .map_or_else(|| "-".to_string(), |s| s.to_string());
        format!(
            "{} {:<20} max_error={:.3e} tol={:.1e} fixture_seed={seed}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub checks: Vec<CheckOutcome>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Keeps the largest error; NaN always wins so it cannot hide.
fn track(worst: &mut Option<(f64, u64)>, err: f64, seed: u64) {
    let replace = match worst {
        None => true,
        Some((w, _)) => !w.is_nan() && (err.is_nan() || err > *w),
    };
    if replace {
        *worst = Some((err, seed));
    }
}

pub fn random_fixtures(settings: &CheckSettings, species: &[String]) -> Result<Vec<Fixture>> {
    if settings.min_atoms < 2 || settings.min_atoms > settings.max_atoms {
        return Err(Error::arg("need 2 <= min_atoms <= max_atoms"));
    }
    if !(settings.density > 0.0) {
        return Err(Error::arg("density must be positive"));
    }
    (0..settings.n_configs)
        .map(|k| {
            let seed = settings.seed.wrapping_add(k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(settings.min_atoms..=settings.max_atoms);
            let side = (n as f64 / settings.density)
                .cbrt()
                .max(2.0 * settings.cutoff);
            let mut config =
                random_configuration(&mut rng, n, side, settings.min_separation, species)?;
            config.frame_id = seed;
            Ok(Fixture { seed, config })
        })
        .collect()
}

/// Dataset frames as fixtures; seeds count up from `seed`.
pub fn dataset_fixtures(configs: &[AtomicConfiguration<f64>], n: usize, seed: u64) -> Vec<Fixture> {
    configs
        .iter()
        .take(n)
        .enumerate()
        .map(|(k, c)| Fixture {
            seed: seed.wrapping_add(k as u64),
            config: c.clone(),
        })
        .collect()
}

/// Model used when no checkpoint is supplied: two message-passing layers sized
/// for the largest fixture.
pub fn toy_model(species_count: usize, max_nodes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_dim: 6,
        latent_dim: 16,
        n_mp_layers: 2,
        n_edge_blocks: 1,
        species_count,
        energy_head_dims: vec![6],
        max_nodes,
        seed,
        ..ModelConfig::default()
    }
}

fn encoder_outputs(graph: &ConfigGraph<f64>, params: &ModelParams<f64>) -> Result<Tensor<f64>> {
    let eps = Tensor::zeros(1, params.config().latent_dim);
    let code = encode_with_noise(graph, params, &eps)?;
    let all: Vec<f64> = code
        .mu
        .into_iter()
        .chain(code.log_var)
        .chain(code.s)
        .collect();
    Ok(Tensor::row_vector(all))
}

/// Encoder agreement under node permutation and wrapped translation, and
/// free-cell edge distances under rotation.
pub fn invariance_checks(
    fixtures: &[Fixture],
    params: &ModelParams<f64>,
    species: &[String],
    settings: &CheckSettings,
) -> Result<Vec<CheckOutcome>> {
    let (mut perm, mut shift, mut rot) = (None, None, None);
    for f in fixtures {
        let mut rng = ChaCha8Rng::seed_from_u64(f.seed ^ 0x5eed);
        let base = encoder_outputs(
            &build_graph(&f.config, settings.cutoff, None, species)?,
            params,
        )?;

        let p = random_permutation(&mut rng, f.config.n_atoms());
        let g = build_graph(&permuted(&f.config, &p), settings.cutoff, None, species)?;
        track(
            &mut perm,
            relative_error(&base, &encoder_outputs(&g, params)?),
            f.seed,
        );

        let l = f.config.box_lengths;
        let s: [f64; 3] = std::array::from_fn(|k| rng.random_range(-l[k]..l[k]));
        let g = build_graph(&translated(&f.config, s), settings.cutoff, None, species)?;
        track(
            &mut shift,
            relative_error(&base, &encoder_outputs(&g, params)?),
            f.seed,
        );

        let r = random_rotation(&mut rng);
        let before = free_cell_edges(&f.config.positions, settings.cutoff);
        let after = free_cell_edges(&rotate(&f.config.positions, &r), settings.cutoff);
        let err = if before.iter().map(|e| e.0).ne(after.iter().map(|e| e.0)) {
            f64::INFINITY
        } else {
            before
                .iter()
                .zip(&after)
                .map(|(a, b)| (a.1.dist - b.1.dist).abs())
                .fold(0.0, f64::max)
        };
        track(&mut rot, err, f.seed);
    }
    Ok(vec![
        CheckOutcome::new("encoder_permutation", perm, settings.encoder_tol),
        CheckOutcome::new("encoder_translation", shift, settings.encoder_tol),
        CheckOutcome::new("free_cell_rotation", rot, settings.rotation_tol),
    ])
}

/// Pulls probabilities off the clamp boundary so finite differences see the
/// smooth branch.
fn interior(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|p| p.clamp(0.05, 0.95))
}

/// Every loss term against central differences with respect to the model
/// outputs it consumes, evaluated at the outputs of a forward pass.
pub fn loss_gradient_checks(
    fixtures: &[Fixture],
    params: &ModelParams<f64>,
    species: &[String],
    weights: &LossWeights<f64>,
    settings: &CheckSettings,
) -> Result<Vec<CheckOutcome>> {
    let mut worst = [None; 5];
    let h = settings.fd_step;
    for f in fixtures {
        let batch = fixture_batch(f, species, settings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(f.seed ^ 0x9ead);
        let noise = standard_normal(&mut rng, 1, params.config().latent_dim);
        let out = params.evaluate(&batch, Some(&noise))?;
        let onehot = batch.node_features.clone();
        let edges = batch.edge_attrs.clone();
        let energies = batch
            .energies
            .clone()
            .unwrap_or_else(|| Tensor::zeros(1, 1));
        let errs = [
            gradient_check(
                &[interior(&out.node_probs)],
                |t, v| node_loss_var(t, v[0], t.constant(onehot.clone()), weights.node_loss),
                h,
            )?,
            gradient_check(
                std::slice::from_ref(&out.edge_hat),
                |t, v| edge_loss_var(t, v[0], t.constant(edges.clone()), weights.lambda_cos),
                h,
            )?,
            gradient_check(
                std::slice::from_ref(&out.energy),
                |t, v| energy_loss_var(t, v[0], t.constant(energies.clone())),
                h,
            )?,
            gradient_check(
                &[out.mu.clone(), out.log_var.clone()],
                |t, v| kl_loss_var(t, v[0], v[1]),
                h,
            )?,
            gradient_check(
                std::slice::from_ref(&out.positions),
                |t, v| rdf_loss_var(t, v[0], &batch),
                h,
            )?,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            track(w, e.into_iter().fold(0.0, f64::max), f.seed);
        }
    }
    let names = [
        "grad_node",
        "grad_edge",
        "grad_energy",
        "grad_kl",
        "grad_rdf",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckOutcome::new(n, w, settings.gradient_tol))
        .collect())
}

fn fixture_batch(
    f: &Fixture,
    species: &[String],
    settings: &CheckSettings,
) -> Result<GraphBatch<f64>> {
    let mut g = build_graph(&f.config, settings.cutoff, None, species)?;
    if g.energy_norm.is_none() {
        g.energy_norm = Some(50.0);
    }
    GraphBatch::new(&[&g], &RdfConfig::default())
}

fn total_value(
    params: &ModelParams<f64>,
    batch: &GraphBatch<f64>,
    noise: &Tensor<f64>,
    weights: &LossWeights<f64>,
) -> Result<f64> {
    let tape = Tape::new();
    let fwd = params.bind(&tape, false).forward(batch, Some(noise))?;
    Ok(tape.scalar(objective(&tape, &fwd, batch, weights)?.total))
}

/// Tensors whose gradient is this small a fraction of the whole are measured
/// against the whole; a global position shift leaves every loss unchanged, so
/// the last position bias has an exactly zero gradient.
const SCALE_FLOOR: f64 = 1e-3;

/// Reverse-mode gradient of the full weighted objective with respect to every
/// parameter tensor against central differences. Returns the worst per-tensor
/// relative error.
pub fn parameter_gradient_error(
    params: &ModelParams<f64>,
    batch: &GraphBatch<f64>,
    noise: &Tensor<f64>,
    weights: &LossWeights<f64>,
    h: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let fwd = bound.forward(batch, Some(noise))?;
    let total = objective(&tape, &fwd, batch, weights)?.total;
    let grads = tape.backward(total)?;
    let analytic: Vec<Tensor<f64>> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();

    let mut work = params.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (k, a) in analytic.iter().enumerate() {
        let mut n = Tensor::zeros(a.rows(), a.cols());
        for e in 0..a.len() {
            let orig = work.tensors()[k].tensor.data()[e];
            set_entry(&mut work, k, e, orig + h);
            let plus = total_value(&work, batch, noise, weights)?;
            set_entry(&mut work, k, e, orig - h);
            let minus = total_value(&work, batch, noise, weights)?;
            set_entry(&mut work, k, e, orig);
            n.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        numeric.push(n);
    }
    let global = numeric.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    let floor = SCALE_FLOOR * global;
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = a
            .squared_norm()
            .sqrt()
            .max(n.squared_norm().sqrt())
            .max(floor);
        let err = if scale > 0.0 { diff / scale } else { diff };
        if err.is_nan() || err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

fn set_entry(params: &mut ModelParams<f64>, k: usize, e: usize, v: f64) {
    if let Some(t) = params.tensors_mut().nth(k) {
        t.data_mut()[e] = v;
    }
}

/// End-to-end parameter gradients on the first `n` fixtures.
pub fn parameter_gradient_checks(
    fixtures: &[Fixture],
    params: &ModelParams<f64>,
    species: &[String],
    weights: &LossWeights<f64>,
    settings: &CheckSettings,
    n: usize,
) -> Result<CheckOutcome> {
    let mut worst = None;
    for f in fixtures.iter().take(n) {
        let batch = fixture_batch(f, species, settings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(f.seed ^ 0x9ead);
        let noise = standard_normal(&mut rng, 1, params.config().latent_dim);
        let err = parameter_gradient_error(params, &batch, &noise, weights, settings.fd_step)?;
        track(&mut worst, err, f.seed);
    }
    Ok(CheckOutcome::new(
        "grad_parameters",
        worst,
        settings.gradient_tol,
    ))
}

/// Full suite. Without `params` a seeded toy model is initialized; gradient
/// checks always use the toy model so their cost stays bounded.
pub fn run_checks(
    fixtures: &[Fixture],
    params: Option<&ModelParams<f64>>,
    species: &[String],
    settings: &CheckSettings,
) -> Result<InvarianceReport> {
    if fixtures.is_empty() {
        return Err(Error::arg("no fixtures to check"));
    }
    let largest = fixtures
        .iter()
        .map(|f| f.config.n_atoms())
        .max()
        .unwrap_or(1);
    let toy = ModelParams::init(&toy_model(species.len(), largest, settings.seed))?;
    let model = params.unwrap_or(&toy);
    let mut checks = invariance_checks(fixtures, model, species, settings)?;
    if settings.gradients {
        let weights = LossWeights::default();
        checks.extend(loss_gradient_checks(
            fixtures, &toy, species, &weights, settings,
        )?);
        checks.push(parameter_gradient_checks(
            fixtures, &toy, species, &weights, settings, 2,
        )?);
    }
    Ok(InvarianceReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::species;

    fn small() -> CheckSettings {
        CheckSettings {
            n_configs: 3,
            ..CheckSettings::default()
        }
    }

    #[test]
    fn fixtures_are_seeded_and_sized() {
        let s = small();
        let a = random_fixtures(&s, &species()).unwrap();
        let b = random_fixtures(&s, &species()).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.config, y.config);
            assert!((16..=32).contains(&x.config.n_atoms()));
            assert!(x.config.box_lengths[0] >= 2.0 * s.cutoff);
        }
    }

    #[test]
    fn suite_passes_on_random_fixtures() {
        let s = small();
        let fx = random_fixtures(&s, &species()).unwrap();
        let report = run_checks(&fx, None, &species(), &s).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}", c.line());
        }
        assert_eq!(report.checks.len(), 9);
    }

    #[test]
    fn broken_tolerance_names_check_and_seed() {
        let s = CheckSettings {
            encoder_tol: -1.0,
            gradients: false,
            ..small()
        };
        let fx = random_fixtures(&s, &species()).unwrap();
        let report = run_checks(&fx, None, &species(), &s).unwrap();
        assert!(!report.passed());
        let f = report.failures().next().unwrap();
        assert_eq!(f.name, "encoder_permutation");
        assert!(f.fixture_seed.is_some());
        assert!(f.line().starts_with("FAIL encoder_permutation"));
    }

    #[test]
    fn nan_is_never_hidden() {
        let mut w = None;
        track(&mut w, 1.0, 1);
        track(&mut w, f64::NAN, 2);
        track(&mut w, 5.0, 3);
        assert_eq!(w.unwrap().1, 2);
        assert!(!CheckOutcome::new("x", w, 1.0).passed);
    }
}
