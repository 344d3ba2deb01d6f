//! Random and energy-targeted structure generation from a trained model.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    decode, encode_with_noise, standard_normal, LatentCode, ModelParams, ReconstructionOutput,
};
use crate::periodic_graph::ConfigGraph;
use crate::scalar::Scalar;
use crate::trajio::{AtomicConfiguration, EnergyNormalizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "")]
pub struct GenConfig<S: Scalar> {
    /// Noise scale in `z = μ + σ ⊙ γ ε`.
    pub gamma: S,
    pub n_samples: usize,
    /// Target window in eV/atom.
    pub e_min: Option<S>,
    pub e_max: Option<S>,
    pub lambda_z: S,
    pub steps: usize,
    pub refine_lr: S,
    /// Fraction of the window width trimmed from each side of the hinge.
    pub target_margin: S,
    /// Stop refining once the prediction is inside the trimmed window.
    pub stop_inside: bool,
    /// Draw `z ~ N(0, I)` instead of perturbing the anchor's posterior.
    pub prior_only: bool,
    pub seed: u64,
}

impl<S: Scalar> Default for GenConfig<S> {
    fn default() -> Self {
        Self {
            gamma: S::lit(0.5),
            n_samples: 10,
            e_min: None,
            e_max: None,
            lambda_z: S::lit(1e-3),
            steps: 200,
            refine_lr: S::lit(1e-2),
            target_margin: S::lit(0.25),
            stop_inside: true,
            prior_only: false,
            seed: 0,
        }
    }
}

impl<S: Scalar> GenConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= S::zero()) {
            return Err(Error::arg(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.steps == 0 {
            return Err(Error::arg("steps must be at least 1"));
        }
        if !(self.lambda_z >= S::zero()) || !(self.refine_lr > S::zero()) {
            return Err(Error::arg("lambda_z must be >= 0 and refine_lr > 0"));
        }
        if !(self.target_margin >= S::zero() && self.target_margin < S::lit(0.5)) {
            return Err(Error::arg("target_margin must lie in [0, 0.5)"));
        }
        if let (Some(lo), Some(hi)) = (self.e_min, self.e_max) {
            if lo > hi {
                return Err(Error::arg(format!("e_min {lo} exceeds e_max {hi}")));
            }
        }
        Ok(())
    }
}

/// Code used for a generated latent: the energy head reads `z ∥ s`.
pub fn generated_code<S: Scalar>(anchor: &LatentCode<S>, z: Vec<S>) -> LatentCode<S> {
    LatentCode {
        mu: z.clone(),
        z,
        log_var: anchor.log_var.clone(),
        s: anchor.s.clone(),
    }
}

/// Anchor code with `z = μ`.
pub fn anchor_code<S: Scalar>(
    anchor: &ConfigGraph<S>,
    params: &ModelParams<S>,
) -> Result<LatentCode<S>> {
    let zeros = Tensor::zeros(1, params.config().latent_dim);
    encode_with_noise(anchor, params, &zeros)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GeneratedSample<S: Scalar> {
    pub z: Vec<S>,
    pub output: ReconstructionOutput<S>,
}

/// `n_samples` decodes of `z = μ + σ ⊙ γ ε` around one anchor.
pub fn sample_random<S: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<S>,
    anchor: &ConfigGraph<S>,
    config: &GenConfig<S>,
    rng: &mut R,
) -> Result<Vec<GeneratedSample<S>>> {
    config.validate()?;
    let code = anchor_code(anchor, params)?;
    let sigma = code.sigma();
    (0..config.n_samples)
        .map(|_| {
            let eps = standard_normal::<S, _>(rng, 1, code.mu.len());
            let z: Vec<S> = if config.prior_only {
                eps.into_data()
            } else {
                (0..code.mu.len())
                    .map(|k| code.mu[k] + sigma[k] * config.gamma * eps.data()[k])
                    .collect()
            };
            let output = decode(&generated_code(&code, z.clone()), anchor, params)?;
            Ok(GeneratedSample { z, output })
        })
        .collect()
}

/// One sample per anchor, cycling through `anchors` until `n` samples exist.
pub fn sample_across<S: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<S>,
    anchors: &[ConfigGraph<S>],
    n: usize,
    config: &GenConfig<S>,
    rng: &mut R,
) -> Result<Vec<GeneratedSample<S>>> {
    if anchors.is_empty() {
        return Err(Error::arg("need at least one anchor"));
    }
    let single = GenConfig {
        n_samples: 1,
        ..config.clone()
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.extend(sample_random(
            params,
            &anchors[k % anchors.len()],
            &single,
            rng,
        )?);
    }
    Ok(out)
}

/// Target window in normalized energy units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TargetWindow<S: Scalar> {
    pub lo: S,
    pub hi: S,
}

impl<S: Scalar> TargetWindow<S> {
    /// Maps a window in eV/atom for an `n_atoms` frame through the normalizer.
    pub fn from_ev_per_atom(
        e_min: S,
        e_max: S,
        n_atoms: usize,
        norm: &EnergyNormalizer<S>,
    ) -> Result<Self> {
        if e_min > e_max {
            return Err(Error::arg(format!("e_min {e_min} exceeds e_max {e_max}")));
        }
        if norm.is_degenerate() {
            return Err(Error::arg("energy normalizer has a zero range"));
        }
        let n = S::from_usize_lossy(n_atoms);
        Ok(Self {
            lo: norm.normalize(e_min * n),
            hi: norm.normalize(e_max * n),
        })
    }

    pub fn contains(&self, v: S) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn trimmed(&self, margin: S) -> Self {
        let w = (self.hi - self.lo) * margin;
        Self {
            lo: self.lo + w,
            hi: self.hi - w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Refinement<S: Scalar> {
    pub z: Vec<S>,
    /// Normalized prediction at `z`.
    pub energy_hat: S,
    pub in_target: bool,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<S>,
    pub steps_taken: usize,
}

/// `[max(lo − Ê, 0)]² + [max(Ê − hi, 0)]² + λ‖z‖²` and its gradient, with
/// `Ê = f_energy(z ∥ s)`.
pub fn conditional_objective<S: Scalar>(
    params: &ModelParams<S>,
    z: &[S],
    s: &[S],
    window: &TargetWindow<S>,
    lambda_z: S,
) -> Result<(S, S, Vec<S>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let zv = tape.param(Tensor::row_vector(z.to_vec()));
    let sv = tape.constant(Tensor::row_vector(s.to_vec()));
    let e = bound.energy(zv, sv)?;
    let below = tape.relu(tape.add_scalar(tape.neg(e), window.lo));
    let above = tape.relu(tape.add_scalar(e, -window.hi));
    let hinge = tape.add(tape.square(below), tape.square(above))?;
    let reg = tape.scalar_mul(tape.sum(tape.square(zv)), lambda_z);
    let obj = tape.add(hinge, reg)?;
    let value = tape.scalar(obj);
    let grad = tape.backward(obj)?.wrt(zv).into_data();
    Ok((value, tape.scalar(e), grad))
}

/// Gradient descent on `z` from `start`, halving the step whenever it would
/// raise the objective, so the recorded trace never increases.
pub fn refine<S: Scalar>(
    params: &ModelParams<S>,
    start: &LatentCode<S>,
    window: &TargetWindow<S>,
    config: &GenConfig<S>,
) -> Result<Refinement<S>> {
    config.validate()?;
    let goal = window.trimmed(config.target_margin);
    let mut z = start.mu.clone();
    let (mut value, mut energy, mut grad) =
        conditional_objective(params, &z, &start.s, &goal, config.lambda_z)?;
    if !value.is_finite() {
        return Err(Error::RefinementDivergence { step: 0 });
    }
    let mut trace = vec![value];
    let mut lr = config.refine_lr;
    let cap = config.refine_lr * S::lit(1e3);
    let mut steps_taken = 0;
    for step in 1..=config.steps {
        if config.stop_inside && goal.contains(energy) {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<S> = z.iter().zip(&grad).map(|(&x, &g)| x - lr * g).collect();
            let (v, e, g) = conditional_objective(params, &cand, &start.s, &goal, config.lambda_z)?;
            if !v.is_finite() {
                return Err(Error::RefinementDivergence { step });
            }
            if v <= value {
                z = cand;
                (value, energy, grad) = (v, e, g);
                lr = (lr * S::lit(1.5)).min(cap);
                accepted = true;
                break;
            }
            lr *= S::lit(0.5);
        }
        if !accepted {
            break;
        }
        trace.push(value);
        steps_taken = step;
    }
    Ok(Refinement {
        z,
        energy_hat: energy,
        in_target: window.contains(energy),
        trace,
        steps_taken,
    })
}

/// Refines from the anchor's posterior mean and decodes the result.
pub fn generate_conditional<S: Scalar>(
    params: &ModelParams<S>,
    anchor: &ConfigGraph<S>,
    window: &TargetWindow<S>,
    config: &GenConfig<S>,
) -> Result<(Refinement<S>, ReconstructionOutput<S>)> {
    let code = anchor_code(anchor, params)?;
    let r = refine(params, &code, window, config)?;
    let out = decode(&generated_code(&code, r.z.clone()), anchor, params)?;
    Ok((r, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LatentRow<S: Scalar> {
    pub frame_id: u64,
    pub mu: Vec<S>,
    /// eV/atom, when the frame carries an energy.
    pub energy: Option<S>,
}

pub fn export_latents<S: Scalar>(
    params: &ModelParams<S>,
    graphs: &[ConfigGraph<S>],
    norm: Option<&EnergyNormalizer<S>>,
) -> Result<Vec<LatentRow<S>>> {
    graphs
        .iter()
        .map(|g| {
            let code = anchor_code(g, params)?;
            let energy = match (norm, g.energy_norm) {
                (Some(n), Some(v)) => Some(n.denormalize(v) / S::from_usize_lossy(g.n_nodes())),
                _ => None,
            };
            Ok(LatentRow {
                frame_id: g.frame_id,
                mu: code.mu,
                energy,
            })
        })
        .collect()
}

/// CSV with columns `frame_id, energy, mu_0 … mu_{d−1}`.
pub fn write_latents<S: Scalar>(rows: &[LatentRow<S>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = rows.first().map_or(0, |r| r.mu.len());
    let mut header = vec!["frame_id".to_string(), "energy".to_string()];
    header.extend((0..d).map(|k| format!("mu_{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.frame_id.to_string(),
            r.energy.map(|e| e.to_string()).unwrap_or_default(),
        ];
        rec.extend(r.mu.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Turns a decoded structure into a configuration: most probable species per
/// node, wrapped positions and the predicted total energy in eV.
pub fn to_configuration<S: Scalar>(
    output: &ReconstructionOutput<S>,
    template: &ConfigGraph<S>,
    species: &[String],
    norm: Option<&EnergyNormalizer<S>>,
    frame_id: u64,
) -> Result<AtomicConfiguration<S>> {
    if species.len() != output.node_probs.cols() {
        return Err(Error::Shape {
            op: "to_configuration",
            left: (output.node_probs.rows(), species.len()),
            right: output.node_probs.shape(),
        });
    }
    let labels = (0..output.node_probs.rows())
        .map(|r| {
            let row = output.node_probs.row(r);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            species[best].clone()
        })
        .collect();
    let mut c = AtomicConfiguration {
        positions: output.positions_hat.clone(),
        species: labels,
        box_lengths: template.box_lengths,
        energy: norm.map(|n| n.denormalize(output.energy_hat)),
        temperature_tag: S::zero(),
        frame_id,
    };
    if c.positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Structure(format!(
            "sample {frame_id} has non-finite positions"
        )));
    }
    c.wrap();
    Ok(c)
}
