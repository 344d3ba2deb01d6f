//! The five-term training objective.
//!
//! Each term has a tape form (`*_var`) used for training and a plain-value form
//! that evaluates the same graph on a throwaway tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::batch::GraphBatch;
use crate::error::{Error, Result};
use crate::geometry::norm3;
use crate::model::Forward;
use crate::periodic_graph::{histogram_with, EdgeAttr, RdfConfig, RdfMode};
use crate::scalar::Scalar;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeLossKind {
    /// Mean binary cross-entropy over all `N·S` entries.
    #[default]
    Bce,
    /// Mean over nodes of `−Σ_s y log p`.
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "")]
pub struct LossWeights<S: Scalar> {
    pub alpha_node: S,
    pub alpha_edge: S,
    pub alpha_energy: S,
    pub beta_kl: S,
    pub alpha_rdf: S,
    /// Weight of the direction term `1 − cos` inside the edge loss.
    pub lambda_cos: S,
    pub node_loss: NodeLossKind,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        Self {
            alpha_node: S::lit(1.0),
            alpha_edge: S::lit(100.0),
            alpha_energy: S::lit(300.0),
            beta_kl: S::lit(1e-4),
            alpha_rdf: S::lit(10.0),
            lambda_cos: S::lit(1.0),
            node_loss: NodeLossKind::Bce,
        }
    }
}

impl<S: Scalar> LossWeights<S> {
    pub fn zero() -> Self {
        Self {
            alpha_node: S::zero(),
            alpha_edge: S::zero(),
            alpha_energy: S::zero(),
            beta_kl: S::zero(),
            alpha_rdf: S::zero(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_node", self.alpha_node),
            ("alpha_edge", self.alpha_edge),
            ("alpha_energy", self.alpha_energy),
            ("beta_kl", self.beta_kl),
            ("alpha_rdf", self.alpha_rdf),
            ("lambda_cos", self.lambda_cos),
        ];
        for (name, w) in all {
            if !(w >= S::zero()) || !w.is_finite() {
                return Err(Error::arg(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Weights in term order node, edge, energy, kl, rdf.
    pub fn as_array(&self) -> [S; 5] {
        [
            self.alpha_node,
            self.alpha_edge,
            self.alpha_energy,
            self.beta_kl,
            self.alpha_rdf,
        ]
    }
}

pub const TERM_NAMES: [&str; 5] = ["node", "edge", "energy", "kl", "rdf"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LossBreakdown<S: Scalar> {
    pub node: S,
    pub edge: S,
    pub energy: S,
    pub kl: S,
    pub rdf: S,
    pub total: S,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn parts(&self) -> [S; 5] {
        [self.node, self.edge, self.energy, self.kl, self.rdf]
    }
}

/// Weighted sum of the parts `[node, edge, energy, kl, rdf]`.
pub fn total_loss<S: Scalar>(parts: [S; 5], weights: &LossWeights<S>) -> Result<LossBreakdown<S>> {
    for (name, p) in TERM_NAMES.iter().zip(parts) {
        if !p.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: (*name).into(),
            });
        }
    }
    let total = parts
        .iter()
        .zip(weights.as_array())
        .map(|(&p, w)| p * w)
        .sum();
    Ok(LossBreakdown {
        node: parts[0],
        edge: parts[1],
        energy: parts[2],
        kl: parts[3],
        rdf: parts[4],
        total,
    })
}

fn same_shape<S: Scalar>(t: &Tape<S>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::Shape {
            op,
            left: t.shape(a),
            right: t.shape(b),
        });
    }
    Ok(())
}

pub fn node_loss_var<S: Scalar>(
    t: &Tape<S>,
    probs: Var,
    onehot: Var,
    kind: NodeLossKind,
) -> Result<Var> {
    same_shape(t, "node_loss", probs, onehot)?;
    let eps = S::lit(PROB_EPS);
    let p = t.clamp(probs, eps, S::one() - eps);
    let pos = t.mul(onehot, t.log(p))?;
    match kind {
        NodeLossKind::Bce => {
            let q = t.add_scalar(t.neg(p), S::one());
            let y0 = t.add_scalar(t.neg(onehot), S::one());
            let negs = t.mul(y0, t.log(q))?;
            Ok(t.neg(t.mean(t.add(pos, negs)?)))
        }
        NodeLossKind::Categorical => {
            let n = S::from_usize_lossy(t.shape(probs).0.max(1));
            Ok(t.scalar_mul(t.sum(pos), -S::one() / n))
        }
    }
}

/// Mean over edges of `(d̂ − d)² + λ (1 − cos(Δr̂, Δr))` for `[E, 4]` rows.
pub fn edge_loss_var<S: Scalar>(t: &Tape<S>, hat: Var, truth: Var, lambda_cos: S) -> Result<Var> {
    same_shape(t, "edge_loss", hat, truth)?;
    if t.shape(hat).1 != 4 {
        return Err(Error::Shape {
            op: "edge_loss",
            left: (t.shape(hat).0, 4),
            right: t.shape(hat),
        });
    }
    let dd = t.sub(t.slice_cols(hat, 3, 4)?, t.slice_cols(truth, 3, 4)?)?;
    let mse = t.mean(t.square(dd));
    let cos = t.cosine_similarity(t.slice_cols(hat, 0, 3)?, t.slice_cols(truth, 0, 3)?)?;
    let dir = t.add_scalar(t.neg(t.mean(cos)), S::one());
    t.add(mse, t.scalar_mul(dir, lambda_cos))
}

pub fn energy_loss_var<S: Scalar>(t: &Tape<S>, pred: Var, truth: Var) -> Result<Var> {
    same_shape(t, "energy_loss", pred, truth)?;
    Ok(t.mean(t.square(t.sub(pred, truth)?)))
}

/// Closed-form KL to the standard normal, summed over latent dimensions and
/// averaged over the rows of `[G, d_z]` inputs.
pub fn kl_loss_var<S: Scalar>(t: &Tape<S>, mu: Var, log_var: Var) -> Result<Var> {
    same_shape(t, "kl_loss", mu, log_var)?;
    let g = S::from_usize_lossy(t.shape(mu).0.max(1));
    let inner = t.sub(t.sub(log_var, t.square(mu))?, t.exp(log_var))?;
    let inner = t.add_scalar(inner, S::one());
    Ok(t.scalar_mul(t.sum(inner), S::lit(-0.5) / g))
}

/// Batch mean of `‖ĝ − g‖²` between soft histograms of `positions` (`[N, 3]`)
/// and the batch's stored targets.
pub fn rdf_loss_var<S: Scalar>(t: &Tape<S>, positions: Var, batch: &GraphBatch<S>) -> Result<Var> {
    if t.shape(positions) != (batch.n_nodes(), 3) {
        return Err(Error::Shape {
            op: "rdf_loss",
            left: (batch.n_nodes(), 3),
            right: t.shape(positions),
        });
    }
    let pi = t.index_gather(positions, batch.pair_i.clone())?;
    let pj = t.index_gather(positions, batch.pair_j.clone())?;
    let d = t.l2_norm(t.min_image(t.sub(pi, pj)?, &batch.pair_boxes)?);
    let hist = t.soft_histogram(d, batch.pair_graph.clone(), batch.rdf_grids.clone())?;
    let diff = t.sub(hist, t.constant(batch.target_rdf.clone()))?;
    Ok(t.scalar_mul(
        t.sum(t.square(diff)),
        S::one() / S::from_usize_lossy(batch.n_graphs),
    ))
}

/// Tape handles of the five terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub parts: [Var; 5],
    pub total: Var,
}

impl Objective {
    pub fn breakdown<S: Scalar>(&self, t: &Tape<S>) -> LossBreakdown<S> {
        let p = self.parts.map(|v| t.scalar(v));
        LossBreakdown {
            node: p[0],
            edge: p[1],
            energy: p[2],
            kl: p[3],
            rdf: p[4],
            total: t.scalar(self.total),
        }
    }
}

/// Assembles the full objective for a forward pass over `batch`.
pub fn objective<S: Scalar>(
    t: &Tape<S>,
    fwd: &Forward,
    batch: &GraphBatch<S>,
    weights: &LossWeights<S>,
) -> Result<Objective> {
    let energies = batch
        .energies
        .as_ref()
        .ok_or_else(|| Error::arg("every graph in a training batch needs an energy"))?;
    let node = node_loss_var(
        t,
        fwd.node_probs,
        t.constant(batch.node_features.clone()),
        weights.node_loss,
    )?;
    let edge = edge_loss_var(
        t,
        fwd.edge_hat,
        t.constant(batch.edge_attrs.clone()),
        weights.lambda_cos,
    )?;
    let energy = energy_loss_var(t, fwd.energy, t.constant(energies.clone()))?;
    let kl = kl_loss_var(t, fwd.mu, fwd.log_var)?;
    let rdf = rdf_loss_var(t, fwd.positions, batch)?;
    let parts = [node, edge, energy, kl, rdf];
    let mut total = t.scalar_mul(parts[0], weights.alpha_node);
    for (&p, w) in parts.iter().zip(weights.as_array()).skip(1) {
        total = t.add(total, t.scalar_mul(p, w))?;
    }
    Ok(Objective { parts, total })
}

fn eval_scalar<S: Scalar>(f: impl FnOnce(&Tape<S>) -> Result<Var>) -> Result<S> {
    let t = Tape::new();
    let v = f(&t)?;
    Ok(t.scalar(v))
}

fn edge_rows<S: Scalar>(edges: &[EdgeAttr<S>]) -> Tensor<S> {
    let rows: Vec<[S; 4]> = edges.iter().map(EdgeAttr::as_row).collect();
    Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, 4))
}

pub fn node_loss<S: Scalar>(
    probs: &Tensor<S>,
    onehot: &Tensor<S>,
    kind: NodeLossKind,
) -> Result<S> {
    eval_scalar(|t| {
        node_loss_var(
            t,
            t.constant(probs.clone()),
            t.constant(onehot.clone()),
            kind,
        )
    })
}

pub fn edge_loss<S: Scalar>(
    hat: &[EdgeAttr<S>],
    truth: &[EdgeAttr<S>],
    lambda_cos: S,
) -> Result<S> {
    if hat.len() != truth.len() {
        return Err(Error::Shape {
            op: "edge_loss",
            left: (truth.len(), 4),
            right: (hat.len(), 4),
        });
    }
    if hat.is_empty() {
        return Err(Error::DegenerateGraph("edge loss over zero edges".into()));
    }
    let (h, y) = (edge_rows(hat), edge_rows(truth));
    eval_scalar(|t| edge_loss_var(t, t.constant(h), t.constant(y), lambda_cos))
}

/// Number of predicted directions with zero norm, for which the cosine term
/// falls back to orthogonal.
pub fn degenerate_directions<S: Scalar>(hat: &[EdgeAttr<S>]) -> usize {
    hat.iter().filter(|e| norm3(&e.delta) == S::zero()).count()
}

pub fn energy_loss<S: Scalar>(pred: &[S], truth: &[S]) -> Result<S> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "energy_loss",
            left: (truth.len(), 1),
            right: (pred.len(), 1),
        });
    }
    let (p, y) = (
        Tensor::column_vector(pred.to_vec()),
        Tensor::column_vector(truth.to_vec()),
    );
    eval_scalar(|t| energy_loss_var(t, t.constant(p), t.constant(y)))
}

pub fn kl_loss<S: Scalar>(mu: &[S], log_var: &[S]) -> Result<S> {
    let (m, v) = (
        Tensor::row_vector(mu.to_vec()),
        Tensor::row_vector(log_var.to_vec()),
    );
    eval_scalar(|t| kl_loss_var(t, t.constant(m), t.constant(v)))
}

/// Squared ℓ₂ gap between soft histograms of two position sets in one box.
pub fn rdf_loss<S: Scalar>(
    positions_hat: &[[S; 3]],
    positions_true: &[[S; 3]],
    box_lengths: &[S; 3],
    rdf: &RdfConfig<S>,
) -> Result<S> {
    if positions_hat.len() != positions_true.len() {
        return Err(Error::Shape {
            op: "rdf_loss",
            left: (positions_true.len(), 3),
            right: (positions_hat.len(), 3),
        });
    }
    let grid = rdf.grid(box_lengths)?;
    let a = histogram_with(positions_hat, box_lengths, &grid, RdfMode::Soft);
    let b = histogram_with(positions_true, box_lengths, &grid, RdfMode::Soft);
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::periodic_graph::build_graph;
    use crate::trajio::AtomicConfiguration;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn attr(delta: [f64; 3]) -> EdgeAttr<f64> {
        EdgeAttr {
            delta,
            dist: norm3(&delta),
        }
    }

    #[test]
    fn node_loss_examples() {
        let y = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(node_loss(&y, &y, NodeLossKind::Bce).unwrap() < 1e-6);
        let half = Tensor::filled(2, 2, 0.5);
        let l = node_loss(&half, &y, NodeLossKind::Bce).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let c = node_loss(&half, &y, NodeLossKind::Categorical).unwrap();
        assert!((c - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(node_loss(&half, &Tensor::zeros(3, 2), NodeLossKind::Bce).is_err());
    }

    #[test]
    fn edge_loss_examples() {
        let truth = vec![attr([1.0, 2.0, 2.0]), attr([0.0, -3.0, 4.0])];
        assert_eq!(edge_loss(&truth, &truth, 1.0).unwrap(), 0.0);
        let flipped: Vec<_> = truth
            .iter()
            .map(|e| EdgeAttr {
                delta: e.delta.map(|v| -v),
                dist: e.dist,
            })
            .collect();
        assert!((edge_loss(&flipped, &truth, 0.7).unwrap() - 1.4).abs() < 1e-12);
        let longer: Vec<_> = truth
            .iter()
            .map(|e| EdgeAttr {
                dist: e.dist + 0.1,
                ..*e
            })
            .collect();
        assert!((edge_loss(&longer, &truth, 1.0).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_counts_as_orthogonal() {
        let truth = vec![attr([1.0, 0.0, 0.0])];
        let hat = vec![EdgeAttr {
            delta: [0.0; 3],
            dist: 1.0,
        }];
        assert!((edge_loss(&hat, &truth, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(degenerate_directions(&hat), 1);
    }

    #[test]
    fn energy_loss_examples() {
        assert_eq!(energy_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(energy_loss(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 4.0);
        assert_eq!(energy_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(kl_loss(&[1.0], &[0.0]).unwrap(), 0.5);
    }

    /// Monte-Carlo estimate of `E_q[log q(z) − log p(z)]`.
    fn kl_monte_carlo(mu: &[f64], log_var: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        let mut acc = 0.0;
        for _ in 0..samples {
            for (&m, &lv) in mu.iter().zip(log_var) {
                let eps: f64 = StandardNormal.sample(rng);
                let z = m + (0.5 * lv).exp() * eps;
                acc += -0.5 * lv - 0.5 * eps * eps + 0.5 * z * z;
            }
        }
        acc / samples as f64
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = kl_loss(&mu, &lv).unwrap();
        let mc = kl_monte_carlo(&mu, &lv, 200_000, &mut rng);
        assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::<f64>::default();
        assert_eq!(total_loss([0.0; 5], &w).unwrap().total, 0.0);
        let b = total_loss([1.0; 5], &w).unwrap();
        assert!((b.total - 411.0001).abs() < 1e-9);
        assert_eq!(
            total_loss([3.0, 1.0, 2.0, 5.0, 7.0], &LossWeights::zero())
                .unwrap()
                .total,
            0.0
        );
        let err = total_loss([1.0, 1.0, f64::NAN, 1.0, 1.0], &w).unwrap_err();
        assert!(err.to_string().contains("energy"), "{err}");
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            alpha_rdf: -1.0,
            ..LossWeights::<f64>::default()
        };
        assert!(w.validate().is_err());
    }

    fn frame(seed: u64) -> AtomicConfiguration<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AtomicConfiguration {
            positions: (0..16)
                .map(|_| {
                    [
                        rng.random_range(0.0..8.0),
                        rng.random_range(0.0..8.0),
                        rng.random_range(0.0..8.0),
                    ]
                })
                .collect(),
            species: (0..16)
                .map(|i| if i < 8 { "Cu" } else { "Zr" }.to_string())
                .collect(),
            box_lengths: [8.0; 3],
            energy: Some(0.0),
            temperature_tag: 700.0,
            frame_id: seed,
        }
    }

    #[test]
    fn rdf_loss_identity_translation_and_displacement() {
        let c = frame(2);
        let rdf = RdfConfig::default();
        assert_eq!(
            rdf_loss(&c.positions, &c.positions, &c.box_lengths, &rdf).unwrap(),
            0.0
        );
        let mut moved = c.clone();
        for p in &mut moved.positions {
            p[0] += 3.3;
            p[2] -= 1.1;
        }
        moved.wrap();
        assert!(rdf_loss(&moved.positions, &c.positions, &c.box_lengths, &rdf).unwrap() < 1e-20);

        let mut kicked = c.positions.clone();
        kicked[5][1] += 0.5;
        let got = rdf_loss(&kicked, &c.positions, &c.box_lengths, &rdf).unwrap();
        // independent recomputation from raw pair distances
        let grid = rdf.grid(&c.box_lengths).unwrap();
        let hist = |pos: &[[f64; 3]]| {
            let mut h = vec![0.0; grid.bins];
            let w = grid.bin_width();
            for i in 0..pos.len() {
                for j in (i + 1)..pos.len() {
                    let d = norm3(&crate::geometry::min_image_vector(
                        &pos[i],
                        &pos[j],
                        &c.box_lengths,
                    ));
                    if d <= 0.0 || d > grid.r_max {
                        continue;
                    }
                    let raw: Vec<f64> = (0..grid.bins)
                        .map(|b| {
                            let x = (d - (b as f64 + 0.5) * w) / grid.sigma;
                            (-0.5 * x * x).exp()
                        })
                        .collect();
                    let z: f64 = raw.iter().sum();
                    for b in 0..grid.bins {
                        h[b] += raw[b] / z;
                    }
                }
            }
            h
        };
        let (a, b) = (hist(&kicked), hist(&c.positions));
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(got > 0.0);
        assert!((got - expect).abs() <= 1e-10 * expect);
    }

    #[test]
    fn rdf_batch_loss_is_zero_at_targets() {
        let g = build_graph(&frame(3), 3.5, None, &["Cu".into(), "Zr".into()]).unwrap();
        let batch = GraphBatch::new(&[&g], &RdfConfig::default()).unwrap();
        let t = Tape::new();
        let pos = t.constant(batch.reference_positions.clone());
        let l = rdf_loss_var(&t, pos, &batch).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    fn interior_probs(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(n, s);
        for v in t.data_mut() {
            *v = rng.random_range(0.05..0.95);
        }
        t
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        for kind in [NodeLossKind::Bce, NodeLossKind::Categorical] {
            let p = interior_probs(&mut rng, 3, 2);
            let yy = y.clone();
            let err = gradient_check(
                &[p],
                |t, v| node_loss_var(t, v[0], t.constant(yy.clone()), kind),
                H,
            )
            .unwrap();
            assert!(err[0] < TOL, "node {kind:?}: {}", err[0]);
        }

        let mut hat = Tensor::zeros(5, 4);
        let mut truth = Tensor::zeros(5, 4);
        for v in hat.data_mut().iter_mut().chain(truth.data_mut()) {
            *v = rng.random_range(-2.0..2.0);
        }
        let err =
            gradient_check(&[hat, truth], |t, v| edge_loss_var(t, v[0], v[1], 0.8), H).unwrap();
        assert!(err.iter().all(|&e| e < TOL), "edge {err:?}");

        let e = Tensor::column_vector(vec![10.0, 55.0, 91.0]);
        let y = Tensor::column_vector(vec![12.0, 50.0, 99.0]);
        let err = gradient_check(&[e, y], |t, v| energy_loss_var(t, v[0], v[1]), H).unwrap();
        assert!(err.iter().all(|&e| e < TOL), "energy {err:?}");

        let mu = interior_probs(&mut rng, 2, 4);
        let lv = interior_probs(&mut rng, 2, 4);
        let err = gradient_check(&[mu, lv], |t, v| kl_loss_var(t, v[0], v[1]), H).unwrap();
        assert!(err.iter().all(|&e| e < TOL), "kl {err:?}");

        let g = build_graph(&frame(5), 3.5, None, &["Cu".into(), "Zr".into()]).unwrap();
        let batch = GraphBatch::new(&[&g], &RdfConfig::default()).unwrap();
        let mut pos = batch.reference_positions.clone();
        for v in pos.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let err = gradient_check(&[pos], |t, v| rdf_loss_var(t, v[0], &batch), H).unwrap();
        assert!(err[0] < TOL, "rdf {}", err[0]);
    }

    proptest! {
        #[test]
        fn parts_are_non_negative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = interior_probs(&mut rng, 4, 3);
            let y = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
            prop_assert!(node_loss(&p, &y, NodeLossKind::Bce).unwrap() >= 0.0);
            let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            prop_assert!(kl_loss(&mu, &lv).unwrap() >= 0.0);
            let hat: Vec<_> = (0..4).map(|_| attr([rng.random_range(-2.0..2.0), 1.0, rng.random_range(-2.0..2.0)])).collect();
            let truth: Vec<_> = (0..4).map(|_| attr([1.0, rng.random_range(-2.0..2.0), 0.5])).collect();
            prop_assert!(edge_loss(&hat, &truth, 1.0).unwrap() >= 0.0);
        }

        #[test]
        fn total_is_weighted_sum(parts in prop::array::uniform5(0.0f64..1e3), w in prop::array::uniform5(0.0f64..1e3)) {
            let weights = LossWeights {
                alpha_node: w[0], alpha_edge: w[1], alpha_energy: w[2], beta_kl: w[3], alpha_rdf: w[4],
                ..LossWeights::default()
            };
            let b = total_loss(parts, &weights).unwrap();
            let expect: f64 = parts.iter().zip(&w).map(|(p, w)| p * w).sum();
            prop_assert!((b.total - expect).abs() <= 1e-9 * expect.max(1e-300));
        }

        #[test]
        fn rdf_loss_ignores_atom_order(seed in 0u64..200) {
            let c = frame(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut perm: Vec<usize> = (0..16).collect();
            for i in (1..16).rev() { perm.swap(i, rng.random_range(0..=i)); }
            let mut hat = c.positions.clone();
            hat[0][0] += 0.3;
            let shuffled: Vec<_> = perm.iter().map(|&k| hat[k]).collect();
            let rdf = RdfConfig::default();
            let a = rdf_loss(&hat, &c.positions, &c.box_lengths, &rdf).unwrap();
            let b = rdf_loss(&shuffled, &c.positions, &c.box_lengths, &rdf).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12));
        }
    }
}
