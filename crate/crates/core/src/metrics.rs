//! Regression metrics, held-out evaluation and CSV exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::GraphBatch;
use crate::error::{Error, Result};
use crate::losses::{node_loss, NodeLossKind};
use crate::model::ModelParams;
use crate::periodic_graph::{histogram_with, ConfigGraph, RdfConfig, RdfHistogram, RdfMode};
use crate::scalar::Scalar;
use crate::trajio::{AtomicConfiguration, EnergyNormalizer};

fn check_pair<S: Scalar>(pred: &[S], truth: &[S]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "metric",
            left: (truth.len(), 1),
            right: (pred.len(), 1),
        });
    }
    if pred.is_empty() {
        return Err(Error::arg("metric over zero samples"));
    }
    Ok(())
}

pub fn rmse<S: Scalar>(pred: &[S], truth: &[S]) -> Result<S> {
    check_pair(pred, truth)?;
    let sse: S = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok((sse / S::from_usize_lossy(pred.len())).sqrt())
}

/// `1 − SS_res / SS_tot`; errors when the truth has zero variance.
pub fn r2<S: Scalar>(pred: &[S], truth: &[S]) -> Result<S> {
    check_pair(pred, truth)?;
    let mean = truth.iter().copied().sum::<S>() / S::from_usize_lossy(truth.len());
    let ss_tot: S = truth.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == S::zero() {
        return Err(Error::UndefinedR2);
    }
    let ss_res: S = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(S::one() - ss_res / ss_tot)
}

/// Writes `(true, pred)` rows for a parity plot.
pub fn parity_export<S: Scalar>(pred: &[S], truth: &[S], path: &Path) -> Result<()> {
    check_pair(pred, truth)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["true", "pred"])?;
    for (p, t) in pred.iter().zip(truth) {
        w.write_record([t.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("KS statistic needs two non-empty samples"));
    }
    let sorted = |v: &[S]| {
        let mut v = v.to_vec();
        v.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (S::from_usize_lossy(a.len()), S::from_usize_lossy(b.len()));
    let (mut i, mut j, mut d) = (0, 0, S::zero());
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((S::from_usize_lossy(i) / na - S::from_usize_lossy(j) / nb).abs());
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MetricsReport<S: Scalar> {
    /// eV/atom.
    pub energy_rmse: S,
    /// `None` when the evaluated energies are all equal.
    pub energy_r2: Option<S>,
    /// Å, over every edge of every evaluated graph.
    pub dist_rmse: S,
    pub dist_r2: Option<S>,
    pub node_bce: S,
    /// Fraction of atoms whose most probable species is correct.
    pub node_accuracy: S,
    pub n_samples: usize,
}

/// Raw predictions behind a [`MetricsReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation<S: Scalar> {
    pub report: MetricsReport<S>,
    pub frame_ids: Vec<u64>,
    /// eV/atom.
    pub energy_true: Vec<S>,
    pub energy_pred: Vec<S>,
    pub dist_true: Vec<S>,
    pub dist_pred: Vec<S>,
    pub positions_hat: Vec<Vec<[S; 3]>>,
}

fn optional_r2<S: Scalar>(pred: &[S], truth: &[S]) -> Result<Option<S>> {
    match r2(pred, truth) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedR2) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates with `z = μ`; parameters are only read.
pub fn evaluate<S: Scalar>(
    graphs: &[ConfigGraph<S>],
    params: &ModelParams<S>,
    normalizer: &EnergyNormalizer<S>,
) -> Result<MetricsReport<S>> {
    Ok(evaluate_detailed(graphs, params, normalizer, 64, &RdfConfig::default())?.report)
}

pub fn evaluate_detailed<S: Scalar>(
    graphs: &[ConfigGraph<S>],
    params: &ModelParams<S>,
    normalizer: &EnergyNormalizer<S>,
    batch_size: usize,
    rdf: &RdfConfig<S>,
) -> Result<Evaluation<S>> {
    if graphs.is_empty() {
        return Err(Error::arg("cannot evaluate an empty split"));
    }
    let mut ev = Evaluation {
        report: MetricsReport {
            energy_rmse: S::zero(),
            energy_r2: None,
            dist_rmse: S::zero(),
            dist_r2: None,
            node_bce: S::zero(),
            node_accuracy: S::zero(),
            n_samples: graphs.len(),
        },
        frame_ids: Vec::new(),
        energy_true: Vec::new(),
        energy_pred: Vec::new(),
        dist_true: Vec::new(),
        dist_pred: Vec::new(),
        positions_hat: Vec::new(),
    };
    let (mut bce_sum, mut entries, mut correct, mut atoms) = (S::zero(), 0usize, 0usize, 0usize);
    for chunk in graphs.chunks(batch_size.max(1)) {
        let refs: Vec<&ConfigGraph<S>> = chunk.iter().collect();
        let batch = GraphBatch::new(&refs, rdf)?;
        let out = params.evaluate(&batch, None)?;
        for (g, graph) in chunk.iter().enumerate() {
            let n = S::from_usize_lossy(graph.n_nodes());
            let e_true = graph
                .energy_norm
                .ok_or_else(|| Error::arg(format!("frame {} has no energy", graph.frame_id)))?;
            ev.frame_ids.push(graph.frame_id);
            ev.energy_true.push(normalizer.denormalize(e_true) / n);
            ev.energy_pred
                .push(normalizer.denormalize(out.energy.get(g, 0)) / n);
        }
        for e in 0..batch.n_edges() {
            ev.dist_true.push(batch.edge_attrs.get(e, 3));
            ev.dist_pred.push(out.edge_hat.get(e, 3));
        }
        let cells = batch.node_features.len();
        bce_sum += node_loss(&out.node_probs, &batch.node_features, NodeLossKind::Bce)?
            * S::from_usize_lossy(cells);
        entries += cells;
        for (r, &truth) in batch.species_index().iter().enumerate() {
            let row = out.node_probs.row(r);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            correct += usize::from(best == truth);
        }
        atoms += batch.n_nodes();
        let mut start = 0;
        for &n in &batch.nodes_per_graph {
            ev.positions_hat.push(
                (start..start + n)
                    .map(|r| {
                        [
                            out.positions.get(r, 0),
                            out.positions.get(r, 1),
                            out.positions.get(r, 2),
                        ]
                    })
                    .collect(),
            );
            start += n;
        }
    }
    ev.report.energy_rmse = rmse(&ev.energy_pred, &ev.energy_true)?;
    ev.report.energy_r2 = optional_r2(&ev.energy_pred, &ev.energy_true)?;
    ev.report.dist_rmse = rmse(&ev.dist_pred, &ev.dist_true)?;
    ev.report.dist_r2 = optional_r2(&ev.dist_pred, &ev.dist_true)?;
    ev.report.node_bce = bce_sum / S::from_usize_lossy(entries);
    ev.report.node_accuracy = S::from_usize_lossy(correct) / S::from_usize_lossy(atoms);
    Ok(ev)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RdfComparison<S: Scalar> {
    pub original: RdfHistogram<S>,
    pub reconstructed: RdfHistogram<S>,
    /// `‖g_recon − g_true‖₂`.
    pub gap: S,
}

impl<S: Scalar> RdfComparison<S> {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_center", "g_true", "g_recon"])?;
        for ((c, a), b) in self
            .original
            .bin_centers
            .iter()
            .zip(&self.original.values)
            .zip(&self.reconstructed.values)
        {
            w.write_record([c.to_string(), a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn histogram_gap<S: Scalar>(a: &RdfHistogram<S>, b: &RdfHistogram<S>) -> S {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<S>()
        .sqrt()
}

/// Histograms of an original frame and a reconstruction on the same grid.
pub fn rdf_compare<S: Scalar>(
    original: &AtomicConfiguration<S>,
    reconstructed: &[[S; 3]],
    rdf: &RdfConfig<S>,
    mode: RdfMode,
) -> Result<RdfComparison<S>> {
    if reconstructed.len() != original.n_atoms() {
        return Err(Error::Shape {
            op: "rdf_compare",
            left: (original.n_atoms(), 3),
            right: (reconstructed.len(), 3),
        });
    }
    let grid = rdf.grid(&original.box_lengths)?;
    let a = histogram_with(&original.positions, &original.box_lengths, &grid, mode);
    let b = histogram_with(reconstructed, &original.box_lengths, &grid, mode);
    let gap = histogram_gap(&a, &b);
    Ok(RdfComparison {
        original: a,
        reconstructed: b,
        gap,
    })
}
