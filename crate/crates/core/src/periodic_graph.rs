//! Cutoff graphs under periodic boundaries and radial distribution histograms.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{min_image_vector, norm3, BinGrid};
use crate::scalar::Scalar;
use crate::trajio::{AtomicConfiguration, EnergyNormalizer};

pub const DEFAULT_CUTOFF: f64 = 5.0;
pub const DEFAULT_RDF_BINS: usize = 64;

/// `a_ij = (Δr_ij, d_ij)` with `Δr_ij = r_i − r_j` under the minimum image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EdgeAttr<S: Scalar> {
    pub delta: [S; 3],
    pub dist: S,
}

impl<S: Scalar> EdgeAttr<S> {
    pub fn as_row(&self) -> [S; 4] {
        [self.delta[0], self.delta[1], self.delta[2], self.dist]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ConfigGraph<S: Scalar> {
    /// `N x S` one-hot species rows.
    pub node_features: Vec<Vec<S>>,
    /// Directed pairs; both `(i, j)` and `(j, i)` are stored.
    pub edge_index: Vec<(usize, usize)>,
    pub edge_attrs: Vec<EdgeAttr<S>>,
    #[serde(rename = "box")]
    pub box_lengths: [S; 3],
    pub reference_positions: Vec<[S; 3]>,
    pub energy_norm: Option<S>,
    pub frame_id: u64,
}

impl<S: Scalar> ConfigGraph<S> {
    pub fn n_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_index.len()
    }

    pub fn species_count(&self) -> usize {
        self.node_features.first().map_or(0, Vec::len)
    }

    /// Column index of each node's species.
    pub fn species_index(&self) -> Vec<usize> {
        self.node_features
            .iter()
            .map(|row| row.iter().position(|&v| v == S::one()).unwrap_or(0))
            .collect()
    }

    pub fn node_feature_tensor(&self) -> Tensor<S> {
        Tensor::from_rows(&self.node_features).expect("rows share the species count")
    }

    pub fn edge_attr_tensor(&self) -> Tensor<S> {
        let rows: Vec<[S; 4]> = self.edge_attrs.iter().map(EdgeAttr::as_row).collect();
        Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, 4))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn check_box<S: Scalar>(box_lengths: &[S; 3]) -> Result<()> {
    if box_lengths
        .iter()
        .any(|&l| !(l > S::zero()) || !l.is_finite())
    {
        return Err(Error::arg(format!(
            "box edges must be positive, got {box_lengths:?}"
        )));
    }
    Ok(())
}

fn half_min_box<S: Scalar>(box_lengths: &[S; 3]) -> S {
    box_lengths.iter().copied().fold(S::infinity(), S::min) * S::lit(0.5)
}

/// Minimum-image displacement `Δr = ((r_i − r_j + L/2) mod L) − L/2` and its norm.
pub fn min_image_displacement<S: Scalar>(
    ri: &[S; 3],
    rj: &[S; 3],
    box_lengths: &[S; 3],
) -> Result<([S; 3], S)> {
    check_box(box_lengths)?;
    let d = min_image_vector(ri, rj, box_lengths);
    Ok((d, norm3(&d)))
}

fn one_hot<S: Scalar>(config: &AtomicConfiguration<S>, species: &[String]) -> Result<Vec<Vec<S>>> {
    config
        .species
        .iter()
        .map(|s| {
            let k = species
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| Error::Structure(format!("species {s:?} not in {species:?}")))?;
            let mut row = vec![S::zero(); species.len()];
            row[k] = S::one();
            Ok(row)
        })
        .collect()
}

/// Builds the cutoff graph of a configuration.
///
/// Edges join every ordered pair `i != j` whose minimum-image distance is at most
/// `cutoff`; `cutoff <= min(L)/2` is required so the nearest image is unique.
/// `Δr_ji` is stored as the exact negation of `Δr_ij`.
pub fn build_graph<S: Scalar>(
    config: &AtomicConfiguration<S>,
    cutoff: S,
    normalizer: Option<&EnergyNormalizer<S>>,
    species: &[String],
) -> Result<ConfigGraph<S>> {
    check_box(&config.box_lengths)?;
    let half = half_min_box(&config.box_lengths);
    if !(cutoff > S::zero()) || cutoff > half {
        return Err(Error::InvalidCutoff {
            cutoff: cutoff.as_f64(),
            half_box: half.as_f64(),
        });
    }
    if config.species.len() != config.n_atoms() {
        return Err(Error::Structure(
            "species and position counts differ".into(),
        ));
    }
    let node_features = one_hot(config, species)?;
    let n = config.n_atoms();
    let pos = &config.positions;

    // upper triangle first, then mirror, then sort into (i, j) order
    let mut pairs: Vec<(usize, usize, EdgeAttr<S>)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = min_image_vector(&pos[i], &pos[j], &config.box_lengths);
            let dist = norm3(&delta);
            if dist == S::zero() {
                return Err(Error::Structure(format!(
                    "frame {}: atoms {i} and {j} coincide",
                    config.frame_id
                )));
            }
            if dist <= cutoff {
                pairs.push((i, j, EdgeAttr { delta, dist }));
                let neg = [-delta[0], -delta[1], -delta[2]];
                pairs.push((j, i, EdgeAttr { delta: neg, dist }));
            }
        }
    }
    pairs.sort_by_key(|p| (p.0, p.1));

    let energy_norm = match (normalizer, config.energy) {
        (Some(nm), Some(e)) => Some(nm.normalize(e)),
        _ => None,
    };
    Ok(ConfigGraph {
        node_features,
        edge_index: pairs.iter().map(|p| (p.0, p.1)).collect(),
        edge_attrs: pairs.iter().map(|p| p.2).collect(),
        box_lengths: config.box_lengths,
        reference_positions: config.positions.clone(),
        energy_norm,
        frame_id: config.frame_id,
    })
}

/// Cutoff edges of a point cloud without periodic images.
pub fn free_cell_edges<S: Scalar>(
    positions: &[[S; 3]],
    cutoff: S,
) -> Vec<((usize, usize), EdgeAttr<S>)> {
    let mut out = Vec::new();
    for i in 0..positions.len() {
        for j in 0..positions.len() {
            if i == j {
                continue;
            }
            let delta = [
                positions[i][0] - positions[j][0],
                positions[i][1] - positions[j][1],
                positions[i][2] - positions[j][2],
            ];
            let dist = norm3(&delta);
            if dist <= cutoff {
                out.push(((i, j), EdgeAttr { delta, dist }));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RdfMode {
    Hard,
    Soft,
}

/// Histogram settings; unset fields default to `r_max = min(L)/2` and a kernel
/// width of one bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "")]
pub struct RdfConfig<S: Scalar> {
    pub bins: usize,
    pub r_max: Option<S>,
    pub kernel_width: Option<S>,
}

impl<S: Scalar> Default for RdfConfig<S> {
    fn default() -> Self {
        Self {
            bins: DEFAULT_RDF_BINS,
            r_max: None,
            kernel_width: None,
        }
    }
}

impl<S: Scalar> RdfConfig<S> {
    pub fn grid(&self, box_lengths: &[S; 3]) -> Result<BinGrid<S>> {
        check_box(box_lengths)?;
        let half = half_min_box(box_lengths);
        let r_max = self.r_max.unwrap_or(half);
        if !(r_max > S::zero()) || r_max > half {
            return Err(Error::arg(format!(
                "r_max {r_max} must lie in (0, min(box)/2 = {half}]"
            )));
        }
        if self.bins < 2 {
            return Err(Error::arg(format!(
                "need at least 2 bins, got {}",
                self.bins
            )));
        }
        let width = r_max / S::from_usize_lossy(self.bins);
        let sigma = self.kernel_width.unwrap_or(width);
        if !(sigma > S::zero()) {
            return Err(Error::arg(format!(
                "kernel width must be positive, got {sigma}"
            )));
        }
        Ok(BinGrid {
            r_max,
            bins: self.bins,
            sigma,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RdfHistogram<S: Scalar> {
    pub bin_centers: Vec<S>,
    pub values: Vec<S>,
    pub r_max: S,
    pub kernel_width: S,
}

/// Minimum-image distances of all unordered pairs `i < j`.
pub fn pair_distances<S: Scalar>(positions: &[[S; 3]], box_lengths: &[S; 3]) -> Vec<S> {
    let mut out = Vec::with_capacity(positions.len() * positions.len().saturating_sub(1) / 2);
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            out.push(norm3(&min_image_vector(
                &positions[i],
                &positions[j],
                box_lengths,
            )));
        }
    }
    out
}

/// Histogram of distances on a grid. Hard mode counts pairs per bin; soft mode
/// spreads each pair over all bins with normalized Gaussian weights.
pub fn histogram_of<S: Scalar>(distances: &[S], grid: &BinGrid<S>, mode: RdfMode) -> Vec<S> {
    let mut values = vec![S::zero(); grid.bins];
    let mut w = vec![S::zero(); grid.bins];
    let mut slopes = vec![S::zero(); grid.bins];
    for &d in distances {
        match mode {
            RdfMode::Hard => {
                if let Some(b) = grid.hard_bin(d) {
                    values[b] += S::one();
                }
            }
            RdfMode::Soft => {
                if grid.counts(d) {
                    grid.soft_weights(d, &mut w, &mut slopes);
                    for (v, &x) in values.iter_mut().zip(&w) {
                        *v += x;
                    }
                }
            }
        }
    }
    values
}

/// Pair-distance histogram of one configuration on `(0, r_max]`.
pub fn compute_rdf<S: Scalar>(
    positions: &[[S; 3]],
    box_lengths: &[S; 3],
    r_max: S,
    bins: usize,
    mode: RdfMode,
    kernel_width: S,
) -> Result<RdfHistogram<S>> {
    let grid = RdfConfig {
        bins,
        r_max: Some(r_max),
        kernel_width: Some(kernel_width),
    }
    .grid(box_lengths)?;
    Ok(histogram_with(positions, box_lengths, &grid, mode))
}

pub fn histogram_with<S: Scalar>(
    positions: &[[S; 3]],
    box_lengths: &[S; 3],
    grid: &BinGrid<S>,
    mode: RdfMode,
) -> RdfHistogram<S> {
    let d = pair_distances(positions, box_lengths);
    RdfHistogram {
        bin_centers: grid.centers(),
        values: histogram_of(&d, grid, mode),
        r_max: grid.r_max,
        kernel_width: grid.sigma,
    }
}
