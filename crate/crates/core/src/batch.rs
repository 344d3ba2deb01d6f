//! Disjoint union of several graphs, laid out for batched tape evaluation.

use std::rc::Rc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BinGrid;
use crate::periodic_graph::{histogram_with, ConfigGraph, RdfConfig, RdfMode};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GraphBatch<S: Scalar> {
    pub n_graphs: usize,
    pub nodes_per_graph: Vec<usize>,
    pub edges_per_graph: Vec<usize>,
    pub frame_ids: Vec<u64>,
    /// `[N, S]` one-hot rows of every node.
    pub node_features: Tensor<S>,
    pub node_graph: Rc<[usize]>,
    /// Index of each node inside its own graph.
    pub node_local: Rc<[usize]>,
    /// Global node ids of edge endpoints `(i, j)`.
    pub edge_i: Rc<[usize]>,
    pub edge_j: Rc<[usize]>,
    pub edge_graph: Rc<[usize]>,
    /// `[E, 4]` rows `(Δr, d)`.
    pub edge_attrs: Tensor<S>,
    /// `[E, 3]` box lengths of each edge's graph.
    pub edge_boxes: Tensor<S>,
    /// `[N, 3]` reference positions `R⁽⁰⁾`.
    pub reference_positions: Tensor<S>,
    /// Unordered pairs `i < j` inside each graph, for histogram losses.
    pub pair_i: Rc<[usize]>,
    pub pair_j: Rc<[usize]>,
    pub pair_graph: Rc<[usize]>,
    pub pair_boxes: Tensor<S>,
    pub rdf_grids: Rc<[BinGrid<S>]>,
    /// `[G, bins]` soft histograms of the reference positions.
    pub target_rdf: Tensor<S>,
    /// `[G, 1]` normalized energies, when every graph carries one.
    pub energies: Option<Tensor<S>>,
}

impl<S: Scalar> GraphBatch<S> {
    pub fn new(graphs: &[&ConfigGraph<S>], rdf: &RdfConfig<S>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::arg("cannot batch zero graphs"));
        }
        let n_species = graphs[0].species_count();
        let mut features = Vec::new();
        let (mut node_graph, mut node_local) = (Vec::new(), Vec::new());
        let (mut edge_i, mut edge_j, mut edge_graph) = (Vec::new(), Vec::new(), Vec::new());
        let (mut attrs, mut eboxes, mut refs) = (Vec::new(), Vec::new(), Vec::new());
        let (mut pair_i, mut pair_j, mut pair_graph, mut pboxes) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut grids = Vec::with_capacity(graphs.len());
        let mut target = Vec::new();
        let mut energies = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for (g, graph) in graphs.iter().enumerate() {
            let n = graph.n_nodes();
            if graph.species_count() != n_species {
                return Err(Error::Shape {
                    op: "batch",
                    left: (n, n_species),
                    right: (n, graph.species_count()),
                });
            }
            if graph.n_edges() == 0 {
                return Err(Error::DegenerateGraph(format!(
                    "frame {} has no edges",
                    graph.frame_id
                )));
            }
            for (k, row) in graph.node_features.iter().enumerate() {
                features.extend_from_slice(row);
                refs.extend_from_slice(&graph.reference_positions[k]);
                node_graph.push(g);
                node_local.push(k);
            }
            for (&(i, j), a) in graph.edge_index.iter().zip(&graph.edge_attrs) {
                edge_i.push(offset + i);
                edge_j.push(offset + j);
                edge_graph.push(g);
                attrs.extend_from_slice(&a.as_row());
                eboxes.extend_from_slice(&graph.box_lengths);
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    pair_i.push(offset + i);
                    pair_j.push(offset + j);
                    pair_graph.push(g);
                    pboxes.extend_from_slice(&graph.box_lengths);
                }
            }
            let grid = rdf.grid(&graph.box_lengths)?;
            target.extend(
                histogram_with(
                    &graph.reference_positions,
                    &graph.box_lengths,
                    &grid,
                    RdfMode::Soft,
                )
                .values,
            );
            grids.push(grid);
            energies.push(graph.energy_norm);
            offset += n;
        }
        let n_edges = edge_i.len();
        let n_pairs = pair_i.len();
        let bins = rdf.bins;
        Ok(Self {
            n_graphs: graphs.len(),
            nodes_per_graph: graphs.iter().map(|g| g.n_nodes()).collect(),
            edges_per_graph: graphs.iter().map(|g| g.n_edges()).collect(),
            frame_ids: graphs.iter().map(|g| g.frame_id).collect(),
            node_features: Tensor::new(offset, n_species, features)?,
            node_graph: node_graph.into(),
            node_local: node_local.into(),
            edge_i: edge_i.into(),
            edge_j: edge_j.into(),
            edge_graph: edge_graph.into(),
            edge_attrs: Tensor::new(n_edges, 4, attrs)?,
            edge_boxes: Tensor::new(n_edges, 3, eboxes)?,
            reference_positions: Tensor::new(offset, 3, refs)?,
            pair_i: pair_i.into(),
            pair_j: pair_j.into(),
            pair_graph: pair_graph.into(),
            pair_boxes: Tensor::new(n_pairs, 3, pboxes)?,
            rdf_grids: grids.into(),
            target_rdf: Tensor::new(graphs.len(), bins, target)?,
            energies: energies
                .into_iter()
                .collect::<Option<Vec<S>>>()
                .map(Tensor::column_vector),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_i.len()
    }

    pub fn species_index(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .map(|r| {
                self.node_features
                    .row(r)
                    .iter()
                    .position(|&v| v == S::one())
                    .unwrap_or(0)
            })
            .collect()
    }
}
