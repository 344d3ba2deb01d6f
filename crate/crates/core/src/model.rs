//! Dual-path graph encoder, decoder heads and energy regressor.
//!
//! The graph path embeds one-hot species, runs message passing with
//! `m_ij = MLP(h_j ∥ a_ij)` averaged over the neighbours of `i` and a residual
//! update `h_i ← h_i + MLP(h_i ∥ m̄_i)`, pools nodes per graph and emits `μ` and
//! `log σ²`. The edge path pushes every `a_ij` through residual blocks and pools
//! them into the descriptor `s`. The energy head reads `μ ∥ s`.
//!
//! Decoding is per node: each node sees `z` together with a learned embedding of
//! its slot in the template ordering, so species and displacements can differ
//! between atoms of one graph.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::batch::GraphBatch;
use crate::error::{Error, Result};
use crate::periodic_graph::{ConfigGraph, EdgeAttr, RdfConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "glassvae-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub n_mp_layers: usize,
    pub n_edge_blocks: usize,
    pub species_count: usize,
    pub edge_attr_dim: usize,
    pub energy_head_dims: Vec<usize>,
    /// Largest graph the slot embedding can address.
    pub max_nodes: usize,
    pub node_pooling: Pooling,
    pub edge_pooling: Pooling,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            latent_dim: 16,
            n_mp_layers: 2,
            n_edge_blocks: 2,
            species_count: 2,
            edge_attr_dim: 4,
            energy_head_dims: vec![32],
            max_nodes: 128,
            node_pooling: Pooling::Mean,
            edge_pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("n_mp_layers", self.n_mp_layers),
            ("n_edge_blocks", self.n_edge_blocks),
            ("species_count", self.species_count),
            ("max_nodes", self.max_nodes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be at least 1")));
            }
        }
        if self.energy_head_dims.contains(&0) {
            return Err(Error::arg("energy_head_dims entries must be at least 1"));
        }
        if self.edge_attr_dim != 4 {
            return Err(Error::arg(format!(
                "edge_attr_dim must be 4, got {}",
                self.edge_attr_dim
            )));
        }
        if !(8..=64).contains(&self.latent_dim) {
            return Err(Error::arg(format!(
                "latent_dim {} outside [8, 64]",
                self.latent_dim
            )));
        }
        if !(16..=32).contains(&self.latent_dim) {
            log::warn!(
                "latent_dim {} outside the usual 16-32 range",
                self.latent_dim
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Mlp(Vec<Linear>);

#[derive(Clone, Copy)]
enum Init {
    Glorot(f64),
    Zeros,
    Const(f64),
    Uniform(f64),
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Linear,
    mp_msg: Vec<Mlp>,
    mp_upd: Vec<Mlp>,
    enc_hidden: Linear,
    mu: Linear,
    log_var: Linear,
    edge_in: Linear,
    edge_blocks: Vec<Mlp>,
    slots: usize,
    node_head: Mlp,
    pos_head: Mlp,
    edge_head: Mlp,
    energy_head: Mlp,
}

impl Layout {
    /// Declares every tensor in a fixed order through `add(name, rows, cols, init)`.
    fn declare(
        cfg: &ModelConfig,
        add: &mut dyn FnMut(String, usize, usize, Init) -> usize,
    ) -> Self {
        let (h, d, s) = (cfg.hidden_dim, cfg.latent_dim, cfg.species_count);
        let slots = add("decoder.slots".into(), cfg.max_nodes, h, Init::Uniform(1.0));
        let mut linear = |name: &str, i: usize, o: usize, gain: f64, bias: Init| Linear {
            w: add(format!("{name}.w"), i, o, Init::Glorot(gain)),
            b: add(format!("{name}.b"), 1, o, bias),
        };
        let mlp = |linear: &mut dyn FnMut(&str, usize, usize, f64, Init) -> Linear,
                   name: &str,
                   dims: &[usize],
                   last_gain: f64,
                   last_bias: Init| {
            let n = dims.len() - 1;
            Mlp((0..n)
                .map(|k| {
                    let (gain, bias) = if k + 1 == n {
                        (last_gain, last_bias)
                    } else {
                        (1.0, Init::Zeros)
                    };
                    linear(&format!("{name}.{k}"), dims[k], dims[k + 1], gain, bias)
                })
                .collect())
        };
        let embed = linear("encoder.embed", s, h, 1.0, Init::Zeros);
        let mut mp_msg = Vec::new();
        let mut mp_upd = Vec::new();
        for l in 0..cfg.n_mp_layers {
            mp_msg.push(mlp(
                &mut linear,
                &format!("encoder.mp{l}.msg"),
                &[h + 4, h, h],
                1.0,
                Init::Zeros,
            ));
            mp_upd.push(mlp(
                &mut linear,
                &format!("encoder.mp{l}.upd"),
                &[2 * h, h, h],
                0.5,
                Init::Zeros,
            ));
        }
        let enc_hidden = linear("encoder.pool_hidden", h, h, 1.0, Init::Zeros);
        let mu = linear("encoder.mu", h, d, 1.0, Init::Zeros);
        let log_var = linear("encoder.log_var", h, d, 0.1, Init::Zeros);
        let edge_in = linear("encoder.edge_in", 4, h, 1.0, Init::Zeros);
        let edge_blocks = (0..cfg.n_edge_blocks)
            .map(|k| {
                mlp(
                    &mut linear,
                    &format!("encoder.edge_block{k}"),
                    &[h, h, h],
                    0.5,
                    Init::Zeros,
                )
            })
            .collect();
        let node_head = mlp(
            &mut linear,
            "decoder.node",
            &[d + h, h, s],
            1.0,
            Init::Zeros,
        );
        let pos_head = mlp(&mut linear, "decoder.pos", &[d + h, h, 3], 0.1, Init::Zeros);
        let edge_head = mlp(
            &mut linear,
            "decoder.edge",
            &[d + 4, h, h, 4],
            1.0,
            Init::Zeros,
        );
        let mut edims = vec![d + h];
        edims.extend(&cfg.energy_head_dims);
        edims.push(1);
        let energy_head = mlp(&mut linear, "energy", &edims, 1.0, Init::Const(50.0));
        Self {
            embed,
            mp_msg,
            mp_upd,
            enc_hidden,
            mu,
            log_var,
            edge_in,
            edge_blocks,
            slots,
            node_head,
            pos_head,
            edge_head,
            energy_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NamedTensor<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct ParamsFile<S: Scalar> {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor<S>>,
}

/// All trainable tensors of a model together with its configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "", try_from = "ParamsFile<S>", into = "ParamsFile<S>")]
pub struct ModelParams<S: Scalar> {
    config: ModelConfig,
    tensors: Vec<NamedTensor<S>>,
    layout: Layout,
}

impl<S: Scalar> PartialEq for ModelParams<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl<S: Scalar> From<ModelParams<S>> for ParamsFile<S> {
    fn from(p: ModelParams<S>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: p.config,
            tensors: p.tensors,
        }
    }
}

impl<S: Scalar> TryFrom<ParamsFile<S>> for ModelParams<S> {
    type Error = Error;

    fn try_from(f: ParamsFile<S>) -> Result<Self> {
        if f.format != CHECKPOINT_FORMAT || f.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "{} v{}",
                f.format, f.version
            )));
        }
        Self::from_parts(f.config, f.tensors)
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = Vec::new();
        let layout = Layout::declare(config, &mut |name, rows, cols, init| {
            let data = (0..rows * cols)
                .map(|_| match init {
                    Init::Glorot(gain) => {
                        let a = gain * (6.0 / (rows + cols) as f64).sqrt();
                        S::lit(rng.random_range(-a..a))
                    }
                    Init::Uniform(a) => S::lit(rng.random_range(-a..a)),
                    Init::Zeros => S::zero(),
                    Init::Const(c) => S::lit(c),
                })
                .collect();
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(rows, cols, data).expect("sized buffer"),
            });
            tensors.len() - 1
        });
        Ok(Self {
            config: config.clone(),
            tensors,
            layout,
        })
    }

    /// Reassembles parameters, checking names and shapes against the layout.
    pub fn from_parts(config: ModelConfig, tensors: Vec<NamedTensor<S>>) -> Result<Self> {
        config.validate()?;
        let mut expected = Vec::new();
        let layout = Layout::declare(&config, &mut |name, rows, cols, _| {
            expected.push((name, rows, cols));
            expected.len() - 1
        });
        if expected.len() != tensors.len() {
            return Err(Error::Structure(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in expected.iter().zip(&tensors) {
            if *name != t.name || (*r, *c) != t.tensor.shape() {
                return Err(Error::Structure(format!(
                    "parameter {name} {:?} does not match stored {} {:?}",
                    (r, c),
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(Self {
            config,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut().map(|t| &mut t.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.tensor)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Records the parameters on `tape`; `trainable` leaves receive gradients.
    pub fn bind<'a>(&'a self, tape: &'a Tape<S>, trainable: bool) -> Bound<'a, S> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.tensor.clone())
                } else {
                    tape.constant(t.tensor.clone())
                }
            })
            .collect();
        Bound {
            tape,
            vars,
            layout: &self.layout,
            config: &self.config,
        }
    }

    /// Forward pass without gradients, returning plain tensors.
    pub fn evaluate(
        &self,
        batch: &GraphBatch<S>,
        noise: Option<&Tensor<S>>,
    ) -> Result<ForwardValues<S>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let f = bound.forward(batch, noise)?;
        Ok(ForwardValues {
            mu: tape.value(f.mu),
            log_var: tape.value(f.log_var),
            z: tape.value(f.z),
            s: tape.value(f.s),
            node_probs: tape.value(f.node_probs),
            positions: tape.value(f.positions),
            edge_hat: tape.value(f.edge_hat),
            energy: tape.value(f.energy),
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    pub s: Var,
    pub node_probs: Var,
    pub positions: Var,
    pub edge_hat: Var,
    pub energy: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues<S: Scalar> {
    pub mu: Tensor<S>,
    pub log_var: Tensor<S>,
    pub z: Tensor<S>,
    pub s: Tensor<S>,
    pub node_probs: Tensor<S>,
    pub positions: Tensor<S>,
    pub edge_hat: Tensor<S>,
    pub energy: Tensor<S>,
}

/// Parameters recorded on a tape.
pub struct Bound<'a, S: Scalar> {
    tape: &'a Tape<S>,
    vars: Vec<Var>,
    layout: &'a Layout,
    config: &'a ModelConfig,
}

pub struct Encoded {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    pub s: Var,
}

pub struct Decoded {
    pub node_probs: Var,
    pub positions: Var,
    pub edge_hat: Var,
}

impl<'a, S: Scalar> Bound<'a, S> {
    pub fn tape(&self) -> &'a Tape<S> {
        self.tape
    }

    /// Parameter leaves in storage order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, x: Var, l: Linear) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[l.w])?;
        self.tape.add_row(y, self.vars[l.b])
    }

    fn mlp(&self, mut x: Var, m: &Mlp) -> Result<Var> {
        for (k, &l) in m.0.iter().enumerate() {
            x = self.linear(x, l)?;
            if k + 1 < m.0.len() {
                x = self.tape.silu(x);
            }
        }
        Ok(x)
    }

    fn pool(&self, x: Var, ids: &Rc<[usize]>, n: usize, how: Pooling) -> Result<Var> {
        match how {
            Pooling::Mean => self.tape.segment_mean(x, ids.clone(), n),
            Pooling::Sum => self.tape.segment_sum(x, ids.clone(), n),
        }
    }

    /// Encoder. With `noise` (`[G, d_z]` standard normal draws) the code is
    /// `z = μ + exp(½ log σ²) ⊙ ε`; without it `z = μ`.
    pub fn encode(&self, batch: &GraphBatch<S>, noise: Option<&Tensor<S>>) -> Result<Encoded> {
        let t = self.tape;
        let lay = self.layout;
        if batch.n_edges() == 0 {
            return Err(Error::DegenerateGraph("batch has no edges".into()));
        }
        if batch.node_features.cols() != self.config.species_count {
            return Err(Error::Shape {
                op: "encode",
                left: (batch.n_nodes(), self.config.species_count),
                right: batch.node_features.shape(),
            });
        }
        let n = batch.n_nodes();
        let g = batch.n_graphs;
        let x = t.constant(batch.node_features.clone());
        let a = t.constant(batch.edge_attrs.clone());

        let mut h = t.silu(self.linear(x, lay.embed)?);
        for (msg, upd) in lay.mp_msg.iter().zip(&lay.mp_upd) {
            let hj = t.index_gather(h, batch.edge_j.clone())?;
            let m = self.mlp(t.concat(&[hj, a])?, msg)?;
            let agg = t.segment_mean(m, batch.edge_i.clone(), n)?;
            let du = self.mlp(t.concat(&[h, agg])?, upd)?;
            h = t.add(h, du)?;
        }
        let pooled = self.pool(h, &batch.node_graph, g, self.config.node_pooling)?;
        let hidden = t.silu(self.linear(pooled, lay.enc_hidden)?);
        let mu = self.linear(hidden, lay.mu)?;
        let log_var = self.linear(hidden, lay.log_var)?;

        let mut e = t.silu(self.linear(a, lay.edge_in)?);
        for block in &lay.edge_blocks {
            let de = self.mlp(e, block)?;
            e = t.add(e, de)?;
        }
        let s = self.pool(e, &batch.edge_graph, g, self.config.edge_pooling)?;

        let z = match noise {
            None => mu,
            Some(eps) => {
                let sigma = t.exp(t.scalar_mul(log_var, S::lit(0.5)));
                let eps = t.constant(eps.clone());
                t.add(mu, t.mul(sigma, eps)?)?
            }
        };
        Ok(Encoded { mu, log_var, z, s })
    }

    /// Decoder heads evaluated on the batch's templates.
    pub fn decode(&self, z: Var, batch: &GraphBatch<S>) -> Result<Decoded> {
        let t = self.tape;
        let lay = self.layout;
        let (zr, zc) = t.shape(z);
        if zr != batch.n_graphs || zc != self.config.latent_dim {
            return Err(Error::Shape {
                op: "decode",
                left: (batch.n_graphs, self.config.latent_dim),
                right: (zr, zc),
            });
        }
        if let Some(&k) = batch
            .node_local
            .iter()
            .find(|&&k| k >= self.config.max_nodes)
        {
            return Err(Error::Shape {
                op: "decode slots",
                left: (self.config.max_nodes, self.config.hidden_dim),
                right: (k + 1, self.config.hidden_dim),
            });
        }
        let zn = t.index_gather(z, batch.node_graph.clone())?;
        let slot = t.index_gather(self.vars[lay.slots], batch.node_local.clone())?;
        let per_node = t.concat(&[zn, slot])?;

        let node_probs = t.softmax(self.mlp(per_node, &lay.node_head)?);
        let shift = self.mlp(per_node, &lay.pos_head)?;
        let positions = t.add(t.constant(batch.reference_positions.clone()), shift)?;

        let pi = t.index_gather(positions, batch.edge_i.clone())?;
        let pj = t.index_gather(positions, batch.edge_j.clone())?;
        let u = t.min_image(t.sub(pj, pi)?, &batch.edge_boxes)?;
        let un = t.l2_norm(u);
        let ze = t.index_gather(z, batch.edge_graph.clone())?;
        let edge_hat = self.mlp(t.concat(&[ze, u, un])?, &lay.edge_head)?;
        Ok(Decoded {
            node_probs,
            positions,
            edge_hat,
        })
    }

    /// `f_energy(code ∥ s)` in normalized units, `[G, 1]`.
    pub fn energy(&self, code: Var, s: Var) -> Result<Var> {
        let x = self.tape.concat(&[code, s])?;
        self.mlp(x, &self.layout.energy_head)
    }

    pub fn forward(&self, batch: &GraphBatch<S>, noise: Option<&Tensor<S>>) -> Result<Forward> {
        let enc = self.encode(batch, noise)?;
        let dec = self.decode(enc.z, batch)?;
        let energy = self.energy(enc.mu, enc.s)?;
        Ok(Forward {
            mu: enc.mu,
            log_var: enc.log_var,
            z: enc.z,
            s: enc.s,
            node_probs: dec.node_probs,
            positions: dec.positions,
            edge_hat: dec.edge_hat,
            energy,
        })
    }
}

/// Per-graph latent variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LatentCode<S: Scalar> {
    pub mu: Vec<S>,
    pub log_var: Vec<S>,
    pub z: Vec<S>,
    pub s: Vec<S>,
}

impl<S: Scalar> LatentCode<S> {
    /// Same code with `z` replaced.
    pub fn with_z(&self, z: Vec<S>) -> Self {
        Self { z, ..self.clone() }
    }

    pub fn sigma(&self) -> Vec<S> {
        self.log_var
            .iter()
            .map(|&v| (v * S::lit(0.5)).exp())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ReconstructionOutput<S: Scalar> {
    /// `N x S`, rows on the simplex.
    pub node_probs: Tensor<S>,
    pub edge_attrs_hat: Vec<EdgeAttr<S>>,
    pub positions_hat: Vec<[S; 3]>,
    pub energy_hat: S,
}

pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::lit(StandardNormal.sample(rng)))
        .collect();
    Tensor::new(rows, cols, data).expect("sized buffer")
}

fn single_batch<S: Scalar>(graph: &ConfigGraph<S>) -> Result<GraphBatch<S>> {
    GraphBatch::new(&[graph], &RdfConfig::default())
}

/// Encodes one graph, drawing `ε` from `rng`.
pub fn encode<S: Scalar, R: Rng + ?Sized>(
    graph: &ConfigGraph<S>,
    params: &ModelParams<S>,
    rng: &mut R,
) -> Result<LatentCode<S>> {
    let eps = standard_normal(rng, 1, params.config.latent_dim);
    encode_with_noise(graph, params, &eps)
}

pub fn encode_with_noise<S: Scalar>(
    graph: &ConfigGraph<S>,
    params: &ModelParams<S>,
    eps: &Tensor<S>,
) -> Result<LatentCode<S>> {
    let batch = single_batch(graph)?;
    let tape = Tape::new();
    let enc = params.bind(&tape, false).encode(&batch, Some(eps))?;
    let code = LatentCode {
        mu: tape.value(enc.mu).into_data(),
        log_var: tape.value(enc.log_var).into_data(),
        z: tape.value(enc.z).into_data(),
        s: tape.value(enc.s).into_data(),
    };
    if code
        .mu
        .iter()
        .chain(&code.log_var)
        .chain(&code.z)
        .chain(&code.s)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteLoss {
            term: "latent code".into(),
        });
    }
    Ok(code)
}

/// Decodes `code.z` on `template`; the energy is read from `code.mu ∥ code.s`.
pub fn decode<S: Scalar>(
    code: &LatentCode<S>,
    template: &ConfigGraph<S>,
    params: &ModelParams<S>,
) -> Result<ReconstructionOutput<S>> {
    let d = params.config.latent_dim;
    let h = params.config.hidden_dim;
    if code.z.len() != d || code.mu.len() != d || code.s.len() != h {
        return Err(Error::Shape {
            op: "decode",
            left: (1, d),
            right: (1, code.z.len()),
        });
    }
    let batch = single_batch(template)?;
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let z = tape.constant(Tensor::row_vector(code.z.clone()));
    let dec = bound.decode(z, &batch)?;
    let mu = tape.constant(Tensor::row_vector(code.mu.clone()));
    let s = tape.constant(Tensor::row_vector(code.s.clone()));
    let energy = tape.scalar(bound.energy(mu, s)?);
    let pos = tape.value(dec.positions);
    let edges = tape.value(dec.edge_hat);
    Ok(ReconstructionOutput {
        node_probs: tape.value(dec.node_probs),
        edge_attrs_hat: (0..edges.rows())
            .map(|r| {
                let e = edges.row(r);
                EdgeAttr {
                    delta: [e[0], e[1], e[2]],
                    dist: e[3],
                }
            })
            .collect(),
        positions_hat: (0..pos.rows())
            .map(|r| [pos.get(r, 0), pos.get(r, 1), pos.get(r, 2)])
            .collect(),
        energy_hat: energy,
    })
}

/// `f_energy(μ ∥ s)` in normalized units.
pub fn predict_energy<S: Scalar>(code: &LatentCode<S>, params: &ModelParams<S>) -> Result<S> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let mu = tape.constant(Tensor::row_vector(code.mu.clone()));
    let s = tape.constant(Tensor::row_vector(code.s.clone()));
    Ok(tape.scalar(bound.energy(mu, s)?))
}
