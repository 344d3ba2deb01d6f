//! Mini-batch training with Adam, global-norm clipping, checkpoints and a CSV
//! loss log.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Tape, Tensor};
use crate::batch::GraphBatch;
use crate::error::{Error, Result};
use crate::losses::{objective, total_loss, LossBreakdown, LossWeights, TERM_NAMES};
use crate::model::{standard_normal, ModelConfig, ModelParams};
use crate::periodic_graph::{ConfigGraph, RdfConfig};
use crate::scalar::Scalar;
use crate::synthetic::random_permutation;
use crate::trajio::EnergyNormalizer;

pub use crate::metrics::evaluate;

pub const CHECKPOINT_FORMAT: &str = "glassvae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "")]
pub struct TrainConfig<S: Scalar> {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: S,
    pub adam_beta1: S,
    pub adam_beta2: S,
    pub adam_eps: S,
    pub clip_norm: S,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Stop once the epoch loss has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    pub weights: LossWeights<S>,
    pub rdf: RdfConfig<S>,
}

impl<S: Scalar> Default for TrainConfig<S> {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: S::lit(1e-3),
            adam_beta1: S::lit(0.9),
            adam_beta2: S::lit(0.999),
            adam_eps: S::lit(1e-8),
            clip_norm: S::one(),
            seed: 0,
            checkpoint_every: 0,
            early_stop_patience: None,
            weights: LossWeights::default(),
            rdf: RdfConfig::default(),
        }
    }
}

impl<S: Scalar> TrainConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if !(self.clip_norm > S::zero()) {
            return Err(Error::arg("clip_norm must be positive"));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > S::zero() && b < S::one()) {
                return Err(Error::arg(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.learning_rate >= S::zero()) || !(self.adam_eps > S::zero()) {
            return Err(Error::arg("learning_rate must be >= 0 and adam_eps > 0"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<S: Scalar> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<Tensor<S>> = shapes
            .into_iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<'a, S: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<S>>,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: S,
    betas: (S, S),
    eps: S,
) -> Result<()> {
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let mut count = 0;
    for (k, p) in params.into_iter().enumerate() {
        let (g, m, v) = match (grads.get(k), state.m.get_mut(k), state.v.get_mut(k)) {
            (Some(g), Some(m), Some(v)) if g.shape() == p.shape() && m.shape() == p.shape() => {
                (g, m, v)
            }
            _ => {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: grads.get(k).map_or((0, 0), Tensor::shape),
                })
            }
        };
        let (pd, gd) = (p.data_mut(), g.data());
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
        count += 1;
    }
    if count != grads.len() {
        return Err(Error::arg(format!(
            "{} gradients for {count} parameters",
            grads.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainingState<S: Scalar> {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState<S>,
}

/// Everything needed to resume training or to run inference on new frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<S: Scalar> {
    pub format: String,
    pub version: u32,
    pub params: ModelParams<S>,
    pub species: Vec<String>,
    pub cutoff: S,
    pub energy_norm: Option<EnergyNormalizer<S>>,
    pub rdf: RdfConfig<S>,
    pub state: Option<TrainingState<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "{} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CheckpointMeta<S: Scalar> {
    pub species: Vec<String>,
    pub cutoff: S,
    pub energy_norm: Option<EnergyNormalizer<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EpochLog<S: Scalar> {
    /// One-based epoch number.
    pub epoch: usize,
    /// Graph-weighted mean over the epoch's batches.
    pub loss: LossBreakdown<S>,
    pub steps: u64,
    /// Largest pre-clip gradient norm seen in the epoch.
    pub max_grad_norm: S,
}

/// Replaces one loss term with NaN at a given epoch, to exercise the divergence path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub term: String,
    pub epoch: usize,
}

#[derive(Default)]
pub struct TrainOptions<S: Scalar> {
    /// Directory for `checkpoint.json` and `loss_log.csv`.
    pub out_dir: Option<PathBuf>,
    pub meta: CheckpointMeta<S>,
    pub resume: Option<Checkpoint<S>>,
    pub fault: Option<FaultInjection>,
}

pub struct TrainOutcome<S: Scalar> {
    pub params: ModelParams<S>,
    pub state: TrainingState<S>,
    pub log: Vec<EpochLog<S>>,
    pub checkpoint: Option<PathBuf>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Appends rows to a loss CSV, writing the header when the file is new.
pub fn append_loss_log<S: Scalar>(path: &Path, rows: &[EpochLog<S>]) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["epoch", "node", "edge", "energy", "kl", "rdf", "total"])?;
    }
    for r in rows {
        let l = &r.loss;
        w.write_record([
            r.epoch.to_string(),
            l.node.to_string(),
            l.edge.to_string(),
            l.energy.to_string(),
            l.kl.to_string(),
            l.rdf.to_string(),
            l.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, [f64; 6])>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.parse().ok()).ok_or(Error::Parse {
                line: line + 2,
                message: format!("bad loss log field {k}"),
            })
        };
        out.push((
            field(0)? as usize,
            [
                field(1)?,
                field(2)?,
                field(3)?,
                field(4)?,
                field(5)?,
                field(6)?,
            ],
        ));
    }
    Ok(out)
}

/// Trains on `graphs`, calling `on_epoch` after every epoch.
pub fn train<S: Scalar>(
    graphs: &[ConfigGraph<S>],
    model_config: &ModelConfig,
    config: &TrainConfig<S>,
    options: TrainOptions<S>,
    on_epoch: &mut dyn FnMut(&EpochLog<S>),
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if graphs.is_empty() {
        return Err(Error::arg("training needs at least one graph"));
    }
    if graphs.iter().any(|g| g.energy_norm.is_none()) {
        return Err(Error::arg("every training graph needs a normalized energy"));
    }
    let (mut params, mut state) = match options.resume {
        Some(ck) => {
            let state = ck
                .state
                .ok_or_else(|| Error::arg("checkpoint has no training state to resume"))?;
            (ck.params, state)
        }
        None => {
            let params = ModelParams::init(model_config)?;
            let adam = AdamState::new(params.tensors().iter().map(|t| &t.tensor));
            (params, TrainingState { epoch: 0, adam })
        }
    };
    let ckpt_path = options.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let log_path = options.out_dir.as_ref().map(|d| d.join(LOSS_LOG_FILE));
    let mut last_good: Option<PathBuf> = None;
    let save = |params: &ModelParams<S>, state: &TrainingState<S>| -> Result<Option<PathBuf>> {
        let Some(path) = &ckpt_path else {
            return Ok(None);
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: params.clone(),
            species: options.meta.species.clone(),
            cutoff: options.meta.cutoff,
            energy_norm: options.meta.energy_norm,
            rdf: config.rdf,
            state: Some(state.clone()),
        }
        .save(path)?;
        Ok(Some(path.clone()))
    };

    let mut log = Vec::new();
    let mut best = S::infinity();
    let mut since_best = 0usize;
    let d = params.config().latent_dim;
    for epoch in state.epoch..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        let order = random_permutation(&mut rng, graphs.len());
        let mut acc = [S::zero(); 6];
        let mut max_norm = S::zero();
        for chunk in order.chunks(config.batch_size) {
            let members: Vec<&ConfigGraph<S>> = chunk.iter().map(|&k| &graphs[k]).collect();
            let batch = GraphBatch::new(&members, &config.rdf)?;
            let noise = standard_normal(&mut rng, batch.n_graphs, d);
            let tape = Tape::new();
            let bound = params.bind(&tape, true);
            let fwd = bound.forward(&batch, Some(&noise))?;
            let obj = objective(&tape, &fwd, &batch, &config.weights)?;
            let mut parts = obj.breakdown(&tape).parts();
            if let Some(f) = &options.fault {
                if f.epoch == epoch + 1 {
                    if let Some(k) = TERM_NAMES.iter().position(|n| *n == f.term) {
                        parts[k] = S::nan();
                    }
                }
            }
            let breakdown = match total_loss(parts, &config.weights) {
                Ok(b) if b.total.is_finite() => b,
                Ok(_) => return Err(divergence("total", epoch, &last_good)),
                Err(Error::NonFiniteLoss { term }) => {
                    return Err(divergence(&term, epoch, &last_good))
                }
                Err(e) => return Err(e),
            };
            let grads = tape.backward(obj.total)?;
            let mut gs: Vec<Tensor<S>> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
            drop(bound);
            let norm = clip_global_norm(&mut gs, config.clip_norm);
            if !norm.is_finite() {
                return Err(divergence("gradient", epoch, &last_good));
            }
            max_norm = max_norm.max(norm);
            adam_step(
                params.tensors_mut(),
                &gs,
                &mut state.adam,
                config.learning_rate,
                (config.adam_beta1, config.adam_beta2),
                config.adam_eps,
            )?;
            let w = S::from_usize_lossy(chunk.len());
            for (a, v) in acc
                .iter_mut()
                .zip(breakdown.parts().iter().chain([&breakdown.total]))
            {
                *a += w * *v;
            }
        }
        let n = S::from_usize_lossy(graphs.len());
        let mean = acc.map(|v| v / n);
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: LossBreakdown {
                node: mean[0],
                edge: mean[1],
                energy: mean[2],
                kl: mean[3],
                rdf: mean[4],
                total: mean[5],
            },
            steps: state.adam.step,
            max_grad_norm: max_norm,
        };
        state.epoch = epoch + 1;
        if let Some(p) = &log_path {
            append_loss_log(p, &[entry])?;
        }
        on_epoch(&entry);
        log.push(entry);
        let last = state.epoch == config.epochs;
        let stop = match config.early_stop_patience {
            Some(patience) => {
                if entry.loss.total < best {
                    best = entry.loss.total;
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                since_best >= patience
            }
            None => false,
        };
        let periodic = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
        if periodic || last || stop {
            last_good = save(&params, &state)?.or(last_good);
        }
        if stop {
            log::info!("early stop after epoch {}", state.epoch);
            break;
        }
    }
    if last_good.is_none() {
        last_good = save(&params, &state)?;
    }
    Ok(TrainOutcome {
        params,
        state,
        log,
        checkpoint: last_good,
    })
}

fn divergence(term: &str, epoch: usize, last: &Option<PathBuf>) -> Error {
    Error::Divergence {
        term: term.into(),
        epoch: epoch + 1,
        last_checkpoint: last.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::periodic_graph::build_graph;
    use crate::synthetic::HarmonicCrystal;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = vec![scalar_param(0.0)];
        let mut st = AdamState::new(&p);
        adam_step(
            p.iter_mut(),
            &[scalar_param(1.0)],
            &mut st,
            0.1,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![scalar_param(2.0)];
        let mut st = AdamState::new(&p);
        st.m[0] = scalar_param(0.5);
        st.v[0] = scalar_param(0.25);
        adam_step(
            p.iter_mut(),
            &[scalar_param(1.0)],
            &mut st,
            0.0,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        let m = st.m[0].data()[0];
        let before = p[0].clone();
        adam_step(
            p.iter_mut(),
            &[scalar_param(0.0)],
            &mut st,
            0.0,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        assert_eq!(p[0], before);
        assert!(st.m[0].data()[0].abs() < m.abs());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![scalar_param(1.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..1000 {
            let g = scalar_param(2.0 * p[0].data()[0]);
            adam_step(p.iter_mut(), &[g], &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "{}", p[0].data()[0]);
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut p = vec![Tensor::<f64>::zeros(2, 2)];
        let mut st = AdamState::new(&p);
        assert!(adam_step(
            p.iter_mut(),
            &[Tensor::zeros(1, 2)],
            &mut st,
            0.1,
            (0.9, 0.999),
            1e-8
        )
        .is_err());
    }

    fn tiny_graphs() -> Vec<ConfigGraph<f64>> {
        let crystal = HarmonicCrystal::default();
        let frames = crystal.generate::<f64>(6, 2).unwrap();
        let e: Vec<f64> = frames.iter().map(|f| f.energy.unwrap()).collect();
        let norm = EnergyNormalizer::fit(&e).unwrap();
        frames
            .iter()
            .map(|f| {
                build_graph(
                    f,
                    crystal.cutoff(),
                    Some(&norm),
                    &crate::synthetic::species(),
                )
                .unwrap()
            })
            .collect()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            latent_dim: 8,
            n_mp_layers: 1,
            n_edge_blocks: 1,
            energy_head_dims: vec![8],
            max_nodes: 16,
            ..ModelConfig::default()
        }
    }

    fn quick(epochs: usize) -> TrainConfig<f64> {
        TrainConfig {
            epochs,
            batch_size: 4,
            rdf: RdfConfig {
                bins: 16,
                ..RdfConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let g = tiny_graphs();
        let a = train(
            &g,
            &tiny_model(),
            &quick(2),
            TrainOptions::default(),
            &mut |_| {},
        )
        .unwrap();
        let b = train(
            &g,
            &tiny_model(),
            &quick(2),
            TrainOptions::default(),
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.state.adam.step, 4);
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let g = tiny_graphs();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(3)
        };
        let out = train(
            &g,
            &tiny_model(),
            &cfg,
            TrainOptions::default(),
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(out.params, ModelParams::init(&tiny_model()).unwrap());
    }

    #[test]
    fn gradients_are_clipped() {
        let g = tiny_graphs();
        let out = train(
            &g,
            &tiny_model(),
            &quick(1),
            TrainOptions::default(),
            &mut |_| {},
        )
        .unwrap();
        // the raw gradient of this objective is far above the clip threshold
        assert!(out.log[0].max_grad_norm > 1.0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let g = tiny_graphs();
        let dir = tempfile::tempdir().unwrap();
        let full = train(
            &g,
            &tiny_model(),
            &quick(3),
            TrainOptions::default(),
            &mut |_| {},
        )
        .unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let first = train(&g, &tiny_model(), &quick(2), opts, &mut |_| {}).unwrap();
        let ck = Checkpoint::load(first.checkpoint.as_ref().unwrap()).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: Some(ck),
            ..TrainOptions::default()
        };
        let rest = train(&g, &tiny_model(), &quick(3), opts, &mut |_| {}).unwrap();
        assert_eq!(rest.params, full.params);
        assert_eq!(rest.log.len(), 1);
        assert!(rest.state.adam.step > first.state.adam.step);
        let rows = read_loss_log(&dir.path().join(LOSS_LOG_FILE)).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn injected_nan_names_the_term() {
        let g = tiny_graphs();
        let opts = TrainOptions {
            fault: Some(FaultInjection {
                term: "rdf".into(),
                epoch: 2,
            }),
            ..TrainOptions::default()
        };
        let cfg = TrainConfig {
            checkpoint_every: 1,
            ..quick(3)
        };
        let err = train(&g, &tiny_model(), &cfg, opts, &mut |_| {})
            .err()
            .unwrap();
        match err {
            Error::Divergence { term, epoch, .. } => {
                assert_eq!(term, "rdf");
                assert_eq!(epoch, 2);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let err = train::<f64>(
            &[],
            &tiny_model(),
            &quick(1),
            TrainOptions::default(),
            &mut |_| {},
        );
        assert!(matches!(err.err().unwrap(), Error::Argument(_)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let g = tiny_graphs();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let out = train(&g, &tiny_model(), &quick(1), opts, &mut |_| {}).unwrap();
        let ck = Checkpoint::load(out.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ck.params, out.params);
        assert_eq!(ck.state.as_ref().unwrap(), &out.state);
        let again = dir.path().join("again.json");
        ck.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&again).unwrap(),
            std::fs::read(out.checkpoint.unwrap()).unwrap()
        );
    }
}
