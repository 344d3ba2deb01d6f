//! Run configuration: one TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use glassvae_core::diagnostics::CheckSettings;
use glassvae_core::model::ModelConfig;
use glassvae_core::periodic_graph::{RdfMode, DEFAULT_CUTOFF};
use glassvae_core::{GenConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::args::{Command, Overrides};
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareSettings {
    /// Fraction of each temperature's frames assigned to training.
    pub ratio: f64,
    pub max_per_temperature: Option<usize>,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            max_per_temperature: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub batch_size: usize,
    pub rdf_mode: RdfMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            batch_size: 64,
            rdf_mode: RdfMode::Hard,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    #[default]
    Random,
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub cutoff: f64,
    pub mode: GenMode,
    pub prepare: PrepareSettings,
    pub model: ModelConfig,
    pub train: TrainConfig<f64>,
    pub eval: EvalSettings,
    pub generate: GenConfig<f64>,
    pub check: CheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            cutoff: DEFAULT_CUTOFF,
            mode: GenMode::Random,
            prepare: PrepareSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            generate: GenConfig::default(),
            check: CheckSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.spread_seed();
        Ok(cfg)
    }

    /// The top-level seed drives every stochastic stage.
    fn spread_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.generate.seed = self.seed;
        self.check.seed = self.seed;
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.spread_seed();
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(c) = o.cutoff {
            self.cutoff = c;
            self.check.cutoff = c;
        }
        if let Some(d) = o.latent_dim {
            self.model.latent_dim = d;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
            self.eval.batch_size = b;
        }
        if let Some(g) = o.gamma {
            self.generate.gamma = g;
        }
        if o.e_min.is_some() {
            self.generate.e_min = o.e_min;
        }
        if o.e_max.is_some() {
            self.generate.e_max = o.e_max;
        }
        if let Some(t) = o.steps {
            self.generate.steps = t;
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
    }

    pub fn resolve(config: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("glassvae-run"))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written before any artifact; `glassvae rerun` replays it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub command: Command,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config_path: Option<&Path>, command: &Command, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed: config.seed,
            out_dir: config.out_dir(),
            command: command.clone(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "seed = 4\ncutoff = 3.0\n[train]\nepochs = 7\nbatch_size = 8\n",
        )
        .unwrap();
        let o = Overrides {
            epochs: Some(2),
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(&p), &o).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.cutoff, 3.0);
        assert_eq!((cfg.seed, cfg.model.seed, cfg.train.seed), (9, 9, 9));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "sead = 4\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(CliError::Usage(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
