//! Training configuration from defaults, a TOML file and flags, in rising
//! order of precedence. `STPROT_SEED` supplies the seed when neither the flag
//! nor the file does.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use stprot::autoencoder::Tying;
use stprot::graph::GraphKind;
use stprot::optim::TrainConfig;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "STPROT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossMode {
    /// β₁·L_rna + β₂·L_protein.
    Full,
    /// RNA reconstruction only (β₂ = 0).
    RnaOnly,
    /// Protein regression only (β₁ = 0).
    ProteinOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphChoice {
    /// K nearest neighbors in RNA principal-component space.
    Knn,
    /// Spots closer than `--radius` in tissue coordinates.
    Spatial,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the RNA reconstruction loss.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Weight of the protein loss.
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Loss ablation; applied after `--beta1`/`--beta2`.
    #[arg(long, value_enum)]
    pub loss: Option<LossMode>,
    /// Attention heads per layer.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden1: Option<usize>,
    #[arg(long)]
    pub hidden2: Option<usize>,
    /// Neighbors per spot in the KNN graph.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub graph: Option<GraphChoice>,
    /// Radius of the spatial graph.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Highly variable genes kept before PCA.
    #[arg(long)]
    pub n_hvg: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs between progress lines on stderr (0 = silent).
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Stop once the total loss has not improved for this many epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Give the decoder its own attention weights and coefficients.
    #[arg(long)]
    pub untied: bool,
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let (mut cfg, file_sets_seed) = match &self.config {
            Some(path) => read_config_file(path)?,
            None => (TrainConfig::default(), false),
        };
        if !file_sets_seed {
            if let Some(seed) = env_seed()? {
                cfg.seed = seed;
            }
        }
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag {
                    cfg.$field = v;
                }
            };
        }
        set!(lr => lr);
        set!(weight_decay => weight_decay);
        set!(epochs => epochs);
        set!(beta1 => beta1_loss);
        set!(beta2 => beta2_loss);
        set!(heads => heads);
        set!(k => k_neighbors);
        set!(radius => radius);
        set!(n_hvg => n_hvg);
        set!(seed => seed);
        set!(log_every => log_every);
        if let Some(h) = self.hidden1 {
            cfg.hidden.0 = h;
        }
        if let Some(h) = self.hidden2 {
            cfg.hidden.1 = h;
        }
        if self.patience.is_some() {
            cfg.patience = self.patience;
        }
        match self.loss {
            Some(LossMode::RnaOnly) => cfg.beta2_loss = 0.0,
            Some(LossMode::ProteinOnly) => cfg.beta1_loss = 0.0,
            Some(LossMode::Full) | None => {}
        }
        if let Some(graph) = self.graph {
            cfg.graph_kind = match graph {
                GraphChoice::Knn => GraphKind::Knn,
                GraphChoice::Spatial => GraphKind::SpatialRadius,
            };
        }
        if self.untied {
            cfg.tying = Tying::Untied;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a config file; the flag reports whether it sets `seed`.
fn read_config_file(path: &Path) -> CliResult<(TrainConfig, bool)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let usage = |e: toml::de::Error| CliError::Usage(format!("config file {}: {e}", path.display()));
    let table: toml::Table = toml::from_str(&text).map_err(usage)?;
    let cfg: TrainConfig = toml::from_str(&text).map_err(usage)?;
    Ok((cfg, table.contains_key("seed")))
}

/// The seed from `STPROT_SEED`, if set.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

/// Flag, then `STPROT_SEED`, then zero.
pub fn seed_or_env(flag: Option<u64>) -> CliResult<u64> {
    match flag {
        Some(s) => Ok(s),
        None => Ok(env_seed()?.unwrap_or(0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        std::fs::write(&path, "lr = 0.01\nepochs = 50\nhidden = [8, 4]\n").unwrap();
        let args = TrainArgs {
            config: Some(path),
            epochs: Some(7),
            ..TrainArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.hidden, (8, 4));
        assert_eq!(cfg.weight_decay, TrainConfig::default().weight_decay);
    }

    #[test]
    fn ablation_flags() {
        let args = TrainArgs {
            loss: Some(LossMode::RnaOnly),
            graph: Some(GraphChoice::Spatial),
            radius: Some(2.0),
            untied: true,
            ..TrainArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.beta2_loss, 0.0);
        assert_eq!(cfg.beta1_loss, 5.0);
        assert_eq!(cfg.graph_kind, GraphKind::SpatialRadius);
        assert_eq!(cfg.tying, Tying::Untied);
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "learning_rate = 1\n").unwrap();
        let err = TrainArgs {
            config: Some(path),
            ..TrainArgs::default()
        }
        .resolve()
        .unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_USAGE);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let err = TrainArgs {
            lr: Some(-1.0),
            ..TrainArgs::default()
        }
        .resolve()
        .unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_USAGE);
    }
}
