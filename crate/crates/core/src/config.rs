//! Experiment config files (TOML).
//!
//! Every key is either consumed or rejected. Unset keys take the defaults
//! below, which follow the usual CIFAR-10 federated SAM protocol scaled to
//! synthetic data: 100 clients, 10% participation, 5 local epochs, batch 50,
//! `eta_l = 0.1` decayed by `0.998` per round, `eta_g = 1`, `rho = 0.01` for
//! FedSAM/FedLESAM and `0.1` for the variance-reduced variants.

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::algorithms::Algorithm;
use crate::data::DEFAULT_EIGEN_RANGE;
use crate::error::{Error, Result};
use crate::orchestrator::{DataConfig, ExperimentConfig, ModelKind, SplitConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    algorithm: String,
    rounds: Option<usize>,
    n_clients: Option<usize>,
    active_ratio: Option<f64>,
    local_epochs: Option<usize>,
    batch_size: Option<usize>,
    eta_l: Option<f64>,
    eta_g: Option<f64>,
    rho: Option<f64>,
    beta: Option<f64>,
    lr_decay: Option<f64>,
    seed: Option<u64>,
    metrics_every: Option<usize>,
    probe_rho: Option<f64>,
    model: Option<RawModel>,
    data: RawData,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: String,
    hidden: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    kind: String,
    // blobs
    n_classes: Option<usize>,
    samples_per_class: Option<usize>,
    test_per_class: Option<usize>,
    in_dim: Option<usize>,
    spread: Option<f64>,
    split: Option<String>,
    dirichlet_beta: Option<f64>,
    pathological_alpha: Option<usize>,
    // quadratic
    dim: Option<usize>,
    heterogeneity: Option<f64>,
    eig_min: Option<f64>,
    eig_max: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    surface_resolution: Option<usize>,
    surface_extent: Option<f64>,
    partition_dump: Option<bool>,
    checkpoint_every: Option<usize>,
}

/// Artifact switches for a CLI run.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputOptions {
    /// Odd grid resolution for the final-model loss surface; 0 disables it.
    pub surface_resolution: usize,
    pub surface_extent: f64,
    pub partition_dump: bool,
    /// Save a checkpoint every this many rounds (0: final round only).
    pub checkpoint_every: usize,
}

impl Default for OutputOptions {
    fn default() -> Self {
        OutputOptions {
            surface_resolution: 0,
            surface_extent: 1.0,
            partition_dump: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub output: OutputOptions,
}

pub const SEED_ENV: &str = "FEDSIM_SEED";

fn reject_if_set<T>(value: &Option<T>, key: &str, kind: &str) -> Result<()> {
    if value.is_some() {
        return Err(Error::config(key, format!("not used by data kind `{kind}`")));
    }
    Ok(())
}

/// Parses and validates an experiment config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    Ok(parse_run_config(text)?.experiment)
}

/// Parses an experiment config together with its `[output]` section.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
    let algorithm: Algorithm = raw
        .algorithm
        .parse()
        .map_err(|msg: String| Error::config("algorithm", msg))?;

    let data = match raw.data.kind.as_str() {
        "quadratic" => {
            let d = &raw.data;
            for (v, k) in [
                (d.n_classes.is_some(), "data.n_classes"),
                (d.samples_per_class.is_some(), "data.samples_per_class"),
                (d.test_per_class.is_some(), "data.test_per_class"),
                (d.in_dim.is_some(), "data.in_dim"),
                (d.spread.is_some(), "data.spread"),
                (d.split.is_some(), "data.split"),
                (d.dirichlet_beta.is_some(), "data.dirichlet_beta"),
                (d.pathological_alpha.is_some(), "data.pathological_alpha"),
            ] {
                reject_if_set(&v.then_some(()), k, "quadratic")?;
            }
            if raw.model.is_some() {
                return Err(Error::config("model", "the quadratic family has no trainable architecture"));
            }
            DataConfig::Quadratic {
                dim: d.dim.unwrap_or(10),
                heterogeneity: d.heterogeneity.unwrap_or(1.0),
                eig_min: d.eig_min.unwrap_or(DEFAULT_EIGEN_RANGE.0),
                eig_max: d.eig_max.unwrap_or(DEFAULT_EIGEN_RANGE.1),
            }
        }
        "blobs" => {
            let d = &raw.data;
            reject_if_set(&d.dim, "data.dim", "blobs")?;
            reject_if_set(&d.heterogeneity, "data.heterogeneity", "blobs")?;
            reject_if_set(&d.eig_min, "data.eig_min", "blobs")?;
            reject_if_set(&d.eig_max, "data.eig_max", "blobs")?;
            let split = match d.split.as_deref().unwrap_or("dirichlet") {
                "dirichlet" => {
                    reject_if_set(&d.pathological_alpha, "data.pathological_alpha", "blobs/dirichlet")?;
                    SplitConfig::Dirichlet {
                        beta: d.dirichlet_beta.unwrap_or(0.1),
                    }
                }
                "pathological" => {
                    reject_if_set(&d.dirichlet_beta, "data.dirichlet_beta", "blobs/pathological")?;
                    SplitConfig::Pathological {
                        alpha: d.pathological_alpha.unwrap_or(2),
                    }
                }
                other => {
                    return Err(Error::config(
                        "data.split",
                        format!("unknown split `{other}`; expected `dirichlet` or `pathological`"),
                    ))
                }
            };
            DataConfig::Blobs {
                n_classes: d.n_classes.unwrap_or(10),
                samples_per_class: d.samples_per_class.unwrap_or(100),
                test_per_class: d.test_per_class.unwrap_or(20),
                in_dim: d.in_dim.unwrap_or(2),
                spread: d.spread.unwrap_or(1.0),
                split,
            }
        }
        other => {
            return Err(Error::config(
                "data.kind",
                format!("unknown data kind `{other}`; expected `blobs` or `quadratic`"),
            ))
        }
    };

    let model = match &raw.model {
        None => ModelKind::Mlp { hidden: 8 },
        Some(m) => match m.kind.as_str() {
            "mlp" => ModelKind::Mlp {
                hidden: m.hidden.unwrap_or(8),
            },
            "linear_softmax" => {
                reject_if_set(&m.hidden, "model.hidden", "linear_softmax")?;
                ModelKind::LinearSoftmax
            }
            other => {
                return Err(Error::config(
                    "model.kind",
                    format!("unknown model `{other}`; expected `mlp` or `linear_softmax`"),
                ))
            }
        },
    };

    if !algorithm.uses_dyn() && raw.beta.is_some() {
        return Err(Error::config("beta", format!("not used by `{algorithm}`")));
    }
    if !algorithm.uses_perturbation() && raw.rho.is_some() {
        return Err(Error::config("rho", format!("not used by `{algorithm}`")));
    }

    let experiment = ExperimentConfig {
        algorithm,
        model,
        data,
        n_clients: raw.n_clients.unwrap_or(100),
        active_ratio: raw.active_ratio.unwrap_or(0.1),
        rounds: raw.rounds.unwrap_or(800),
        local_epochs: raw.local_epochs.unwrap_or(5),
        batch_size: raw.batch_size.unwrap_or(50),
        eta_l: raw.eta_l.unwrap_or(0.1),
        eta_g: raw.eta_g.unwrap_or(1.0),
        rho: raw.rho.unwrap_or_else(|| algorithm.default_rho()),
        beta: raw.beta.unwrap_or(10.0),
        lr_decay: raw.lr_decay.unwrap_or(0.998),
        seed: raw.seed.unwrap_or(0),
        metrics_every: raw.metrics_every.unwrap_or(1),
        probe_rho: raw.probe_rho.unwrap_or(0.05),
    };
    experiment.validate()?;

    let o = raw.output.unwrap_or_default();
    let defaults = OutputOptions::default();
    let output = OutputOptions {
        surface_resolution: o.surface_resolution.unwrap_or(defaults.surface_resolution),
        surface_extent: o.surface_extent.unwrap_or(defaults.surface_extent),
        partition_dump: o.partition_dump.unwrap_or(defaults.partition_dump),
        checkpoint_every: o.checkpoint_every.unwrap_or(defaults.checkpoint_every),
    };
    if output.surface_resolution > 0 && output.surface_resolution.is_multiple_of(2) {
        return Err(Error::config("output.surface_resolution", "must be odd (or 0 to disable)"));
    }
    if !(output.surface_extent > 0.0 && output.surface_extent.is_finite()) {
        return Err(Error::config("output.surface_extent", "must be a finite positive number"));
    }
    Ok(RunConfig { experiment, output })
}

/// Keys sorted, whitespace normalized: the text that gets hashed.
pub fn canonicalize(text: &str) -> Result<String> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
    toml::to_string(&table).map_err(|e| Error::ConfigSyntax(e.to_string()))
}

/// Replaces (or inserts) the top-level `seed` key.
pub fn with_seed(text: &str, seed: u64) -> Result<String> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
    let seed = i64::try_from(seed).map_err(|_| Error::config("seed", "override does not fit a TOML integer"))?;
    table.insert("seed".into(), toml::Value::Integer(seed));
    toml::to_string(&table).map_err(|e| Error::ConfigSyntax(e.to_string()))
}

/// Hex SHA-256 of the canonical form.
pub fn config_hash(text: &str) -> Result<String> {
    let canonical = canonicalize(text)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "algorithm = \"fedlesam\"\n[data]\nkind = \"blobs\"\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.algorithm, Algorithm::FedLesam);
        assert_eq!(c.eta_g, 1.0);
        assert_eq!(c.lr_decay, 0.998);
        assert_eq!(c.rho, 0.01);
        assert_eq!(c.model, ModelKind::Mlp { hidden: 8 });
        let s = parse_config("algorithm = \"fedlesam-s\"\n[data]\nkind = \"quadratic\"\n").unwrap();
        assert_eq!(s.rho, 0.1);
        assert!(matches!(s.data, DataConfig::Quadratic { dim: 10, .. }));
    }

    #[test]
    fn rejections_name_the_key() {
        let err = parse_config(&format!("active_ratio = 0.0\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("active_ratio"), "{err}");
        let err = parse_config(&format!("bogus_key = 1\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = parse_config(&format!("eta_l = \"fast\"\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("eta_l"), "{err}");
        let err = parse_config("algorithm = \"fedsmoo\"\n[data]\nkind = \"blobs\"\n").unwrap_err();
        assert!(err.to_string().contains("algorithm") && err.to_string().contains("README"), "{err}");
        let err = parse_config("algorithm = \"fedavg\"\nrho = 0.1\n[data]\nkind = \"blobs\"\n").unwrap_err();
        assert!(err.to_string().contains("rho"), "{err}");
        let err = parse_config("algorithm = \"fedavg\"\n[data]\nkind = \"quadratic\"\nspread = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("data.spread"), "{err}");
    }

    #[test]
    fn hash_ignores_layout_and_key_order() {
        let a = "algorithm = \"fedavg\"\nseed = 3\n[data]\nkind = \"blobs\"\n";
        let b = "seed=3\n\n   algorithm=\"fedavg\"\n[data]\n  kind = \"blobs\"";
        assert_eq!(config_hash(a).unwrap(), config_hash(b).unwrap());
        assert_ne!(config_hash(a).unwrap(), config_hash(&with_seed(a, 4).unwrap()).unwrap());
        assert_eq!(config_hash(a).unwrap().len(), 64);
    }
}
