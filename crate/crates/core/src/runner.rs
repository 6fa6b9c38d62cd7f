//! File-level drivers behind the CLI subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, parse_run_config, with_seed, RunConfig, SEED_ENV};
use crate::error::{Error, Result};
use crate::metrics::{loss_surface_grid, read_metrics_csv, write_metrics_csv, write_surface_csv, RoundMetrics};
use crate::orchestrator::{build_federation, read_checkpoint, write_checkpoint, Divergence, Experiment};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const SURFACE_FILE: &str = "surface.csv";
pub const PARTITION_FILE: &str = "partition.csv";
pub const EST_ERROR_FILE: &str = "est_error.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub algorithm: String,
    pub seed: u64,
    pub created_unix: u64,
    pub rounds_completed: usize,
    /// Round whose update diverged, if the run stopped early.
    pub diverged_at: Option<usize>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn artifact(&self, role: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.role == role)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub divergence: Option<Divergence>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Config text with the `FEDSIM_SEED` override applied, if set.
pub fn load_config_text(path: &Path) -> Result<String> {
    let text = read_text(path)?;
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            with_seed(&text, seed)
        }
        Err(_) => Ok(text),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&load_config_text(path)?)
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Runs one config into `out_dir`. A diverged run still writes its partial
/// metrics and manifest; the divergence is returned in the report.
pub fn run_config_file(config_path: &Path, out_dir: &Path) -> Result<RunReport> {
    let text = load_config_text(config_path)?;
    let hash = config_hash(&text)?;
    let cfg = parse_run_config(&text)?;
    run_config(&cfg, &hash, out_dir)
}

pub fn run_config(cfg: &RunConfig, hash: &str, out_dir: &Path) -> Result<RunReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let exp_cfg = &cfg.experiment;
    let fed = build_federation(exp_cfg)?;
    let mut artifacts = Vec::new();

    if cfg.output.partition_dump {
        let path = out_dir.join(PARTITION_FILE);
        write_with(&path, |w| fed.partition.write_csv(w))?;
        artifacts.push(Artifact {
            file: PARTITION_FILE.into(),
            role: "partition".into(),
        });
    }

    let mut exp = Experiment::with_federation(exp_cfg.clone(), fed)?;
    let mut divergence = None;
    while exp.server().round < exp_cfg.rounds {
        match exp.step() {
            Ok(()) => {}
            Err(Error::Diverged { round, reason }) => {
                divergence = Some(Divergence { round, reason });
                break;
            }
            Err(e) => return Err(e),
        }
        let r = exp.server().round;
        let every = cfg.output.checkpoint_every;
        if every > 0 && r % every == 0 && r < exp_cfg.rounds {
            let name = format!("round_{r:06}.ckpt");
            write_with(&out_dir.join(&name), |w| write_checkpoint(r, &exp.server().w, w))?;
            artifacts.push(Artifact {
                file: name,
                role: "checkpoint".into(),
            });
        }
    }

    write_with(&out_dir.join(METRICS_FILE), |w| write_metrics_csv(exp.metrics(), w))?;
    artifacts.push(Artifact {
        file: METRICS_FILE.into(),
        role: "metrics".into(),
    });
    write_with(&out_dir.join(EST_ERROR_FILE), |w| write_est_error_csv(exp.metrics(), w))?;
    artifacts.push(Artifact {
        file: EST_ERROR_FILE.into(),
        role: "estimation_error".into(),
    });

    if divergence.is_none() {
        let server = exp.server();
        write_with(&out_dir.join(FINAL_CHECKPOINT_FILE), |w| {
            write_checkpoint(server.round, &server.w, w)
        })?;
        artifacts.push(Artifact {
            file: FINAL_CHECKPOINT_FILE.into(),
            role: "final_checkpoint".into(),
        });
        if cfg.output.surface_resolution > 0 {
            let grid = loss_surface_grid(
                &exp_cfg.model_spec(),
                &server.w,
                &exp.federation().train_full,
                cfg.output.surface_resolution,
                cfg.output.surface_extent,
                exp_cfg.seed,
            )?;
            write_with(&out_dir.join(SURFACE_FILE), |w| write_surface_csv(&grid, w))?;
            artifacts.push(Artifact {
                file: SURFACE_FILE.into(),
                role: "surface".into(),
            });
        }
    }

    let manifest = Manifest {
        config_hash: hash.to_string(),
        algorithm: exp_cfg.algorithm.to_string(),
        seed: exp_cfg.seed,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        rounds_completed: exp.server().round,
        diverged_at: divergence.as_ref().map(|d| d.round),
        artifacts,
    };
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        manifest,
        divergence,
    })
}

/// Squared estimation error next to its square root, for plotting.
pub fn write_est_error_csv<W: Write>(rows: &[RoundMetrics], mut out: W) -> std::io::Result<()> {
    writeln!(out, "round,est_error,est_error_norm")?;
    for m in rows {
        match m.est_error {
            Some(e) => writeln!(out, "{},{},{}", m.round, e, e.sqrt())?,
            None => writeln!(out, "{},,", m.round)?,
        }
    }
    Ok(())
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Runs every config matching `pattern` in parallel, each into
/// `out_dir/<config file stem>`. Reports come back sorted by stem.
pub fn sweep(pattern: &str, out_dir: &Path) -> Result<Vec<RunReport>> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::config("sweep pattern", e.to_string()))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::config("sweep pattern", e.to_string()))?;
    if paths.is_empty() {
        return Err(Error::config("sweep pattern", format!("`{pattern}` matched no files")));
    }
    let mut jobs: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in paths {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::config("sweep pattern", format!("{} has no file stem", p.display())))?;
        if let Some(prev) = jobs.insert(stem.clone(), p.clone()) {
            return Err(Error::config(
                "sweep pattern",
                format!("{} and {} share the output name `{stem}`", prev.display(), p.display()),
            ));
        }
    }
    let jobs: Vec<(String, PathBuf)> = jobs.into_iter().collect();
    jobs.par_iter()
        .map(|(stem, path)| run_config_file(path, &out_dir.join(stem)))
        .collect()
}

fn load_run_metrics(manifest_path: &Path) -> Result<(Manifest, Vec<RoundMetrics>)> {
    let manifest = read_manifest(manifest_path)?;
    let file = manifest
        .artifact("metrics")
        .ok_or_else(|| Error::format(manifest_path, "manifest lists no metrics artifact"))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let path = dir.join(&file.file);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let rows = read_metrics_csv(BufReader::new(f), &path)?;
    Ok((manifest, rows))
}

type Column = fn(&RoundMetrics) -> Option<f64>;

const COMPARE_COLUMNS: [(&str, Column, bool); 6] = [
    ("train_loss", |m| m.train_loss, false),
    ("test_acc", |m| m.test_accuracy, true),
    ("grad_norm", |m| m.grad_norm, false),
    ("sharpness", |m| m.sharpness, false),
    ("pd", |m| m.pd, false),
    ("est_error", |m| m.est_error, false),
];

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_else(|| "-".into())
}

/// Side-by-side table of final and best values over the rounds every run
/// recorded. Best means lowest, except for accuracy.
pub fn compare(manifests: &[PathBuf]) -> Result<String> {
    if manifests.len() < 2 {
        return Err(Error::config("compare", "needs at least two manifests"));
    }
    let runs = manifests.iter().map(|p| load_run_metrics(p)).collect::<Result<Vec<_>>>()?;
    let mut common: Option<BTreeSet<usize>> = None;
    for (_, rows) in &runs {
        let rounds: BTreeSet<usize> = rows.iter().map(|m| m.round).collect();
        common = Some(match common {
            None => rounds,
            Some(c) => c.intersection(&rounds).copied().collect(),
        });
    }
    let common = common.unwrap_or_default();
    let last = *common
        .iter()
        .next_back()
        .ok_or_else(|| Error::config("compare", "the runs share no recorded round"))?;

    let labels: Vec<String> = manifests
        .iter()
        .zip(&runs)
        .map(|(p, (m, _))| {
            let dir = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            format!("{dir}:{}", m.algorithm)
        })
        .collect();

    let mut out = String::new();
    out.push_str(&format!("aligned final round: {last}\n"));
    out.push_str(&format!("{:<11} {:<6}", "metric", "stat"));
    for l in &labels {
        out.push_str(&format!(" {l:>18}"));
    }
    out.push('\n');
    for (name, get, higher_better) in COMPARE_COLUMNS {
        for stat in ["final", "best"] {
            out.push_str(&format!("{name:<11} {stat:<6}"));
            for (_, rows) in &runs {
                let aligned = rows.iter().filter(|m| common.contains(&m.round));
                let v = if stat == "final" {
                    rows.iter().find(|m| m.round == last).and_then(get)
                } else {
                    aligned.filter_map(get).fold(None, |acc: Option<f64>, x| match acc {
                        None => Some(x),
                        Some(a) if higher_better => Some(a.max(x)),
                        Some(a) => Some(a.min(x)),
                    })
                };
                out.push_str(&format!(" {:>18}", fmt_cell(v)));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Loss-surface grid around a saved checkpoint.
pub fn surface_from_checkpoint(checkpoint: &Path, config_path: &Path, out_csv: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let (_, w) = read_checkpoint(&read_text(checkpoint)?, checkpoint)?;
    let model = cfg.experiment.model_spec();
    w.check_len(model.param_count(), "checkpoint parameters")?;
    let fed = build_federation(&cfg.experiment)?;
    let resolution = if cfg.output.surface_resolution > 0 {
        cfg.output.surface_resolution
    } else {
        21
    };
    let grid = loss_surface_grid(
        &model,
        &w,
        &fed.train_full,
        resolution,
        cfg.output.surface_extent,
        cfg.experiment.seed,
    )?;
    write_with(out_csv, |w| write_surface_csv(&grid, w))
}

pub fn partition_dump(config_path: &Path, out_csv: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let fed = build_federation(&cfg.experiment)?;
    write_with(out_csv, |w| fed.partition.write_csv(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            config_hash: "ab".into(),
            algorithm: "fedavg".into(),
            seed: 1,
            created_unix: 5,
            rounds_completed: 3,
            diverged_at: None,
            artifacts: vec![Artifact {
                file: METRICS_FILE.into(),
                role: "metrics".into(),
            }],
        };
        let p = dir.path().join(MANIFEST_FILE);
        write_manifest(&m, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
    }
}
