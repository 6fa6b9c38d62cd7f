//! Server-side round loop.
//!
//! Each round: sample active clients, run their local rounds (in parallel,
//! reduced in ascending client order), aggregate, advance the server control
//! variate or dual, then record metrics when the cadence is due.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;

use crate::algorithms::{
    local_round, Algorithm, AlgorithmSpec, ClientState, CorrectionRule, LocalOutcome,
    LocalTrace,
};
use crate::data::{
    dirichlet_partition, epoch_batches, make_blobs, make_quadratic_family_with, pathological_partition, DataSource,
    LabeledDataset, Partition,
};
use crate::error::{Error, Result};
use crate::metrics::{
    estimation_error, global_sharpness, perturbation_drift, test_accuracy, virtual_global_perturbation,
    RoundMetrics,
};
use crate::model::{init_params, loss_and_gradient, Batch, ModelSpec};
use crate::params::{mean, ParamVector};
use crate::rng::{keyed_rng, TAG_SAMPLING};

/// Parameters beyond this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitConfig {
    Dirichlet { beta: f64 },
    Pathological { alpha: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataConfig {
    Blobs {
        n_classes: usize,
        samples_per_class: usize,
        test_per_class: usize,
        in_dim: usize,
        spread: f64,
        split: SplitConfig,
    },
    /// One quadratic objective per client.
    Quadratic {
        dim: usize,
        heterogeneity: f64,
        eig_min: f64,
        eig_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearSoftmax,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub model: ModelKind,
    pub data: DataConfig,
    pub n_clients: usize,
    pub active_ratio: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta_l: f64,
    pub eta_g: f64,
    pub rho: f64,
    pub beta: f64,
    pub lr_decay: f64,
    pub seed: u64,
    /// Metrics are recorded every this many rounds, plus the final round.
    pub metrics_every: usize,
    /// Radius of the sharpness probe, shared by all algorithms.
    pub probe_rho: f64,
}

impl ExperimentConfig {
    pub fn algorithm_spec(&self) -> Result<AlgorithmSpec> {
        self.algorithm.spec(self.rho, self.beta)
    }

    pub fn model_spec(&self) -> ModelSpec {
        match (self.data, self.model) {
            (DataConfig::Quadratic { dim, .. }, _) => ModelSpec::Quadratic { dim },
            (DataConfig::Blobs { n_classes, in_dim, .. }, ModelKind::LinearSoftmax) => {
                ModelSpec::LinearSoftmax { in_dim, n_classes }
            }
            (DataConfig::Blobs { n_classes, in_dim, .. }, ModelKind::Mlp { hidden }) => ModelSpec::Mlp {
                in_dim,
                hidden,
                n_classes,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be a finite positive number, got {v}")))
            }
        };
        if !(self.active_ratio > 0.0 && self.active_ratio <= 1.0) {
            return Err(Error::config("active_ratio", format!("must lie in (0, 1], got {}", self.active_ratio)));
        }
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.metrics_every == 0 {
            return Err(Error::config("metrics_every", "must be at least 1"));
        }
        positive("eta_l", self.eta_l)?;
        positive("eta_g", self.eta_g)?;
        positive("probe_rho", self.probe_rho)?;
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", format!("must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config("rho", format!("must be finite and >= 0, got {}", self.rho)));
        }
        if self.algorithm.uses_dyn() {
            positive("beta", self.beta)?;
        }
        match self.data {
            DataConfig::Quadratic {
                dim,
                heterogeneity,
                eig_min,
                eig_max,
            } => {
                if dim == 0 {
                    return Err(Error::config("data.dim", "must be at least 1"));
                }
                if !(heterogeneity >= 0.0 && heterogeneity.is_finite()) {
                    return Err(Error::config("data.heterogeneity", "must be finite and >= 0"));
                }
                positive("data.eig_min", eig_min)?;
                if !(eig_max >= eig_min && eig_max.is_finite()) {
                    return Err(Error::config("data.eig_max", "must be finite and >= data.eig_min"));
                }
            }
            DataConfig::Blobs {
                n_classes,
                samples_per_class,
                in_dim,
                spread,
                split,
                ..
            } => {
                if n_classes < 2 {
                    return Err(Error::config("data.n_classes", "must be at least 2"));
                }
                if samples_per_class == 0 {
                    return Err(Error::config("data.samples_per_class", "must be at least 1"));
                }
                if in_dim == 0 {
                    return Err(Error::config("data.in_dim", "must be at least 1"));
                }
                positive("data.spread", spread)?;
                match split {
                    SplitConfig::Dirichlet { beta } => positive("data.dirichlet_beta", beta)?,
                    SplitConfig::Pathological { alpha } => {
                        if alpha == 0 || alpha > n_classes {
                            return Err(Error::config(
                                "data.pathological_alpha",
                                format!("must lie in [1, {n_classes}], got {alpha}"),
                            ));
                        }
                    }
                }
                if let ModelKind::Mlp { hidden: 0 } = self.model {
                    return Err(Error::config("model.hidden", "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

/// Data, partition and evaluation batches materialized from a config.
#[derive(Debug, Clone)]
pub struct Federation {
    pub source: DataSource,
    pub partition: Partition,
    pub train_full: Batch,
    pub test: Option<Batch>,
    /// Labels of the training set, when the data is labeled.
    pub train_labels: Option<Vec<usize>>,
}

pub fn build_federation(config: &ExperimentConfig) -> Result<Federation> {
    config.validate()?;
    match config.data {
        DataConfig::Quadratic {
            dim,
            heterogeneity,
            eig_min,
            eig_max,
        } => {
            let problem = make_quadratic_family_with(config.n_clients, dim, heterogeneity, (eig_min, eig_max), config.seed)?;
            let source = DataSource::Quadratic(Arc::new(problem));
            Ok(Federation {
                train_full: source.full_batch(),
                partition: Partition {
                    assignments: (0..config.n_clients).map(|i| vec![i]).collect(),
                },
                source,
                test: None,
                train_labels: None,
            })
        }
        DataConfig::Blobs {
            n_classes,
            samples_per_class,
            test_per_class,
            in_dim,
            spread,
            split,
        } => {
            let all = make_blobs(n_classes, samples_per_class + test_per_class, in_dim, spread, config.seed)?;
            let (train, test): (LabeledDataset, Option<LabeledDataset>) = if test_per_class > 0 {
                let (a, b) = all.split_per_class(test_per_class)?;
                (a, Some(b))
            } else {
                (all, None)
            };
            let partition = match split {
                SplitConfig::Dirichlet { beta } => dirichlet_partition(&train.labels, config.n_clients, beta, config.seed)?,
                SplitConfig::Pathological { alpha } => {
                    pathological_partition(&train.labels, config.n_clients, alpha, config.seed)?
                }
            };
            Ok(Federation {
                train_full: train.full_batch(),
                test: test.map(|t| t.full_batch()),
                train_labels: Some(train.labels.clone()),
                partition,
                source: DataSource::Labeled(train),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w: ParamVector,
    /// Scaffold server control `C`.
    pub control: ParamVector,
    /// Dynamic-regularizer server dual `λ`.
    pub dual: ParamVector,
    pub round: usize,
    pub clients: Vec<ClientState>,
}

/// `K = max(1, round(active_ratio · n))` distinct ids, uniform without
/// replacement from an RNG keyed by `(seed, round)`, sorted ascending.
pub fn sample_active_clients(n_clients: usize, active_ratio: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = ((active_ratio * n_clients as f64).round() as usize).clamp(1, n_clients.max(1));
    let mut rng = keyed_rng(seed, &[TAG_SAMPLING, round as u64]);
    let mut ids = index::sample(&mut rng, n_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// `w_t - η_g · mean_i (w_t - w_i)`.
pub fn aggregate(w_t: &ParamVector, locals: &[ParamVector], eta_g: f64) -> Result<ParamVector> {
    if locals.is_empty() {
        return Err(Error::contract("cannot aggregate zero local models"));
    }
    for l in locals {
        l.check_len(w_t.len(), "local model")?;
    }
    let deltas: Vec<ParamVector> = locals.iter().map(|l| w_t.sub(l)).collect();
    let mut w = w_t.clone();
    w.axpy(-eta_g, &mean(&deltas)?);
    Ok(w)
}

/// `C + (1/N) Σ ΔC_i` over the active clients' control-variate changes.
pub fn server_control_update(control: &ParamVector, delta_controls: &[ParamVector], n_clients: usize) -> Result<ParamVector> {
    if n_clients == 0 {
        return Err(Error::contract("n_clients must be at least 1"));
    }
    let mut c = control.clone();
    for d in delta_controls {
        d.check_len(c.len(), "control delta")?;
        c.axpy(1.0 / n_clients as f64, d);
    }
    Ok(c)
}

/// `λ - (1/(βK)) Σ_i (w_i - w_t)` over the K active clients.
pub fn server_dual_update(dual: &ParamVector, w_t: &ParamVector, locals: &[ParamVector], beta: f64) -> Result<ParamVector> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::contract(format!("beta must be positive, got {beta}")));
    }
    if locals.is_empty() {
        return Ok(dual.clone());
    }
    let k = locals.len() as f64;
    let mut out = dual.clone();
    for l in locals {
        l.check_len(w_t.len(), "local model")?;
        out.axpy(-1.0 / (beta * k), &l.sub(w_t));
    }
    Ok(out)
}

/// `η_l · decay^round`.
pub fn lr_schedule(eta_l_initial: f64, decay: f64, round: usize) -> f64 {
    eta_l_initial * decay.powi(round as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// Zero-based index of the training round that produced the bad model.
    pub round: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: ParamVector,
    pub rounds_completed: usize,
    /// Gradient evaluations summed over every client step of the run.
    pub grad_evals: usize,
    /// Local steps summed over every client of every round.
    pub local_steps: usize,
    pub divergence: Option<Divergence>,
}

/// A running federation. [`Experiment::step`] advances one round;
/// [`Experiment::step_with_clients`] forces the participating set.
#[derive(Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    algo: AlgorithmSpec,
    model: ModelSpec,
    fed: Federation,
    server: ServerState,
    metrics: Vec<RoundMetrics>,
    grad_evals: usize,
    local_steps: usize,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let fed = build_federation(&config)?;
        Self::with_federation(config, fed)
    }

    pub fn with_federation(config: ExperimentConfig, fed: Federation) -> Result<Self> {
        config.validate()?;
        let algo = config.algorithm_spec()?;
        let model = config.model_spec();
        if fed.partition.n_clients() != config.n_clients {
            return Err(Error::contract(format!(
                "partition has {} clients, config expects {}",
                fed.partition.n_clients(),
                config.n_clients
            )));
        }
        let p = model.param_count();
        let server = ServerState {
            w: init_params(&model, config.seed),
            control: ParamVector::zeros(p),
            dual: ParamVector::zeros(p),
            round: 0,
            clients: vec![ClientState::zeros(p); config.n_clients],
        };
        let mut exp = Experiment {
            config,
            algo,
            model,
            fed,
            server,
            metrics: Vec::new(),
            grad_evals: 0,
            local_steps: 0,
        };
        let row = exp.measure(0, None, None)?;
        exp.metrics.push(row);
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn federation(&self) -> &Federation {
        &self.fed
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn grad_evals(&self) -> usize {
        self.grad_evals
    }

    pub fn local_steps(&self) -> usize {
        self.local_steps
    }

    fn metrics_due(&self, round: usize) -> bool {
        round.is_multiple_of(self.config.metrics_every) || round == self.config.rounds
    }

    pub fn step(&mut self) -> Result<()> {
        let active = sample_active_clients(
            self.config.n_clients,
            self.config.active_ratio,
            self.server.round,
            self.config.seed,
        );
        self.step_with_clients(&active)
    }

    fn client_batches(&self, client: usize, round: usize) -> Result<Vec<Batch>> {
        let mut batches = Vec::new();
        for epoch in 0..self.config.local_epochs {
            batches.extend(epoch_batches(
                &self.fed.source,
                &self.fed.partition,
                client,
                self.config.batch_size,
                self.config.seed,
                round,
                epoch,
            )?);
        }
        Ok(batches)
    }

    /// Runs one round with exactly the given clients (sorted, deduplicated).
    pub fn step_with_clients(&mut self, active: &[usize]) -> Result<()> {
        let mut active = active.to_vec();
        active.sort_unstable();
        active.dedup();
        if active.is_empty() {
            return Err(Error::contract("a round needs at least one active client"));
        }
        if let Some(&bad) = active.iter().find(|&&i| i >= self.config.n_clients) {
            return Err(Error::contract(format!("unknown client {bad}")));
        }
        let t = self.server.round;
        let eta_l = lr_schedule(self.config.eta_l, self.config.lr_decay, t);
        let record_pd = self.metrics_due(t + 1) && self.algo.perturbation.is_active();

        let w_t = &self.server.w;
        let results: Vec<Result<(LocalOutcome, Option<LocalTrace>, usize)>> = active
            .par_iter()
            .map(|&i| {
                let batches = self.client_batches(i, t)?;
                let mut trace = record_pd.then(LocalTrace::default);
                let out = local_round(
                    &self.algo,
                    &self.model,
                    w_t,
                    &self.server.clients[i],
                    &self.server.control,
                    &batches,
                    eta_l,
                    trace.as_mut(),
                )?;
                Ok((out, trace, batches.len()))
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        self.local_steps += results.iter().map(|(_, _, n)| n).sum::<usize>();
        let results: Vec<(LocalOutcome, Option<LocalTrace>)> = results.into_iter().map(|(o, t, _)| (o, t)).collect();

        let locals: Vec<ParamVector> = results.iter().map(|(o, _)| o.w_final.clone()).collect();
        let w_next = aggregate(w_t, &locals, self.config.eta_g)?;
        let pd = if record_pd {
            Some(self.drift(&active, &results)?)
        } else {
            None
        };

        match self.algo.correction {
            CorrectionRule::NoCorrection => {}
            CorrectionRule::ScaffoldVr => {
                let deltas: Vec<ParamVector> = active
                    .iter()
                    .zip(&results)
                    .map(|(&i, (o, _))| o.state.control.sub(&self.server.clients[i].control))
                    .collect();
                self.server.control = server_control_update(&self.server.control, &deltas, self.config.n_clients)?;
            }
            CorrectionRule::DynRegularizer { beta } => {
                self.server.dual = server_dual_update(&self.server.dual, w_t, &locals, beta)?;
            }
        }

        self.grad_evals += results.iter().map(|(o, _)| o.grad_evals).sum::<usize>();
        for (&i, (o, _)) in active.iter().zip(results) {
            self.server.clients[i] = o.state;
        }

        if !w_next.is_finite() || w_next.max_abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                round: t,
                reason: format!(
                    "global model left the finite range (max |w| = {:e})",
                    w_next.max_abs()
                ),
            });
        }
        let w_prev = std::mem::replace(&mut self.server.w, w_next);
        self.server.round = t + 1;
        if self.metrics_due(t + 1) {
            let row = self.measure(t + 1, Some(&w_prev), pd)?;
            self.metrics.push(row);
        }
        Ok(())
    }

    fn drift(&self, active: &[usize], results: &[(LocalOutcome, Option<LocalTrace>)]) -> Result<f64> {
        let traces: Vec<&LocalTrace> = results
            .iter()
            .map(|(_, t)| t.as_ref().expect("traces recorded for this round"))
            .collect();
        let steps = traces.iter().map(|t| t.iterates.len()).max().unwrap_or(0);
        let mut global = Vec::with_capacity(steps);
        for k in 0..steps {
            let models: Vec<ParamVector> = traces
                .iter()
                .zip(results)
                .map(|(t, (o, _))| t.iterates.get(k).cloned().unwrap_or_else(|| o.w_final.clone()))
                .collect();
            global.push(virtual_global_perturbation(
                &self.model,
                &self.server.w,
                &models,
                self.config.eta_g,
                &self.fed.train_full,
                1.0,
            )?);
        }
        debug_assert_eq!(active.len(), traces.len());
        let locals: Vec<Vec<ParamVector>> = traces.iter().map(|t| t.unit_perturbations.clone()).collect();
        perturbation_drift(&global, &locals)
    }

    fn measure(&self, round: usize, w_prev: Option<&ParamVector>, pd: Option<f64>) -> Result<RoundMetrics> {
        let w = &self.server.w;
        let (loss, grad) = loss_and_gradient(&self.model, w, &self.fed.train_full)?;
        let test_acc = match &self.fed.test {
            Some(t) => Some(test_accuracy(&self.model, w, t)?),
            None => None,
        };
        let est_error = match w_prev {
            Some(prev) => estimation_error(prev, w, &self.model, &self.fed.train_full)?,
            None => None,
        };
        Ok(RoundMetrics {
            round,
            train_loss: Some(loss),
            test_accuracy: test_acc,
            grad_norm: Some(grad.norm()),
            sharpness: Some(global_sharpness(&self.model, w, &self.fed.train_full, self.config.probe_rho)?),
            pd,
            est_error,
            eta_l: lr_schedule(self.config.eta_l, self.config.lr_decay, round),
        })
    }

    /// Runs the remaining rounds. Divergence stops the loop and is reported
    /// in the output alongside the metrics gathered so far.
    pub fn run(mut self) -> Result<RunOutput> {
        let mut divergence = None;
        while self.server.round < self.config.rounds {
            match self.step() {
                Ok(()) => {}
                Err(Error::Diverged { round, reason }) => {
                    divergence = Some(Divergence { round, reason });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(RunOutput {
            rounds_completed: self.server.round,
            final_params: self.server.w,
            metrics: self.metrics,
            grad_evals: self.grad_evals,
            local_steps: self.local_steps,
            divergence,
        })
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    Experiment::new(config.clone())?.run()
}

/// Writes `round=<t>` followed by the parameters at 17 significant digits.
pub fn write_checkpoint<W: Write>(round: usize, params: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "round={round}")?;
    let values: Vec<String> = params.iter().map(|v| format!("{v:.16e}")).collect();
    writeln!(out, "{}", values.join(" "))
}

pub fn read_checkpoint(text: &str, origin: &Path) -> Result<(usize, ParamVector)> {
    let mut lines = text.lines();
    let round = lines
        .next()
        .and_then(|l| l.trim().strip_prefix("round="))
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::format(origin, "first line must be `round=<t>`"))?;
    let values = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| Error::format(origin, format!("`{s}` is not a number"))))
        .collect::<Result<Vec<f64>>>()?;
    Ok((round, ParamVector::new(values)))
}
