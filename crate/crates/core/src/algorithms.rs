//! Client-side local training for the FedAvg/SAM family.
//!
//! Every algorithm is a pairing of a [`PerturbationRule`] (where the SAM
//! ascent step points, if anywhere) with a [`CorrectionRule`] (how the local
//! step is corrected for client drift). Eight pairings are named:
//!
//! | perturbation \ correction | none     | Scaffold   | dynamic reg. |
//! |---------------------------|----------|------------|--------------|
//! | none                      | FedAvg   | Scaffold   | FedDyn       |
//! | local gradient            | FedSAM   | FedGAMMA   |              |
//! | global estimate           | FedLESAM | FedLESAM-S | FedLESAM-D   |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{gradient, Batch, ModelSpec};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbationRule {
    NoPerturb,
    /// SAM ascent along the current mini-batch gradient.
    LocalGrad { rho: f64 },
    /// Ascent along `w_old - w_t`, the reversed global update since the
    /// client's previous active round. Constant within a round.
    GlobalEstimate { rho: f64 },
}

impl PerturbationRule {
    pub fn rho(&self) -> f64 {
        match *self {
            PerturbationRule::NoPerturb => 0.0,
            PerturbationRule::LocalGrad { rho } | PerturbationRule::GlobalEstimate { rho } => rho,
        }
    }

    /// True when the rule actually displaces the gradient evaluation point.
    pub fn is_active(&self) -> bool {
        self.rho() > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrectionRule {
    NoCorrection,
    /// Control-variate correction `+η_l (C - C_i)`.
    ScaffoldVr,
    /// Linear dual term plus proximal pull toward the received model.
    DynRegularizer { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    FedAvg,
    FedSam,
    FedLesam,
    Scaffold,
    FedGamma,
    FedLesamS,
    FedDyn,
    FedLesamD,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::FedAvg,
        Algorithm::FedSam,
        Algorithm::FedLesam,
        Algorithm::Scaffold,
        Algorithm::FedGamma,
        Algorithm::FedLesamS,
        Algorithm::FedDyn,
        Algorithm::FedLesamD,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedSam => "fedsam",
            Algorithm::FedLesam => "fedlesam",
            Algorithm::Scaffold => "scaffold",
            Algorithm::FedGamma => "fedgamma",
            Algorithm::FedLesamS => "fedlesam-s",
            Algorithm::FedDyn => "feddyn",
            Algorithm::FedLesamD => "fedlesam-d",
        }
    }

    /// Builds the rule pairing. `rho` is ignored by algorithms without a
    /// perturbation and `beta` by algorithms without the dynamic regularizer.
    pub fn spec(&self, rho: f64, beta: f64) -> Result<AlgorithmSpec> {
        use CorrectionRule::*;
        use PerturbationRule::*;
        let (p, c) = match self {
            Algorithm::FedAvg => (NoPerturb, NoCorrection),
            Algorithm::FedSam => (LocalGrad { rho }, NoCorrection),
            Algorithm::FedLesam => (GlobalEstimate { rho }, NoCorrection),
            Algorithm::Scaffold => (NoPerturb, ScaffoldVr),
            Algorithm::FedGamma => (LocalGrad { rho }, ScaffoldVr),
            Algorithm::FedLesamS => (GlobalEstimate { rho }, ScaffoldVr),
            Algorithm::FedDyn => (NoPerturb, DynRegularizer { beta }),
            Algorithm::FedLesamD => (GlobalEstimate { rho }, DynRegularizer { beta }),
        };
        AlgorithmSpec::new(p, c)
    }

    pub fn uses_perturbation(&self) -> bool {
        !matches!(self, Algorithm::FedAvg | Algorithm::Scaffold | Algorithm::FedDyn)
    }

    pub fn uses_dyn(&self) -> bool {
        matches!(self, Algorithm::FedDyn | Algorithm::FedLesamD)
    }

    /// Variance-reduced variants default to a larger perturbation radius
    /// than plain FedSAM/FedLESAM.
    pub fn default_rho(&self) -> f64 {
        match self {
            Algorithm::FedGamma | Algorithm::FedLesamS | Algorithm::FedLesamD => 0.1,
            Algorithm::FedSam | Algorithm::FedLesam => 0.01,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        if let Some(a) = Algorithm::ALL.iter().find(|a| a.name() == lower) {
            return Ok(*a);
        }
        let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
        Err(match lower.as_str() {
            "fedsmoo" | "mofedsam" | "fedcm" | "fedadam" => format!(
                "`{s}` is not supported: its update rules are outside this simulator \
                 (see README, \"Supported algorithms\"); choose one of {names:?}"
            ),
            _ => format!("unknown algorithm `{s}`; expected one of {names:?}"),
        })
    }
}

/// A validated perturbation × correction pairing naming one algorithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgorithmSpec {
    pub perturbation: PerturbationRule,
    pub correction: CorrectionRule,
}

impl AlgorithmSpec {
    pub fn new(perturbation: PerturbationRule, correction: CorrectionRule) -> Result<Self> {
        let rho = perturbation.rho();
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::contract(format!("rho must be finite and >= 0, got {rho}")));
        }
        if let CorrectionRule::DynRegularizer { beta } = correction {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::contract(format!("beta must be finite and > 0, got {beta}")));
            }
            if matches!(perturbation, PerturbationRule::LocalGrad { .. }) {
                return Err(Error::contract(
                    "local-gradient perturbation with the dynamic regularizer is not a named algorithm",
                ));
            }
        }
        Ok(AlgorithmSpec {
            perturbation,
            correction,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        use CorrectionRule::*;
        use PerturbationRule::*;
        match (self.perturbation, self.correction) {
            (NoPerturb, NoCorrection) => Algorithm::FedAvg,
            (LocalGrad { .. }, NoCorrection) => Algorithm::FedSam,
            (GlobalEstimate { .. }, NoCorrection) => Algorithm::FedLesam,
            (NoPerturb, ScaffoldVr) => Algorithm::Scaffold,
            (LocalGrad { .. }, ScaffoldVr) => Algorithm::FedGamma,
            (GlobalEstimate { .. }, ScaffoldVr) => Algorithm::FedLesamS,
            (NoPerturb, DynRegularizer { .. }) => Algorithm::FedDyn,
            (GlobalEstimate { .. }, DynRegularizer { .. }) => Algorithm::FedLesamD,
            (LocalGrad { .. }, DynRegularizer { .. }) => unreachable!("rejected by AlgorithmSpec::new"),
        }
    }
}

/// Gradient evaluations (backpropagations) per local step.
pub fn gradient_eval_count(spec: &AlgorithmSpec) -> usize {
    match spec.perturbation {
        PerturbationRule::LocalGrad { .. } => 2,
        _ => 1,
    }
}

/// Per-client federation state, owned by the server loop between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    /// Global model received at the client's previous active round.
    pub w_old: ParamVector,
    /// Scaffold control variate `C_i`.
    pub control: ParamVector,
    /// Dynamic-regularizer dual `λ_i`.
    pub dual: ParamVector,
}

impl ClientState {
    pub fn zeros(len: usize) -> Self {
        ClientState {
            w_old: ParamVector::zeros(len),
            control: ParamVector::zeros(len),
            dual: ParamVector::zeros(len),
        }
    }
}

/// `rho * grad / ‖grad‖`, or zeros when the gradient norm is degenerate.
pub fn local_perturbation(grad: &ParamVector, rho: f64) -> ParamVector {
    match grad.unit() {
        Some(u) if rho > 0.0 => u.scale(rho),
        _ => ParamVector::zeros(grad.len()),
    }
}

/// `rho * (w_old - w_t) / ‖w_old - w_t‖`, or zeros when the two coincide.
pub fn global_perturbation_estimate(w_old: &ParamVector, w_t: &ParamVector, rho: f64) -> Result<ParamVector> {
    w_old.check_len(w_t.len(), "w_old")?;
    Ok(local_perturbation(&w_old.sub(w_t), rho))
}

/// Iterates and perturbation directions captured during one local round.
#[derive(Debug, Clone, Default)]
pub struct LocalTrace {
    /// `w_{i,k}` for `k = 0..E`, the point at which step `k` starts.
    pub iterates: Vec<ParamVector>,
    /// Unit perturbation direction used at step `k` (zero vector when the
    /// norm was degenerate). Empty when the rule applies no perturbation.
    pub unit_perturbations: Vec<ParamVector>,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub w_final: ParamVector,
    pub state: ClientState,
    pub grad_evals: usize,
}

/// Runs `batches.len()` local steps from the received global model `w_t`.
///
/// Step `k` evaluates the batch gradient at `w_{i,k} + δ_{i,k}` (at `w_{i,k}`
/// when no perturbation applies), then adds the correction term. Afterwards
/// the client's control variate, dual and `w_old` are advanced according to
/// the algorithm.
#[allow(clippy::too_many_arguments)]
pub fn local_round(
    spec: &AlgorithmSpec,
    model: &ModelSpec,
    w_t: &ParamVector,
    state: &ClientState,
    server_control: &ParamVector,
    batches: &[Batch],
    eta_l: f64,
    mut trace: Option<&mut LocalTrace>,
) -> Result<LocalOutcome> {
    if !(eta_l > 0.0 && eta_l.is_finite()) {
        return Err(Error::contract(format!("eta_l must be positive, got {eta_l}")));
    }
    if batches.is_empty() {
        return Err(Error::contract("local round needs at least one batch"));
    }
    let p = model.param_count();
    w_t.check_len(p, "global model")?;
    state.w_old.check_len(p, "w_old")?;
    state.control.check_len(p, "client control")?;
    state.dual.check_len(p, "client dual")?;
    server_control.check_len(p, "server control")?;

    let rho = spec.perturbation.rho();
    let round_delta = match spec.perturbation {
        PerturbationRule::GlobalEstimate { rho } if rho > 0.0 => {
            Some(global_perturbation_estimate(&state.w_old, w_t, rho)?)
        }
        _ => None,
    };

    let mut w = w_t.clone();
    let mut grad_evals = 0;
    for batch in batches {
        let delta = match spec.perturbation {
            PerturbationRule::NoPerturb => None,
            PerturbationRule::LocalGrad { .. } => {
                let g = gradient(model, &w, batch)?;
                grad_evals += 1;
                (rho > 0.0).then(|| local_perturbation(&g, rho))
            }
            PerturbationRule::GlobalEstimate { .. } => round_delta.clone(),
        };
        if let Some(t) = trace.as_deref_mut() {
            t.iterates.push(w.clone());
            if let Some(d) = &delta {
                t.unit_perturbations.push(d.scale(1.0 / rho));
            }
        }
        // A zero perturbation must leave the evaluation point bit-identical.
        let g = match delta.filter(|d| d.iter().any(|&v| v != 0.0)) {
            Some(d) => gradient(model, &w.add(&d), batch)?,
            None => gradient(model, &w, batch)?,
        };
        grad_evals += 1;

        let mut next = w.clone();
        next.axpy(-eta_l, &g);
        match spec.correction {
            CorrectionRule::NoCorrection => {}
            CorrectionRule::ScaffoldVr => next.axpy(eta_l, &server_control.sub(&state.control)),
            CorrectionRule::DynRegularizer { beta } => {
                let mut reg = state.dual.clone();
                reg.axpy(1.0 / beta, &w.sub(w_t));
                next.axpy(-eta_l, &reg);
            }
        }
        w = next;
    }

    let steps = batches.len() as f64;
    let mut new_state = state.clone();
    match spec.correction {
        CorrectionRule::NoCorrection => {}
        CorrectionRule::ScaffoldVr => {
            // Like λ_i below, C_i tracks -∇F_i so that the step's +(C - C_i)
            // term has the right sign; see README ("Correction state sign").
            let mut c = state.control.sub(server_control);
            c.axpy(1.0 / (eta_l * steps), &w.sub(w_t));
            new_state.control = c;
        }
        CorrectionRule::DynRegularizer { beta } => {
            // λ_i tracks -∇F_i at the client's last local solution.
            new_state.dual.axpy(1.0 / beta, &w.sub(w_t));
        }
    }
    if matches!(spec.perturbation, PerturbationRule::GlobalEstimate { .. }) {
        new_state.w_old = w_t.clone();
    }
    Ok(LocalOutcome {
        w_final: w,
        state: new_state,
        grad_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuadraticProblem;
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    fn half_square(dim: usize) -> (ModelSpec, Batch) {
        let p = QuadraticProblem::new(vec![DMatrix::identity(dim, dim)], vec![DVector::zeros(dim)]).unwrap();
        (
            ModelSpec::Quadratic { dim },
            Batch::Quadratic {
                problem: Arc::new(p),
                clients: vec![0],
            },
        )
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn local_perturbation_cases() {
        assert_eq!(local_perturbation(&pv(&[3.0, 4.0]), 1.0).as_slice(), &[0.6, 0.8]);
        assert_eq!(local_perturbation(&pv(&[3.0, 4.0]), 0.0).as_slice(), &[0.0, 0.0]);
        assert_eq!(local_perturbation(&pv(&[0.0, 0.0]), 1.0).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn global_estimate_cases() {
        let d = global_perturbation_estimate(&pv(&[0.0, 0.0]), &pv(&[3.0, 4.0]), 1.0).unwrap();
        assert_eq!(d.as_slice(), &[-0.6, -0.8]);
        let d = global_perturbation_estimate(&pv(&[2.0, 0.0]), &pv(&[1.0, 0.0]), 0.5).unwrap();
        assert_eq!(d.as_slice(), &[0.5, 0.0]);
        let d = global_perturbation_estimate(&pv(&[1.0, 2.0]), &pv(&[1.0, 2.0]), 0.5).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 0.0]);
        assert!(global_perturbation_estimate(&pv(&[1.0]), &pv(&[1.0, 2.0]), 0.5).is_err());
    }

    #[test]
    fn eval_counts() {
        assert_eq!(gradient_eval_count(&Algorithm::FedSam.spec(0.1, 1.0).unwrap()), 2);
        assert_eq!(gradient_eval_count(&Algorithm::FedGamma.spec(0.1, 1.0).unwrap()), 2);
        assert_eq!(gradient_eval_count(&Algorithm::FedLesam.spec(0.1, 1.0).unwrap()), 1);
        assert_eq!(gradient_eval_count(&Algorithm::FedAvg.spec(0.1, 1.0).unwrap()), 1);
    }

    #[test]
    fn names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(a.spec(0.1, 2.0).unwrap().algorithm(), a);
        }
        let err = "FedSMOO".parse::<Algorithm>().unwrap_err();
        assert!(err.contains("not supported"));
    }

    #[test]
    fn invalid_pairings_rejected() {
        assert!(AlgorithmSpec::new(PerturbationRule::LocalGrad { rho: 0.1 }, CorrectionRule::DynRegularizer { beta: 1.0 }).is_err());
        assert!(AlgorithmSpec::new(PerturbationRule::NoPerturb, CorrectionRule::DynRegularizer { beta: 0.0 }).is_err());
        assert!(AlgorithmSpec::new(PerturbationRule::GlobalEstimate { rho: -1.0 }, CorrectionRule::NoCorrection).is_err());
    }

    #[test]
    fn fedavg_single_step() {
        let (model, batch) = half_square(1);
        let spec = Algorithm::FedAvg.spec(0.0, 1.0).unwrap();
        let out = local_round(&spec, &model, &pv(&[1.0]), &ClientState::zeros(1), &pv(&[0.0]), &[batch], 0.1, None).unwrap();
        assert!((out.w_final[0] - 0.9).abs() < 1e-15);
        assert_eq!(out.grad_evals, 1);
    }

    #[test]
    fn fedsam_single_step_hand_trace() {
        // δ = 0.1 · sign(1) = 0.1; ∇F(1.1) = 1.1; w = 1 - 0.1 · 1.1 = 0.89.
        let (model, batch) = half_square(1);
        let spec = Algorithm::FedSam.spec(0.1, 1.0).unwrap();
        let out = local_round(&spec, &model, &pv(&[1.0]), &ClientState::zeros(1), &pv(&[0.0]), &[batch], 0.1, None).unwrap();
        assert!((out.w_final[0] - 0.89).abs() < 1e-15);
        assert_eq!(out.grad_evals, 2);
    }

    #[test]
    fn global_estimate_is_constant_within_round() {
        let (model, batch) = half_square(2);
        let spec = Algorithm::FedLesam.spec(0.3, 1.0).unwrap();
        let state = ClientState {
            w_old: pv(&[2.0, -1.0]),
            ..ClientState::zeros(2)
        };
        let mut trace = LocalTrace::default();
        let batches = vec![batch; 5];
        let out = local_round(&spec, &model, &pv(&[1.0, 1.0]), &state, &pv(&[0.0, 0.0]), &batches, 0.1, Some(&mut trace)).unwrap();
        assert_eq!(trace.unit_perturbations.len(), 5);
        for d in &trace.unit_perturbations {
            assert_eq!(d, &trace.unit_perturbations[0]);
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(trace.iterates[0].as_slice(), &[1.0, 1.0]);
        assert_eq!(out.state.w_old.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_rho_lesam_matches_fedavg_bitwise() {
        let (model, batch) = half_square(3);
        let w = pv(&[0.3, -0.7, 1.9]);
        let state = ClientState {
            w_old: pv(&[1.0, 1.0, 1.0]),
            ..ClientState::zeros(3)
        };
        let batches = vec![batch; 4];
        let zero = pv(&[0.0; 3]);
        let a = local_round(&Algorithm::FedAvg.spec(0.0, 1.0).unwrap(), &model, &w, &state, &zero, &batches, 0.2, None).unwrap();
        let b = local_round(&Algorithm::FedLesam.spec(0.0, 1.0).unwrap(), &model, &w, &state, &zero, &batches, 0.2, None).unwrap();
        assert_eq!(a.w_final, b.w_final);
    }

    #[test]
    fn scaffold_control_update() {
        let (model, batch) = half_square(1);
        let spec = Algorithm::Scaffold.spec(0.0, 1.0).unwrap();
        let state = ClientState {
            control: pv(&[0.5]),
            ..ClientState::zeros(1)
        };
        // step: 1 - 0.1·1 + 0.1·(2 - 0.5) = 1.05
        let out = local_round(&spec, &model, &pv(&[1.0]), &state, &pv(&[2.0]), &[batch], 0.1, None).unwrap();
        assert!((out.w_final[0] - 1.05).abs() < 1e-15);
        // C_i' = 0.5 - 2 + (1.05 - 1) / 0.1 = -1.0 = -∇F(1)
        assert!((out.state.control[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn dyn_step_and_dual_update() {
        let (model, batch) = half_square(1);
        let spec = Algorithm::FedDyn.spec(0.0, 2.0).unwrap();
        let state = ClientState {
            dual: pv(&[0.4]),
            ..ClientState::zeros(1)
        };
        let batches = vec![batch; 2];
        let out = local_round(&spec, &model, &pv(&[1.0]), &state, &pv(&[0.0]), &batches, 0.1, None).unwrap();
        // k=0: w = 1 - 0.1(1 + 0.4 + 0) = 0.86
        // k=1: w = 0.86 - 0.1(0.86 + 0.4 + 0.5(0.86 - 1)) = 0.741
        assert!((out.w_final[0] - 0.741).abs() < 1e-12);
        // λ' = 0.4 + 0.5(0.741 - 1) = 0.2705
        assert!((out.state.dual[0] - 0.2705).abs() < 1e-12);
    }

    #[test]
    fn contract_violations() {
        let (model, batch) = half_square(1);
        let spec = Algorithm::FedAvg.spec(0.0, 1.0).unwrap();
        let st = ClientState::zeros(1);
        assert!(local_round(&spec, &model, &pv(&[1.0]), &st, &pv(&[0.0]), &[], 0.1, None).is_err());
        assert!(local_round(&spec, &model, &pv(&[1.0]), &st, &pv(&[0.0]), std::slice::from_ref(&batch), 0.0, None).is_err());
        assert!(local_round(&spec, &model, &pv(&[1.0, 2.0]), &st, &pv(&[0.0]), &[batch], 0.1, None).is_err());
    }
}
