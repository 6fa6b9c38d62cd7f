//! Diagnostics measured on the global model: sharpness, perturbation drift,
//! estimation error of the locally estimated perturbation direction,
//! loss-surface grids and accuracy. Also owns the metrics and surface CSV
//! formats.

use std::io::{BufRead, Write};

use rand_distr::{Distribution, StandardNormal};

use crate::algorithms::local_perturbation;
use crate::error::{Error, Result};
use crate::model::{forward_loss, gradient, logits, Batch, ModelSpec};
use crate::params::{mean, ParamVector};
use crate::rng::{keyed_rng, TAG_SURFACE};

/// One row of the metrics stream. `None` marks a value that was not
/// computed for this round, never a zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub grad_norm: Option<f64>,
    pub sharpness: Option<f64>,
    pub pd: Option<f64>,
    pub est_error: Option<f64>,
    pub eta_l: f64,
}

/// Single-ascent sharpness surrogate `F(w + ρ ∇F/‖∇F‖) - F(w)`; zero when
/// the gradient vanishes.
pub fn global_sharpness(model: &ModelSpec, w: &[f64], full_data: &Batch, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::contract(format!("sharpness probe radius must be positive, got {rho}")));
    }
    let g = gradient(model, w, full_data)?;
    let Some(u) = g.unit() else {
        return Ok(0.0);
    };
    let base = forward_loss(model, w, full_data)?;
    let mut probe = ParamVector::new(w.to_vec());
    probe.axpy(rho, &u);
    Ok(forward_loss(model, &probe, full_data)? - base)
}

/// `PD = (1/2) · mean_{i,k} ‖δ_{g,k} - δ_{i,k}‖` over unit directions.
///
/// `global_deltas[k]` is the virtual global direction at local step `k`;
/// `local_deltas[i]` holds client `i`'s directions for its steps. When every
/// client runs all `E = global_deltas.len()` steps this is exactly
/// `(1/2KE) Σ_k Σ_i ‖δ_{g,k} - δ_{i,k}‖`; a client with fewer steps
/// contributes only the steps it ran. Inputs are normalized here, so any
/// common scale `ρ` cancels; degenerate vectors count as zero directions.
pub fn perturbation_drift(global_deltas: &[ParamVector], local_deltas: &[Vec<ParamVector>]) -> Result<f64> {
    let e = global_deltas.len();
    if e == 0 || local_deltas.is_empty() {
        return Err(Error::contract("perturbation drift needs at least one step and one client"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, client) in local_deltas.iter().enumerate() {
        if client.is_empty() || client.len() > e {
            return Err(Error::contract(format!(
                "client {i} has {} local directions, expected 1..={e}",
                client.len()
            )));
        }
        for (g, l) in global_deltas.iter().zip(client) {
            l.check_len(g.len(), "local direction")?;
            let unit = |v: &ParamVector| v.unit().unwrap_or_else(|| ParamVector::zeros(v.len()));
            total += unit(g).sub(&unit(l)).norm();
            pairs += 1;
        }
    }
    Ok((total / (2.0 * pairs as f64)).clamp(0.0, 1.0))
}

/// Perturbation at the virtual global model
/// `w_g = w_t - η_g · mean_i (w_t - w_i)` built from the clients' current
/// local iterates.
pub fn virtual_global_perturbation(
    model: &ModelSpec,
    w_t: &ParamVector,
    client_models_at_k: &[ParamVector],
    eta_g: f64,
    full_data: &Batch,
    rho: f64,
) -> Result<ParamVector> {
    let deltas: Vec<ParamVector> = client_models_at_k.iter().map(|w| w_t.sub(w)).collect();
    for w in client_models_at_k {
        w.check_len(w_t.len(), "client model")?;
    }
    let mut w_g = w_t.clone();
    w_g.axpy(-eta_g, &mean(&deltas)?);
    Ok(local_perturbation(&gradient(model, &w_g, full_data)?, rho))
}

/// Squared distance between the unit direction of `w_prev - w_cur` and the
/// unit direction of `∇F(w_cur)`; lies in `[0, 4]`. `None` when either
/// direction is degenerate.
pub fn estimation_error(w_prev: &[f64], w_cur: &[f64], model: &ModelSpec, full_data: &Batch) -> Result<Option<f64>> {
    if w_prev.len() != w_cur.len() {
        return Err(Error::contract("estimation error: parameter lengths differ"));
    }
    let step = ParamVector::new(w_prev.iter().zip(w_cur).map(|(a, b)| a - b).collect());
    let g = gradient(model, w_cur, full_data)?;
    Ok(match (step.unit(), g.unit()) {
        (Some(a), Some(b)) => Some(a.sub(&b).norm().powi(2)),
        _ => None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub a: f64,
    pub b: f64,
    pub loss: f64,
}

/// Grid coordinate `i` of `resolution` points spanning `[-extent, extent]`;
/// exactly antisymmetric about the center.
fn grid_coord(i: usize, resolution: usize, extent: f64) -> f64 {
    if resolution == 1 {
        return 0.0;
    }
    let span = (resolution - 1) as f64;
    extent * (2.0 * i as f64 - span) / span
}

/// Two seeded random orthonormal directions in parameter space. The second
/// is zero when the space is one-dimensional.
pub fn surface_directions(len: usize, seed: u64) -> (ParamVector, ParamVector) {
    let mut rng = keyed_rng(seed, &[TAG_SURFACE]);
    let mut draw = || ParamVector::new((0..len).map(|_| StandardNormal.sample(&mut rng)).collect());
    let d1 = draw().unit().unwrap_or_else(|| ParamVector::zeros(len));
    let mut d2 = draw();
    let proj = d2.dot(&d1);
    d2.axpy(-proj, &d1);
    let d2 = match d2.unit() {
        Some(u) if len > 1 => u,
        _ => ParamVector::zeros(len),
    };
    (d1, d2)
}

/// Loss on the plane `w + a d₁ + b d₂`, row-major in `a` then `b`.
pub fn loss_surface_grid(
    model: &ModelSpec,
    w: &[f64],
    full_data: &Batch,
    resolution: usize,
    extent: f64,
    seed: u64,
) -> Result<Vec<SurfacePoint>> {
    if resolution == 0 || resolution.is_multiple_of(2) {
        return Err(Error::contract(format!("surface resolution must be odd and >= 1, got {resolution}")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::contract(format!("surface extent must be positive, got {extent}")));
    }
    let (d1, d2) = surface_directions(w.len(), seed);
    let mut out = Vec::with_capacity(resolution * resolution);
    let mut probe = vec![0.0; w.len()];
    for i in 0..resolution {
        let a = grid_coord(i, resolution, extent);
        for j in 0..resolution {
            let b = grid_coord(j, resolution, extent);
            for (k, p) in probe.iter_mut().enumerate() {
                *p = w[k] + a * d1[k] + b * d2[k];
            }
            out.push(SurfacePoint {
                a,
                b,
                loss: forward_loss(model, &probe, full_data)?,
            });
        }
    }
    Ok(out)
}

/// Fraction of samples whose arg-max class (lowest index on ties) matches the label.
pub fn test_accuracy(model: &ModelSpec, w: &[f64], test_data: &Batch) -> Result<f64> {
    let Batch::Samples {
        features,
        in_dim,
        labels,
    } = test_data
    else {
        return Err(Error::contract("accuracy needs a labeled batch"));
    };
    if !model.is_classifier() {
        return Err(Error::contract("accuracy is undefined for the quadratic family"));
    }
    if labels.is_empty() {
        return Err(Error::contract("empty test batch"));
    }
    let mut correct = 0usize;
    for (x, &y) in features.chunks_exact(*in_dim).zip(labels) {
        let z = logits(model, w, x)?;
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        correct += usize::from(best == y);
    }
    Ok(correct as f64 / labels.len() as f64)
}

pub const METRICS_HEADER: &str = "round,train_loss,test_acc,grad_norm,sharpness,pd,est_error,eta_l";

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(rows: &[RoundMetrics], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            field(r.train_loss),
            field(r.test_accuracy),
            field(r.grad_norm),
            field(r.sharpness),
            field(r.pd),
            field(r.est_error),
            r.eta_l
        )?;
    }
    Ok(())
}

/// Parses a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv<R: BufRead>(input: R, origin: &std::path::Path) -> Result<Vec<RoundMetrics>> {
    let mut lines = input.lines();
    let bad = |msg: String| Error::format(origin, msg);
    let header = lines
        .next()
        .ok_or_else(|| bad("empty metrics file".into()))?
        .map_err(|e| Error::io(origin, e))?;
    if header.trim() != METRICS_HEADER {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(bad(format!("line {}: expected 8 fields, found {}", n + 2, cols.len())));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| bad(format!("line {}: `{s}` is not a number", n + 2)))
            }
        };
        rows.push(RoundMetrics {
            round: cols[0]
                .parse()
                .map_err(|_| bad(format!("line {}: bad round `{}`", n + 2, cols[0])))?,
            train_loss: num(cols[1])?,
            test_accuracy: num(cols[2])?,
            grad_norm: num(cols[3])?,
            sharpness: num(cols[4])?,
            pd: num(cols[5])?,
            est_error: num(cols[6])?,
            eta_l: num(cols[7])?.ok_or_else(|| bad(format!("line {}: missing eta_l", n + 2)))?,
        });
    }
    Ok(rows)
}

pub fn write_surface_csv<W: Write>(grid: &[SurfacePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "a,b,loss")?;
    for p in grid {
        writeln!(out, "{},{},{}", p.a, p.b, p.loss)?;
    }
    Ok(())
}
