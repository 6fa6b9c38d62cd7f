//! Synthetic datasets and non-IID client partitions.
//!
//! Two kinds of data feed the simulator:
//!
//! * [`LabeledDataset`]: Gaussian blobs for the classification models, split
//!   across clients with [`dirichlet_partition`] or [`pathological_partition`].
//! * [`QuadraticProblem`]: one strongly convex quadratic per client,
//!   `F_i(w) = ½ (w - c_i)ᵀ A_i (w - c_i)`, where every smoothness and
//!   heterogeneity constant has a closed form.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::params::ParamVector;
use crate::rng::{keyed_rng, SimRng, TAG_BATCH, TAG_BLOBS, TAG_PARTITION, TAG_QUADRATIC};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// Row-major `len() x in_dim` feature matrix.
    pub features: Vec<f64>,
    pub in_dim: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, in_dim: usize, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if in_dim == 0 || features.len() != labels.len() * in_dim {
            return Err(Error::contract(format!(
                "feature matrix of {} values does not hold {} rows of width {in_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(LabeledDataset {
            features,
            in_dim,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.in_dim..(i + 1) * self.in_dim]
    }

    /// Gathers the given rows into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.in_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::Samples {
            features,
            in_dim: self.in_dim,
            labels,
        }
    }

    pub fn full_batch(&self) -> Batch {
        Batch::Samples {
            features: self.features.clone(),
            in_dim: self.in_dim,
            labels: self.labels.clone(),
        }
    }

    /// Moves the last `test_per_class` samples of every class into a held-out
    /// set, keeping the original relative order in both halves.
    pub fn split_per_class(&self, test_per_class: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut seen = vec![0usize; self.n_classes];
        let mut totals = vec![0usize; self.n_classes];
        for &l in &self.labels {
            totals[l] += 1;
        }
        if let Some(c) = (0..self.n_classes).find(|&c| totals[c] <= test_per_class) {
            return Err(Error::contract(format!(
                "class {c} has {} samples, cannot hold out {test_per_class}",
                totals[c]
            )));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            seen[l] += 1;
            if seen[l] > totals[l] - test_per_class {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((self.subset(&train), self.subset(&test)))
    }

    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.in_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        LabeledDataset {
            features,
            in_dim: self.in_dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, client: usize) -> Result<&[usize]> {
        self.assignments.get(client).map(Vec::as_slice).ok_or_else(|| {
            Error::contract(format!(
                "unknown client {client} (partition has {})",
                self.assignments.len()
            ))
        })
    }

    /// Checks the partition law: every index in `0..n_samples` is owned by
    /// exactly one client and no client is empty.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let mut owner = vec![false; n_samples];
        for (c, list) in self.assignments.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::contract(format!("client {c} holds no samples")));
            }
            for &i in list {
                if i >= n_samples || owner[i] {
                    return Err(Error::contract(format!("sample {i} duplicated or out of range")));
                }
                owner[i] = true;
            }
        }
        match owner.iter().position(|o| !o) {
            Some(i) => Err(Error::contract(format!("sample {i} not assigned"))),
            None => Ok(()),
        }
    }

    /// Writes the `client_id,sample_index` table, one pair per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "client_id,sample_index")?;
        for (c, list) in self.assignments.iter().enumerate() {
            for i in list {
                writeln!(out, "{c},{i}")?;
            }
        }
        Ok(())
    }
}

fn group_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Splits each class across clients with proportions drawn from a symmetric
/// Dirichlet(`beta`). Smaller `beta` concentrates each class on fewer clients.
///
/// Clients left empty by an extreme draw receive one sample taken from the
/// currently largest client.
pub fn dirichlet_partition(labels: &[usize], n_clients: usize, beta: f64, seed: u64) -> Result<Partition> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::contract(format!("dirichlet beta must be positive, got {beta}")));
    }
    if n_clients == 0 {
        return Err(Error::contract("n_clients must be at least 1"));
    }
    if labels.len() < n_clients {
        return Err(Error::contract(format!(
            "{} samples cannot cover {n_clients} clients",
            labels.len()
        )));
    }
    let mut rng = keyed_rng(seed, &[TAG_PARTITION, 0]);
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::contract(e.to_string()))?;
    let mut assignments = vec![Vec::new(); n_clients];

    for mut indices in group_by_class(labels) {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let mut props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // Every gamma draw underflowed; the limit of Dirichlet(beta -> 0)
            // is a point mass on one client.
            let pick = rng.random_range(0..n_clients);
            props.iter_mut().enumerate().for_each(|(c, p)| *p = f64::from(c == pick));
        }
        let n = indices.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == n_clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            assignments[c].extend_from_slice(&indices[start..end]);
            start = end;
        }
    }

    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("n_clients >= 1");
        let moved = assignments[largest].pop().expect("largest client is non-empty");
        assignments[empty].push(moved);
    }
    for list in &mut assignments {
        list.sort_unstable();
    }
    Ok(Partition { assignments })
}

/// Restricts every client to exactly `alpha` distinct classes.
///
/// The `n_clients * alpha` class slots are filled by cycling through a
/// seeded permutation of the classes, so each client's `alpha` consecutive
/// slots name distinct classes and every class is held by
/// `floor` or `ceil` of `n_clients * alpha / n_classes` clients. Each class's
/// shuffled samples are then cut into that many near-equal shards and dealt
/// to its holders.
pub fn pathological_partition(labels: &[usize], n_clients: usize, alpha: usize, seed: u64) -> Result<Partition> {
    let by_class: Vec<Vec<usize>> = group_by_class(labels)
        .into_iter()
        .filter(|c| !c.is_empty())
        .collect();
    let n_classes = by_class.len();
    if n_clients == 0 {
        return Err(Error::contract("n_clients must be at least 1"));
    }
    if alpha == 0 || alpha > n_classes {
        return Err(Error::contract(format!(
            "alpha must lie in [1, {n_classes}] (the number of classes present), got {alpha}"
        )));
    }
    if n_clients * alpha < n_classes {
        return Err(Error::contract(format!(
            "{n_clients} clients x {alpha} classes each = {} class slots cannot cover {n_classes} classes",
            n_clients * alpha
        )));
    }

    let mut rng = keyed_rng(seed, &[TAG_PARTITION, 1]);
    let mut class_order: Vec<usize> = (0..n_classes).collect();
    class_order.shuffle(&mut rng);
    let mut client_order: Vec<usize> = (0..n_clients).collect();
    client_order.shuffle(&mut rng);

    let mut holders = vec![Vec::new(); n_classes];
    for (group, &client) in client_order.iter().enumerate() {
        for slot in group * alpha..(group + 1) * alpha {
            holders[class_order[slot % n_classes]].push(client);
        }
    }

    let mut assignments = vec![Vec::new(); n_clients];
    for (class, mut indices) in by_class.into_iter().enumerate() {
        let shards = holders[class].len();
        if indices.len() < shards {
            return Err(Error::contract(format!(
                "class {class} has {} samples but must be split into {shards} non-empty shards",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let (base, extra) = (indices.len() / shards, indices.len() % shards);
        let mut start = 0;
        for (s, &client) in holders[class].iter().enumerate() {
            let len = base + usize::from(s < extra);
            assignments[client].extend_from_slice(&indices[start..start + len]);
            start += len;
        }
    }
    for list in &mut assignments {
        list.sort_unstable();
    }
    Ok(Partition { assignments })
}

/// One cluster center per class, pairwise at least `4 * spread` apart.
pub fn blob_centers(n_classes: usize, in_dim: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = keyed_rng(seed, &[TAG_BLOBS, 0]);
    let min_dist = 4.0 * spread;
    let mut half_width = 2.0 * min_dist * (n_classes.max(2) as f64).powf(1.0 / in_dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while centers.len() < n_classes {
        let mut placed = false;
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..in_dim)
                .map(|_| rng.random_range(-half_width..=half_width))
                .collect();
            let ok = centers.iter().all(|c| {
                c.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist
            });
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            half_width *= 1.5;
        }
    }
    centers
}

/// Isotropic Gaussian clusters around [`blob_centers`]; samples are ordered
/// class by class.
pub fn make_blobs(
    n_classes: usize,
    samples_per_class: usize,
    in_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes == 0 || samples_per_class == 0 || in_dim == 0 {
        return Err(Error::contract("blob counts must all be at least 1"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::contract(format!("blob spread must be positive, got {spread}")));
    }
    let centers = blob_centers(n_classes, in_dim, spread, seed);
    let mut rng = keyed_rng(seed, &[TAG_BLOBS, 1]);
    let mut features = Vec::with_capacity(n_classes * samples_per_class * in_dim);
    let mut labels = Vec::with_capacity(n_classes * samples_per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + spread * z);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, in_dim, labels, n_classes)
}

/// Per-client quadratics `F_i(w) = ½ (w - c_i)ᵀ A_i (w - c_i)`; the global
/// objective is their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub matrices: Vec<DMatrix<f64>>,
    pub centers: Vec<DVector<f64>>,
}

impl QuadraticProblem {
    pub fn new(matrices: Vec<DMatrix<f64>>, centers: Vec<DVector<f64>>) -> Result<Self> {
        if matrices.is_empty() || matrices.len() != centers.len() {
            return Err(Error::contract("quadratic problem needs one matrix per center"));
        }
        let dim = centers[0].len();
        for (a, c) in matrices.iter().zip(&centers) {
            if a.nrows() != dim || a.ncols() != dim || c.len() != dim {
                return Err(Error::contract("quadratic problem dimensions disagree"));
            }
        }
        Ok(QuadraticProblem { matrices, centers })
    }

    pub fn n_clients(&self) -> usize {
        self.matrices.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn residual(&self, client: usize, w: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(w) - &self.centers[client]
    }

    pub fn client_loss(&self, client: usize, w: &[f64]) -> f64 {
        let r = self.residual(client, w);
        0.5 * r.dot(&(&self.matrices[client] * &r))
    }

    pub fn client_gradient(&self, client: usize, w: &[f64]) -> DVector<f64> {
        &self.matrices[client] * self.residual(client, w)
    }

    pub fn global_gradient(&self, w: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for i in 0..self.n_clients() {
            g += self.client_gradient(i, w);
        }
        g / self.n_clients() as f64
    }

    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let sum = self
            .matrices
            .iter()
            .fold(DMatrix::zeros(self.dim(), self.dim()), |acc, a| acc + a);
        sum / self.n_clients() as f64
    }

    /// `L = max_i λ_max(A_i)`: every client objective is `L`-smooth.
    pub fn smoothness(&self) -> f64 {
        self.matrices.iter().map(max_eigenvalue).fold(f64::MIN, f64::max)
    }

    /// `L_g = λ_max(mean_i A_i)`: smoothness of the global objective.
    pub fn global_smoothness(&self) -> f64 {
        max_eigenvalue(&self.mean_matrix())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.matrices
            .iter()
            .map(|a| SymmetricEigen::new(a.clone()).eigenvalues.min())
            .fold(f64::MAX, f64::min)
    }

    /// Global minimizer `(Σ A_i)⁻¹ Σ A_i c_i`.
    pub fn minimizer(&self) -> DVector<f64> {
        let mut lhs = DMatrix::zeros(self.dim(), self.dim());
        let mut rhs = DVector::zeros(self.dim());
        for (a, c) in self.matrices.iter().zip(&self.centers) {
            lhs += a;
            rhs += a * c;
        }
        lhs.cholesky()
            .expect("sum of SPD matrices is SPD")
            .solve(&rhs)
    }

    /// `σ_g(w)² = max_i ‖∇F_i(w) - ∇F(w)‖²`.
    pub fn heterogeneity_sq(&self, w: &[f64]) -> f64 {
        let g = self.global_gradient(w);
        (0..self.n_clients())
            .map(|i| (self.client_gradient(i, w) - &g).norm_squared())
            .fold(0.0, f64::max)
    }

    /// `σ'_g(w)²`: squared distance between the unit direction of the summed
    /// client gradients and the unit direction of `∇F(w)`. Zero up to
    /// rounding when every client participates; `None` at a stationary point.
    pub fn unit_difference_sq(&self, w: &[f64]) -> Option<f64> {
        let summed = (0..self.n_clients()).fold(DVector::zeros(self.dim()), |acc, i| {
            acc + self.client_gradient(i, w)
        });
        let global = self.global_gradient(w);
        let (ns, ng) = (summed.norm(), global.norm());
        if ns < crate::params::DEGENERATE_NORM || ng < crate::params::DEGENERATE_NORM {
            return None;
        }
        Some((summed / ns - global / ng).norm_squared())
    }
}

fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.max()
}

/// Eigenvalue range used by [`make_quadratic_family`].
pub const DEFAULT_EIGEN_RANGE: (f64, f64) = (0.5, 2.0);

pub fn make_quadratic_family(n_clients: usize, dim: usize, heterogeneity: f64, seed: u64) -> Result<QuadraticProblem> {
    make_quadratic_family_with(n_clients, dim, heterogeneity, DEFAULT_EIGEN_RANGE, seed)
}

/// Random SPD `A_i = Q_i diag(d_i) Q_iᵀ` with `d_i` uniform in `eigen_range`
/// and centers `c_i = c̄ + heterogeneity * u_i`, where the `u_i` are centered
/// and scaled so that `max_i ‖c_i - mean(c)‖ <= heterogeneity`.
pub fn make_quadratic_family_with(
    n_clients: usize,
    dim: usize,
    heterogeneity: f64,
    eigen_range: (f64, f64),
    seed: u64,
) -> Result<QuadraticProblem> {
    if n_clients == 0 || dim == 0 {
        return Err(Error::contract("quadratic family needs at least one client and one dimension"));
    }
    if !(heterogeneity >= 0.0 && heterogeneity.is_finite()) {
        return Err(Error::contract(format!("heterogeneity must be >= 0, got {heterogeneity}")));
    }
    let (lo, hi) = eigen_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::contract(format!("eigenvalue range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
    }
    let mut rng = keyed_rng(seed, &[TAG_QUADRATIC]);
    let mut matrices = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let q = random_rotation(dim, &mut rng);
        let d = DVector::from_fn(dim, |_, _| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        let a = &q * DMatrix::from_diagonal(&d) * q.transpose();
        matrices.push((&a + a.transpose()) * 0.5);
    }

    let center = DVector::from_fn(dim, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    let mut offsets: Vec<DVector<f64>> = (0..n_clients)
        .map(|_| {
            let dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let radius: f64 = rng.random_range(0.0..=1.0);
            let n = dir.norm();
            if n > 0.0 {
                dir * (radius / n)
            } else {
                dir
            }
        })
        .collect();
    let mean_offset = offsets.iter().fold(DVector::zeros(dim), |acc, u| acc + u) / n_clients as f64;
    offsets.iter_mut().for_each(|u| *u -= &mean_offset);
    let max_norm = offsets.iter().map(|u| u.norm()).fold(1.0, f64::max);
    let centers = offsets
        .iter()
        .map(|u| &center + u * (heterogeneity / max_norm))
        .collect();
    QuadraticProblem::new(matrices, centers)
}

fn random_rotation(dim: usize, rng: &mut SimRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// The data a federation trains on.
#[derive(Debug, Clone)]
pub enum DataSource {
    Labeled(LabeledDataset),
    /// Client `i` owns exactly "sample" `i`: its own quadratic objective.
    Quadratic(Arc<QuadraticProblem>),
}

impl DataSource {
    pub fn len(&self) -> usize {
        match self {
            DataSource::Labeled(d) => d.len(),
            DataSource::Quadratic(p) => p.n_clients(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        match self {
            DataSource::Labeled(d) => d.batch(indices),
            DataSource::Quadratic(p) => Batch::Quadratic {
                problem: Arc::clone(p),
                clients: indices.to_vec(),
            },
        }
    }

    pub fn full_batch(&self) -> Batch {
        match self {
            DataSource::Labeled(d) => d.full_batch(),
            DataSource::Quadratic(p) => Batch::Quadratic {
                problem: Arc::clone(p),
                clients: (0..p.n_clients()).collect(),
            },
        }
    }
}

/// One epoch of mini-batches for `client` in `round`: the client's indices
/// are shuffled by an RNG keyed on `(seed, round, client)` and cut into
/// contiguous batches; the final short batch is kept.
pub fn batch_stream(
    source: &DataSource,
    partition: &Partition,
    client: usize,
    batch_size: usize,
    seed: u64,
    round: usize,
) -> Result<Vec<Batch>> {
    epoch_batches(source, partition, client, batch_size, seed, round, 0)
}

/// [`batch_stream`] for the `epoch`-th pass over the client's data within a
/// round; epoch 0 is exactly [`batch_stream`].
pub fn epoch_batches(
    source: &DataSource,
    partition: &Partition,
    client: usize,
    batch_size: usize,
    seed: u64,
    round: usize,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut indices = partition.client(client)?.to_vec();
    let mut rng = keyed_rng(seed, &[TAG_BATCH, round as u64, client as u64, epoch as u64]);
    indices.shuffle(&mut rng);
    Ok(indices.chunks(batch_size).map(|chunk| source.batch(chunk)).collect())
}

/// Number of distinct labels in each client's share.
pub fn client_label_sets(labels: &[usize], partition: &Partition) -> Vec<BTreeSet<usize>> {
    partition
        .assignments
        .iter()
        .map(|list| list.iter().map(|&i| labels[i]).collect())
        .collect()
}

/// Flattens a column vector into a parameter vector.
pub fn to_params(v: &DVector<f64>) -> ParamVector {
    ParamVector::new(v.iter().copied().collect())
}
