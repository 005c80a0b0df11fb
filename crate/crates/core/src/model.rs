//! Datasets, hyperparameters and fit traces.
//!
//! Prototype tables are stored one class per row (`p×k`, `q×k`) and feature
//! tables one sample per row (`N×d`). Labels are 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::DenseMatrix;

/// Labelled seen-class training data.
#[derive(Debug, Clone)]
pub struct SeenSet {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub prototypes: DenseMatrix,
}

impl SeenSet {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, prototypes: DenseMatrix) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::invalid(
                "seen set has no samples or zero feature dimension",
            ));
        }
        if prototypes.nrows() == 0 || prototypes.ncols() == 0 {
            return Err(Error::invalid("seen set has no class prototypes"));
        }
        if labels.len() != features.nrows() {
            return Err(Error::dim(format!(
                "{} seen labels for {} seen samples",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= prototypes.nrows()) {
            return Err(Error::invalid(format!(
                "seen label {bad} out of range for {} prototypes",
                prototypes.nrows()
            )));
        }
        Ok(SeenSet {
            features,
            labels,
            prototypes,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn k(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn p(&self) -> usize {
        self.prototypes.nrows()
    }

    /// Row `i` is the prototype of sample `i`.
    pub fn targets(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.n(), self.k(), |i, c| {
            self.prototypes[(self.labels[i], c)]
        })
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.p()];
        for &l in &self.labels {
            counts[l] += 1.0;
        }
        counts
    }
}

/// Unlabelled test data with its candidate prototypes.
///
/// `truth_labels` is for evaluation only; fitting receives a [`PoolView`].
#[derive(Debug, Clone)]
pub struct UnseenPool {
    pub features: DenseMatrix,
    pub prototypes: DenseMatrix,
    pub truth_labels: Option<Vec<usize>>,
}

impl UnseenPool {
    pub fn new(
        features: DenseMatrix,
        prototypes: DenseMatrix,
        truth_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if prototypes.nrows() == 0 {
            return Err(Error::NoUnseenClasses);
        }
        if let Some(truth) = &truth_labels {
            if truth.len() != features.nrows() {
                return Err(Error::dim(format!(
                    "{} truth labels for {} unseen samples",
                    truth.len(),
                    features.nrows()
                )));
            }
            if let Some(&bad) = truth.iter().find(|&&l| l >= prototypes.nrows()) {
                return Err(Error::invalid(format!(
                    "unseen label {bad} out of range for {} prototypes",
                    prototypes.nrows()
                )));
            }
        }
        Ok(UnseenPool {
            features,
            prototypes,
            truth_labels,
        })
    }

    pub fn view(&self) -> PoolView<'_> {
        PoolView {
            features: &self.features,
            prototypes: &self.prototypes,
        }
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn q(&self) -> usize {
        self.prototypes.nrows()
    }
}

/// What the fitting code is allowed to see of an unlabelled pool.
#[derive(Debug, Clone, Copy)]
pub struct PoolView<'a> {
    pub features: &'a DenseMatrix,
    pub prototypes: &'a DenseMatrix,
}

impl PoolView<'_> {
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn q(&self) -> usize {
        self.prototypes.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
}

pub fn validate(seen: &SeenSet, unseen: &UnseenPool) -> Result<Dims> {
    validate_view(seen, unseen.view())
}

pub fn validate_view(seen: &SeenSet, pool: PoolView<'_>) -> Result<Dims> {
    if pool.q() == 0 {
        return Err(Error::NoUnseenClasses);
    }
    if pool.n() > 0 && pool.features.ncols() != seen.d() {
        return Err(Error::dim(format!(
            "seen features have d={}, unseen features have d={}",
            seen.d(),
            pool.features.ncols()
        )));
    }
    if pool.prototypes.ncols() != seen.k() {
        return Err(Error::dim(format!(
            "seen prototypes have k={}, unseen prototypes have k={}",
            seen.k(),
            pool.prototypes.ncols()
        )));
    }
    Ok(Dims {
        d: seen.d(),
        k: seen.k(),
        p: seen.p(),
        q: pool.q(),
        n_seen: seen.n(),
        n_unseen: pool.n(),
    })
}

/// Which projection directions enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `||Wᵀx - y||² + ||x - Wy||²`
    #[default]
    Bidirectional,
    /// `||x - Wy||²` only.
    ReverseOnly,
    /// `||Wᵀx - y||²` only.
    ForwardOnly,
}

impl LossMode {
    pub fn forward(self) -> bool {
        matches!(self, LossMode::Bidirectional | LossMode::ForwardOnly)
    }

    pub fn reverse(self) -> bool {
        matches!(self, LossMode::Bidirectional | LossMode::ReverseOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    #[default]
    PerSample,
    PerClass,
}

/// Solver settings.
///
/// The objective's raw weights are derived rather than stored: with
/// `α_t = decay^t · alpha`, the unlabelled-term weight is `γ = α_t / (1 - α_t)`
/// and the ridge weight is `λ = beta · (1 + γ)`. Dividing the objective by
/// `1 + γ` gives the normalised form that the solver works with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub decay: f64,
    pub max_iters: usize,
    pub w_tol: f64,
    pub tie_tol: f64,
    pub loss_mode: LossMode,
    pub transductive: bool,
    pub candidate_top_m: usize,
    pub superclass_r: Option<usize>,
    pub metric_mode: MetricMode,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 0.5,
            beta: 0.01,
            decay: 0.99,
            max_iters: 50,
            w_tol: 1e-6,
            tie_tol: 1e-12,
            loss_mode: LossMode::Bidirectional,
            transductive: true,
            candidate_top_m: 5,
            superclass_r: None,
            metric_mode: MetricMode::PerSample,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Settings for the inductive model (no unlabelled term).
    pub fn inductive() -> Self {
        Hyperparams {
            alpha: 0.0,
            transductive: false,
            ..Default::default()
        }
    }

    /// True when the unlabelled pool takes part in fitting.
    pub fn uses_pool(&self) -> bool {
        self.transductive && self.alpha > 0.0
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha * self.decay.powi(t as i32)
    }

    pub fn gamma(alpha_t: f64) -> f64 {
        alpha_t / (1.0 - alpha_t)
    }

    pub fn lambda(&self, alpha_t: f64) -> f64 {
        self.beta * (1.0 + Self::gamma(alpha_t))
    }

    pub fn check(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::invalid(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if self.transductive && !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if self.candidate_top_m == 0 {
            return Err(Error::invalid("top-m must be at least 1"));
        }
        if self.superclass_r == Some(0) {
            return Err(Error::invalid("superclass count must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AssignmentsStable,
    WConverged,
    MaxIters,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::AssignmentsStable => "assignments_stable",
            Termination::WConverged => "w_converged",
            Termination::MaxIters => "max_iters",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub alpha_t: f64,
    /// Normalised objective evaluated at the new projection.
    pub objective: f64,
    /// Unlabelled samples whose arg-min label differs between the old and new projection.
    pub changed: usize,
    /// `||W^(t+1) - W^(t)||_F`.
    pub delta_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl FitTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }

    /// First iteration index after which no assignment changes were recorded.
    pub fn assignments_settled_at(&self) -> Option<usize> {
        let last_change = self.records.iter().rposition(|r| r.changed > 0);
        match last_change {
            None => Some(0),
            Some(i) if i + 1 < self.records.len() => Some(i + 1),
            Some(_) => None,
        }
    }
}

pub fn normalize_rows(m: &mut DenseMatrix) {
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}
