//! Objective, subgradient, surrogate system and the iterative transductive fit.
//!
//! At iterate `W`, every unlabelled sample's minimum over candidate classes is
//! replaced by the average of the losses attaining it. The resulting surrogate
//! is quadratic in `W` and upper-bounds the objective, touching it at `W`.
//! Its stationarity condition is the Sylvester system
//!
//! ```text
//! Â = f·[(1-α)Σ x_s x_sᵀ + α Σ x_u x_uᵀ] + βI
//! B̂ = r·[(1-α)Σ y_s y_sᵀ + α ΣΣ η_ij y_j y_jᵀ]
//! Ĉ = (f+r)·[(1-α)Σ x_s y_sᵀ + α ΣΣ η_ij x_u y_jᵀ]
//! ```
//!
//! where `f`, `r` are 1 when the forward (`Wᵀx ≈ y`) and reverse (`Wy ≈ x`)
//! direction is active. With both active this is the usual `2Ĉ` right-hand side.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    validate_view, FitTrace, Hyperparams, IterationRecord, LossMode, PoolView, SeenSet, Termination,
};
use crate::numlin::{
    cross, frobenius_distance, gram, solve_sylvester, weighted_gram, DenseMatrix, CHUNK_ROWS,
};
use crate::superclass::CandidateSets;

/// Loss entry for a class outside a sample's candidate set.
pub const NOT_CANDIDATE: f64 = f64::INFINITY;

/// Absolute slack added to the tie threshold so exact zeros still tie.
const TIE_FLOOR: f64 = 1e-300;

/// Projection from the semantic space (`k`) to the feature space (`d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection(DenseMatrix);

impl Projection {
    pub fn new(w: DenseMatrix) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection"));
        }
        Ok(Projection(w))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_inner(self) -> DenseMatrix {
        self.0
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }
}

/// Subgradient of one row minimum: equal weight on every minimiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EtaRow {
    support: Vec<usize>,
}

impl EtaRow {
    /// A one-hot row.
    pub fn hard(j: usize) -> Self {
        EtaRow { support: vec![j] }
    }

    /// Classes carrying weight, ascending.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Number of minimisers.
    pub fn n(&self) -> usize {
        self.support.len()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.support.len() as f64
    }

    pub fn dense(&self, q: usize) -> Vec<f64> {
        let mut out = vec![0.0; q];
        let w = self.weight();
        for &j in &self.support {
            out[j] = w;
        }
        out
    }
}

fn pair_loss(
    wt_x: impl Iterator<Item = f64>,
    y: impl Iterator<Item = f64>,
    x: impl Iterator<Item = f64>,
    w_y: impl Iterator<Item = f64>,
    mode: LossMode,
) -> f64 {
    let mut total = 0.0;
    if mode.forward() {
        total += wt_x.zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    if mode.reverse() {
        total += x.zip(w_y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total
}

pub fn bidirectional_loss(
    w: &Projection,
    x: &DVector<f64>,
    y: &DVector<f64>,
    mode: LossMode,
) -> Result<f64> {
    if x.len() != w.d() || y.len() != w.k() {
        return Err(Error::dim(format!(
            "loss of x (len {}) and y (len {}) under a {}x{} projection",
            x.len(),
            y.len(),
            w.d(),
            w.k()
        )));
    }
    let wt_x = w.matrix().tr_mul(x);
    let w_y = w.matrix() * y;
    Ok(pair_loss(
        wt_x.iter().copied(),
        y.iter().copied(),
        x.iter().copied(),
        w_y.iter().copied(),
        mode,
    ))
}

fn check_projection(w: &Projection, d: usize, k: usize) -> Result<()> {
    if w.d() != d || w.k() != k {
        return Err(Error::dim(format!(
            "projection is {}x{}, data needs {d}x{k}",
            w.d(),
            w.k()
        )));
    }
    Ok(())
}

fn check_candidates(candidates: &CandidateSets, n: usize, q: usize) -> Result<()> {
    if candidates.len() != n {
        return Err(Error::dim(format!(
            "{} candidate sets for {n} samples",
            candidates.len()
        )));
    }
    for (i, set) in candidates.sets().iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyCandidates(i));
        }
        if let Some(&bad) = set.iter().find(|&&j| j >= q) {
            return Err(Error::invalid(format!(
                "candidate {bad} for sample {i} out of range for {q} classes"
            )));
        }
    }
    Ok(())
}

/// Losses of every sample (rows of `features`) against every prototype (rows).
pub fn loss_matrix_raw(
    w: &Projection,
    features: &DenseMatrix,
    prototypes: &DenseMatrix,
    mode: LossMode,
    candidates: Option<&CandidateSets>,
) -> Result<DenseMatrix> {
    let (n, q) = (features.nrows(), prototypes.nrows());
    if n > 0 {
        check_projection(w, features.ncols(), prototypes.ncols())?;
    } else if prototypes.ncols() != w.k() {
        return Err(Error::dim("prototype dimension does not match projection"));
    }
    if let Some(c) = candidates {
        check_candidates(c, n, q)?;
    }
    let (d, k) = (w.d(), w.k());
    // Column-per-item layouts keep each sample and prototype contiguous.
    let xt = features.transpose();
    let ut = w.matrix().tr_mul(&xt);
    let yt = prototypes.transpose();
    let vt = w.matrix() * &yt;

    let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
    let blocks: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK_ROWS).min(n);
            let mut block = Vec::with_capacity((end - start) * q);
            for i in start..end {
                let x = &xt.as_slice()[i * d..(i + 1) * d];
                let u = &ut.as_slice()[i * k..(i + 1) * k];
                let allowed = candidates.map(|c| c.set(i));
                for j in 0..q {
                    if let Some(set) = allowed {
                        if set.binary_search(&j).is_err() {
                            block.push(NOT_CANDIDATE);
                            continue;
                        }
                    }
                    let y = &yt.as_slice()[j * k..(j + 1) * k];
                    let v = &vt.as_slice()[j * d..(j + 1) * d];
                    block.push(pair_loss(
                        u.iter().copied(),
                        y.iter().copied(),
                        x.iter().copied(),
                        v.iter().copied(),
                        mode,
                    ));
                }
            }
            block
        })
        .collect();

    let mut out = DenseMatrix::zeros(n, q);
    for (&start, block) in starts.iter().zip(&blocks) {
        for (offset, row) in block.chunks(q.max(1)).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out[(start + offset, j)] = v;
            }
        }
    }
    Ok(out)
}

/// `N_u×q` loss table; entries outside a sample's candidate set are [`NOT_CANDIDATE`].
pub fn loss_matrix(
    w: &Projection,
    pool: PoolView<'_>,
    mode: LossMode,
    candidates: Option<&CandidateSets>,
) -> Result<DenseMatrix> {
    loss_matrix_raw(w, pool.features, pool.prototypes, mode, candidates)
}

/// Losses of each labelled sample against its own class prototype.
pub fn paired_losses(w: &Projection, seen: &SeenSet, mode: LossMode) -> Result<Vec<f64>> {
    check_projection(w, seen.d(), seen.k())?;
    let targets = seen.targets();
    let u = &seen.features * w.matrix();
    let v = &targets * w.matrix().transpose();
    Ok((0..seen.n())
        .map(|i| {
            pair_loss(
                u.row(i).iter().copied(),
                targets.row(i).iter().copied(),
                seen.features.row(i).iter().copied(),
                v.row(i).iter().copied(),
                mode,
            )
        })
        .collect())
}

/// Index of the smallest finite entry, ties towards the lower index.
pub fn argmin(row: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in row.into_iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((j, v)),
        }
    }
    best.map(|(j, _)| j)
}

pub fn subgradient_eta(row: &[f64], tie_tol: f64) -> Result<EtaRow> {
    let min = row
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::invalid("loss row has no finite entry"));
    }
    let threshold = min * (1.0 + tie_tol) + TIE_FLOOR;
    let support = row
        .iter()
        .enumerate()
        .filter(|(_, &v)| v.is_finite() && v <= threshold)
        .map(|(j, _)| j)
        .collect();
    Ok(EtaRow { support })
}

fn eta_rows(losses: &DenseMatrix, tie_tol: f64) -> Result<Vec<EtaRow>> {
    losses
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            let row: Vec<f64> = row.iter().copied().collect();
            subgradient_eta(&row, tie_tol).map_err(|_| Error::EmptyCandidates(i))
        })
        .collect()
}

fn assignments(losses: &DenseMatrix) -> Vec<Option<usize>> {
    losses
        .row_iter()
        .map(|row| argmin(row.iter().copied()))
        .collect()
}

/// The three operands of `ÂW + WB̂ = Ĉ`.
#[derive(Debug, Clone)]
pub struct SylvesterSystem {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
}

impl SylvesterSystem {
    pub fn solve(&self) -> Result<Projection> {
        Projection::new(solve_sylvester(&self.a, &self.b, &self.c)?)
    }
}

/// Iteration-invariant sums over the data.
#[derive(Debug, Clone)]
struct DataSums {
    seen_xx: DenseMatrix,
    seen_yy: DenseMatrix,
    seen_xy: DenseMatrix,
    pool_xx: Option<DenseMatrix>,
}

impl DataSums {
    fn new(seen: &SeenSet, pool: Option<PoolView<'_>>) -> Self {
        DataSums {
            seen_xx: gram(&seen.features),
            seen_yy: weighted_gram(&seen.prototypes, &seen.class_counts()),
            seen_xy: cross(&seen.features, &seen.targets()),
            pool_xx: pool.map(|p| gram(p.features)),
        }
    }

    fn system(
        &self,
        pool: Option<(PoolView<'_>, &[EtaRow])>,
        alpha_t: f64,
        beta: f64,
        mode: LossMode,
    ) -> SylvesterSystem {
        let d = self.seen_xy.nrows();
        let seen_w = 1.0 - alpha_t;
        let mut xx = &self.seen_xx * seen_w;
        let mut yy = &self.seen_yy * seen_w;
        let mut xy = &self.seen_xy * seen_w;
        if let (Some((view, eta)), Some(pool_xx)) = (pool, &self.pool_xx) {
            if alpha_t > 0.0 {
                let (yy_u, xy_u) = pool_sums(view, eta);
                xx += pool_xx * alpha_t;
                yy += yy_u * alpha_t;
                xy += xy_u * alpha_t;
            }
        }
        let fwd = if mode.forward() { 1.0 } else { 0.0 };
        let rev = if mode.reverse() { 1.0 } else { 0.0 };
        SylvesterSystem {
            a: xx * fwd + DenseMatrix::identity(d, d) * beta,
            b: yy * rev,
            c: xy * (fwd + rev),
        }
    }
}

/// `(Σ_i Σ_j η_ij y_j y_jᵀ, Σ_i Σ_j η_ij x_i y_jᵀ)`.
fn pool_sums(pool: PoolView<'_>, eta: &[EtaRow]) -> (DenseMatrix, DenseMatrix) {
    let (n, q, k) = (pool.n(), pool.q(), pool.prototypes.ncols());
    let mut class_mass = vec![0.0; q];
    let mut mixed = DenseMatrix::zeros(n, k);
    for (i, row) in eta.iter().enumerate() {
        let w = row.weight();
        for &j in row.support() {
            class_mass[j] += w;
            for c in 0..k {
                mixed[(i, c)] += w * pool.prototypes[(j, c)];
            }
        }
    }
    (
        weighted_gram(pool.prototypes, &class_mass),
        cross(pool.features, &mixed),
    )
}

/// Builds the surrogate's Sylvester system at one iteration.
pub fn assemble_system(
    seen: &SeenSet,
    pool: PoolView<'_>,
    eta: &[EtaRow],
    alpha_t: f64,
    beta: f64,
    mode: LossMode,
) -> Result<SylvesterSystem> {
    validate_view(seen, pool)?;
    if !(0.0..1.0).contains(&alpha_t) {
        return Err(Error::invalid(format!(
            "alpha_t must be in [0, 1), got {alpha_t}"
        )));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    if alpha_t > 0.0 && eta.len() != pool.n() {
        return Err(Error::dim(format!(
            "{} subgradient rows for {} samples",
            eta.len(),
            pool.n()
        )));
    }
    let sums = DataSums::new(seen, (alpha_t > 0.0).then_some(pool));
    Ok(sums.system(Some((pool, eta)), alpha_t, beta, mode))
}

/// Normalised objective
/// `(1-α)·Σ_seen loss + α·Σ_i min_j loss + β·||W||²`.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    w: &Projection,
    seen: &SeenSet,
    pool: PoolView<'_>,
    alpha_t: f64,
    beta: f64,
    mode: LossMode,
    candidates: Option<&CandidateSets>,
) -> Result<f64> {
    let unseen = if alpha_t > 0.0 {
        let losses = loss_matrix(w, pool, mode, candidates)?;
        row_min_sum(&losses)?
    } else {
        0.0
    };
    objective_from_parts(w, seen, unseen, alpha_t, beta, mode)
}

fn row_min_sum(losses: &DenseMatrix) -> Result<f64> {
    let mut total = 0.0;
    for (i, row) in losses.row_iter().enumerate() {
        let m = row.iter().copied().fold(f64::INFINITY, f64::min);
        if !m.is_finite() {
            return Err(Error::EmptyCandidates(i));
        }
        total += m;
    }
    Ok(total)
}

fn objective_from_parts(
    w: &Projection,
    seen: &SeenSet,
    unseen_total: f64,
    alpha_t: f64,
    beta: f64,
    mode: LossMode,
) -> Result<f64> {
    let seen_total: f64 = paired_losses(w, seen, mode)?.iter().sum();
    Ok((1.0 - alpha_t) * seen_total + alpha_t * unseen_total + beta * w.matrix().norm_squared())
}

/// The quadratic upper bound used at one iteration: the objective with each
/// row minimum replaced by `η_iᵀ f_i`.
pub fn surrogate(
    w: &Projection,
    seen: &SeenSet,
    pool: PoolView<'_>,
    eta: &[EtaRow],
    alpha_t: f64,
    beta: f64,
    mode: LossMode,
) -> Result<f64> {
    let unseen = if alpha_t > 0.0 {
        let losses = loss_matrix(w, pool, mode, None)?;
        eta.iter()
            .enumerate()
            .map(|(i, row)| {
                row.support().iter().map(|&j| losses[(i, j)]).sum::<f64>() * row.weight()
            })
            .sum()
    } else {
        0.0
    };
    objective_from_parts(w, seen, unseen, alpha_t, beta, mode)
}

/// Closed-form fit on labelled data only.
pub fn fit_inductive(seen: &SeenSet, beta: f64, mode: LossMode) -> Result<Projection> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    DataSums::new(seen, None)
        .system(None, 0.0, beta, mode)
        .solve()
}

/// What an observer sees after each completed iteration.
pub struct StepView<'a> {
    pub record: &'a IterationRecord,
    pub previous: &'a Projection,
    pub current: &'a Projection,
    /// Subgradient rows the new projection was solved against.
    pub eta: &'a [EtaRow],
}

/// Reusable fitting state for one dataset.
pub struct Fitter<'a> {
    seen: &'a SeenSet,
    pool: PoolView<'a>,
    hp: &'a Hyperparams,
    candidates: Option<&'a CandidateSets>,
    sums: DataSums,
}

impl<'a> Fitter<'a> {
    pub fn new(
        seen: &'a SeenSet,
        pool: PoolView<'a>,
        hp: &'a Hyperparams,
        candidates: Option<&'a CandidateSets>,
    ) -> Result<Self> {
        hp.check()?;
        validate_view(seen, pool)?;
        if hp.uses_pool() && pool.n() == 0 {
            return Err(Error::invalid(
                "transductive fit needs a non-empty unlabelled pool",
            ));
        }
        if let Some(c) = candidates {
            check_candidates(c, pool.n(), pool.q())?;
        }
        let sums = DataSums::new(seen, hp.uses_pool().then_some(pool));
        Ok(Fitter {
            seen,
            pool,
            hp,
            candidates,
            sums,
        })
    }

    pub fn initial(&self) -> Result<Projection> {
        self.sums
            .system(None, 0.0, self.hp.beta, self.hp.loss_mode)
            .solve()
    }

    fn losses(&self, w: &Projection) -> Result<DenseMatrix> {
        loss_matrix(w, self.pool, self.hp.loss_mode, self.candidates)
    }

    fn solve_against(&self, eta: &[EtaRow], alpha_t: f64) -> Result<Projection> {
        self.sums
            .system(
                Some((self.pool, eta)),
                alpha_t,
                self.hp.beta,
                self.hp.loss_mode,
            )
            .solve()
    }

    /// One iteration from `w`: losses, subgradient, assembly and solve.
    pub fn step(&self, w: &Projection, alpha_t: f64) -> Result<(Vec<EtaRow>, Projection)> {
        let eta = eta_rows(&self.losses(w)?, self.hp.tie_tol)?;
        let next = self.solve_against(&eta, alpha_t)?;
        Ok((eta, next))
    }

    pub fn run(&self) -> Result<(Projection, FitTrace)> {
        self.run_observed(|_| {})
    }

    /// Runs the loop until the arg-min assignments stop changing or
    /// `max_iters` is reached, calling `observer` after each iteration.
    pub fn run_observed(
        &self,
        mut observer: impl FnMut(&StepView<'_>),
    ) -> Result<(Projection, FitTrace)> {
        let hp = self.hp;
        let w0 = self.initial()?;
        if !hp.uses_pool() {
            let objective = objective_from_parts(&w0, self.seen, 0.0, 0.0, hp.beta, hp.loss_mode)?;
            let record = IterationRecord {
                t: 0,
                alpha_t: 0.0,
                objective,
                changed: 0,
                delta_w: w0.matrix().norm(),
            };
            let zero = Projection(DenseMatrix::zeros(w0.d(), w0.k()));
            observer(&StepView {
                record: &record,
                previous: &zero,
                current: &w0,
                eta: &[],
            });
            return Ok((
                w0,
                FitTrace {
                    records: vec![record],
                    termination: Termination::WConverged,
                },
            ));
        }

        let mut w = w0;
        let mut losses = self.losses(&w)?;
        let mut assigned = assignments(&losses);
        let mut records = Vec::new();
        let mut termination = Termination::MaxIters;
        for t in 0..hp.max_iters {
            let alpha_t = hp.alpha_at(t);
            let eta = eta_rows(&losses, hp.tie_tol)?;
            let next = self.solve_against(&eta, alpha_t)?;
            let next_losses = self.losses(&next)?;
            let next_assigned = assignments(&next_losses);
            let changed = assigned
                .iter()
                .zip(&next_assigned)
                .filter(|(a, b)| a != b)
                .count();
            let delta_w = frobenius_distance(next.matrix(), w.matrix())?;
            let objective = objective_from_parts(
                &next,
                self.seen,
                row_min_sum(&next_losses)?,
                alpha_t,
                hp.beta,
                hp.loss_mode,
            )?;
            let record = IterationRecord {
                t,
                alpha_t,
                objective,
                changed,
                delta_w,
            };
            observer(&StepView {
                record: &record,
                previous: &w,
                current: &next,
                eta: &eta,
            });
            records.push(record);

            let relative = delta_w / next.matrix().norm().max(f64::MIN_POSITIVE);
            w = next;
            losses = next_losses;
            assigned = next_assigned;
            if changed == 0 {
                termination = if relative <= hp.w_tol {
                    Termination::WConverged
                } else {
                    Termination::AssignmentsStable
                };
                break;
            }
        }
        Ok((
            w,
            FitTrace {
                records,
                termination,
            },
        ))
    }
}

/// Full fit: inductive initialisation followed by the transductive loop.
pub fn fit(
    seen: &SeenSet,
    pool: PoolView<'_>,
    hp: &Hyperparams,
    candidates: Option<&CandidateSets>,
) -> Result<(Projection, FitTrace)> {
    Fitter::new(seen, pool, hp, candidates)?.run()
}

pub fn predict(
    w: &Projection,
    x: &DVector<f64>,
    prototypes: &DenseMatrix,
    mode: LossMode,
    candidates: Option<&[usize]>,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    let all: Vec<usize>;
    let labels = match candidates {
        Some(c) => c,
        None => {
            all = (0..prototypes.nrows()).collect();
            &all
        }
    };
    for &j in labels {
        if j >= prototypes.nrows() {
            return Err(Error::invalid(format!("candidate {j} out of range")));
        }
        let loss = bidirectional_loss(w, x, &prototypes.row(j).transpose(), mode)?;
        match best {
            Some((bj, bl)) if loss > bl || (loss == bl && j > bj) => {}
            _ => best = Some((j, loss)),
        }
    }
    best.map(|(j, _)| j).ok_or(Error::EmptyCandidates(0))
}

/// Arg-min label for every row of `features`.
pub fn predict_all(
    w: &Projection,
    features: &DenseMatrix,
    prototypes: &DenseMatrix,
    mode: LossMode,
) -> Result<Vec<usize>> {
    let losses = loss_matrix_raw(w, features, prototypes, mode, None)?;
    assignments(&losses)
        .into_iter()
        .enumerate()
        .map(|(i, a)| a.ok_or(Error::EmptyCandidates(i)))
        .collect()
}

/// Every label ordered by increasing loss, ties towards the lower index.
pub fn rank_all(
    w: &Projection,
    features: &DenseMatrix,
    prototypes: &DenseMatrix,
    mode: LossMode,
) -> Result<Vec<Vec<usize>>> {
    let losses = loss_matrix_raw(w, features, prototypes, mode, None)?;
    Ok(losses
        .row_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order
        })
        .collect())
}
