//! Synthetic datasets with a known projection, and an exhaustive solver for
//! small instances of the min-min objective.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossMode, PoolView, SeenSet, UnseenPool};
use crate::numlin::{solve_sylvester_eig, sym_eig, DenseMatrix};

/// Largest number of assignments [`enumerate_oracle`] will visit.
pub const ORACLE_CAP: u64 = 1_000_000;

const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d: usize,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub prototype_separation: f64,
    /// Length of a fixed bias added to every unseen-class feature vector.
    pub domain_shift: f64,
    /// Number of well-separated prototype groups, if any.
    pub grouped: Option<usize>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 16,
            k: 8,
            p: 6,
            q: 4,
            samples_per_class: 20,
            noise_sigma: 0.1,
            prototype_separation: 1.0,
            domain_shift: 0.0,
            grouped: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn check(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 || self.q == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid("synthetic counts must all be at least 1"));
        }
        if self.d < self.k {
            return Err(Error::invalid(format!(
                "need d >= k, got d={} k={}",
                self.d, self.k
            )));
        }
        if self.noise_sigma.is_nan()
            || self.noise_sigma < 0.0
            || self.domain_shift.is_nan()
            || self.domain_shift < 0.0
        {
            return Err(Error::invalid("noise and shift must be non-negative"));
        }
        if self.prototype_separation.is_nan() || self.prototype_separation <= 0.0 {
            return Err(Error::invalid("prototype separation must be positive"));
        }
        if self.grouped == Some(0) {
            return Err(Error::invalid("group count must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub seen: SeenSet,
    /// Carries truth labels.
    pub unseen: UnseenPool,
    /// Ground-truth projection with orthonormal columns (`d×k`).
    pub w_true: DenseMatrix,
    /// Unit direction of the unseen-domain bias.
    pub shift_direction: DVector<f64>,
    /// Group of each class (seen first, then unseen) when grouped.
    pub class_groups: Option<Vec<usize>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Draws `count` points, point `i` around `center_of(i)`, with pairwise distance >= `min_dist`.
fn separated_points(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    scale: f64,
    min_dist: f64,
    center_of: impl Fn(usize) -> DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let center = center_of(i);
        let mut placed = false;
        for _ in 0..MAX_DRAWS {
            let cand = &center + gaussian_vec(rng, dim, scale);
            if out.iter().all(|o| (o - &cand).norm() >= min_dist) {
                out.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {count} prototypes {min_dist} apart in {dim} dimensions"
            )));
        }
    }
    Ok(out)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.check()?;
    let SynthSpec { d, k, p, q, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sep = spec.prototype_separation;
    // Typical pairwise distance of N(0, s²I_k) draws is s·sqrt(2k).
    let spread = 1.5 * sep / (2.0 * k as f64).sqrt();

    let class_groups = spec.grouped.map(|g| {
        (0..p + q)
            .map(|c| if c < p { c % g } else { (c - p) % g })
            .collect::<Vec<_>>()
    });
    let group_centers = match spec.grouped {
        Some(g) => {
            let group_sep = 8.0 * sep;
            let group_spread = 1.5 * group_sep / (2.0 * k as f64).sqrt();
            separated_points(&mut rng, g, k, group_spread, group_sep, |_| {
                DVector::zeros(k)
            })?
        }
        None => vec![DVector::zeros(k)],
    };
    let protos = separated_points(&mut rng, p + q, k, spread, sep, |c| match &class_groups {
        Some(groups) => group_centers[groups[c]].clone(),
        None => group_centers[0].clone(),
    })?;

    let gauss = DenseMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let w_true = gauss.qr().q();
    let shift_direction = {
        let v = gaussian_vec(&mut rng, d, 1.0);
        let n = v.norm();
        v / n
    };

    let to_rows = |vs: &[DVector<f64>]| DenseMatrix::from_fn(vs.len(), k, |i, j| vs[i][j]);
    let seen_protos = to_rows(&protos[..p]);
    let unseen_protos = to_rows(&protos[p..]);

    let sample = |proto: &DVector<f64>, shift: bool, rng: &mut ChaCha8Rng| {
        let mut x = &w_true * proto;
        if spec.noise_sigma > 0.0 {
            x += gaussian_vec(rng, d, spec.noise_sigma);
        }
        if shift {
            x += &shift_direction * spec.domain_shift;
        }
        x
    };
    let n = spec.samples_per_class;
    let mut seen_rows = Vec::with_capacity(p * n);
    let mut seen_labels = Vec::with_capacity(p * n);
    for (c, proto) in protos.iter().enumerate().take(p) {
        for _ in 0..n {
            seen_rows.push(sample(proto, false, &mut rng));
            seen_labels.push(c);
        }
    }
    let mut unseen_rows = Vec::with_capacity(q * n);
    let mut truth = Vec::with_capacity(q * n);
    // interleave unseen classes so the pool is not sorted by label
    for _ in 0..n {
        for c in 0..q {
            unseen_rows.push(sample(&protos[p + c], spec.domain_shift > 0.0, &mut rng));
            truth.push(c);
        }
    }
    let feat = |rows: &[DVector<f64>]| DenseMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(SynthData {
        seen: SeenSet::new(feat(&seen_rows), seen_labels, seen_protos)?,
        unseen: UnseenPool::new(feat(&unseen_rows), unseen_protos, Some(truth))?,
        w_true,
        shift_direction,
        class_groups,
    })
}

/// Splits off a random `fraction` of labelled samples as a seen-class test set.
pub fn hold_out(
    seen: &SeenSet,
    fraction: f64,
    seed: u64,
) -> Result<(SeenSet, DenseMatrix, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "hold-out fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test: Vec<bool> = (0..seen.n())
        .map(|_| rng.random::<f64>() < fraction)
        .collect();
    let rows = |want: bool| -> Vec<usize> { (0..seen.n()).filter(|&i| test[i] == want).collect() };
    let (train, held) = (rows(false), rows(true));
    let pick = |idx: &[usize]| {
        DenseMatrix::from_fn(idx.len(), seen.d(), |i, j| seen.features[(idx[i], j)])
    };
    let labels = |idx: &[usize]| idx.iter().map(|&i| seen.labels[i]).collect::<Vec<_>>();
    Ok((
        SeenSet::new(pick(&train), labels(&train), seen.prototypes.clone())?,
        pick(&held),
        labels(&held),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub objective: f64,
    pub assignment: Vec<usize>,
}

fn loss(w: &DenseMatrix, x: &[f64], y: &[f64], mode: LossMode) -> f64 {
    let (d, k) = w.shape();
    let mut total = 0.0;
    if mode.forward() {
        for c in 0..k {
            let mut proj = 0.0;
            for e in 0..d {
                proj += w[(e, c)] * x[e];
            }
            total += (proj - y[c]).powi(2);
        }
    }
    if mode.reverse() {
        for e in 0..d {
            let mut rec = 0.0;
            for c in 0..k {
                rec += w[(e, c)] * y[c];
            }
            total += (x[e] - rec).powi(2);
        }
    }
    total
}

/// Assignment number `idx` in lexicographic order, first sample most significant.
fn decode(mut idx: u64, n: usize, q: usize) -> Vec<usize> {
    let mut assignment = vec![0usize; n];
    for slot in assignment.iter_mut().rev() {
        *slot = (idx % q as u64) as usize;
        idx /= q as u64;
    }
    assignment
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Global minimum of the normalised objective by trying every hard assignment
/// of unlabelled samples to classes and solving the resulting quadratic exactly.
pub fn enumerate_oracle(
    seen: &SeenSet,
    pool: PoolView<'_>,
    alpha: f64,
    beta: f64,
    mode: LossMode,
) -> Result<OracleResult> {
    let (n, q) = (pool.n(), pool.q());
    let total = (0..n).try_fold(1u64, |acc, _| {
        acc.checked_mul(q as u64).filter(|&v| v <= ORACLE_CAP)
    });
    let total = total.ok_or_else(|| {
        Error::invalid(format!(
            "{q}^{n} assignments exceed the oracle cap of {ORACLE_CAP}"
        ))
    })?;
    if beta.is_nan() || beta <= 0.0 || !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid("oracle needs beta > 0 and alpha in [0, 1)"));
    }
    let (d, k) = (seen.d(), seen.k());
    let fwd = if mode.forward() { 1.0 } else { 0.0 };
    let rev = if mode.reverse() { 1.0 } else { 0.0 };

    let seen_x = rows_of(&seen.features);
    let seen_y: Vec<Vec<f64>> = seen
        .labels
        .iter()
        .map(|&l| seen.prototypes.row(l).iter().copied().collect())
        .collect();
    let pool_x = rows_of(pool.features);
    let pool_y = rows_of(pool.prototypes);

    let outer = |a: &[f64], b: &[f64]| DenseMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j]);
    let mut a = DenseMatrix::identity(d, d) * beta;
    let mut b_seen = DenseMatrix::zeros(k, k);
    let mut c_seen = DenseMatrix::zeros(d, k);
    for (x, y) in seen_x.iter().zip(&seen_y) {
        a += outer(x, x) * ((1.0 - alpha) * fwd);
        b_seen += outer(y, y) * ((1.0 - alpha) * rev);
        c_seen += outer(x, y) * ((1.0 - alpha) * (fwd + rev));
    }
    for x in &pool_x {
        a += outer(x, x) * (alpha * fwd);
    }
    let eig_a = sym_eig(&a)?;
    let proto_outer: Vec<DenseMatrix> = pool_y.iter().map(|y| outer(y, y)).collect();

    let evaluate = |idx: u64| -> Result<(f64, u64)> {
        let assignment = decode(idx, n, q);
        let mut b = b_seen.clone();
        let mut c = c_seen.clone();
        for (i, &j) in assignment.iter().enumerate() {
            b += &proto_outer[j] * (alpha * rev);
            c += outer(&pool_x[i], &pool_y[j]) * (alpha * (fwd + rev));
        }
        let w = solve_sylvester_eig(&eig_a, &sym_eig(&b)?, &c)?;
        let seen_total: f64 = seen_x
            .iter()
            .zip(&seen_y)
            .map(|(x, y)| loss(&w, x, y, mode))
            .sum();
        let pool_total: f64 = if alpha > 0.0 {
            pool_x
                .iter()
                .map(|x| {
                    pool_y
                        .iter()
                        .map(|y| loss(&w, x, y, mode))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum()
        } else {
            0.0
        };
        let norm2: f64 = w.iter().map(|v| v * v).sum();
        Ok((
            (1.0 - alpha) * seen_total + alpha * pool_total + beta * norm2,
            idx,
        ))
    };

    let best = (0..total).into_par_iter().map(evaluate).try_reduce(
        || (f64::INFINITY, u64::MAX),
        |x, y| {
            Ok(if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) {
                y
            } else {
                x
            })
        },
    )?;
    Ok(OracleResult {
        objective: best.0,
        assignment: decode(best.1, n, q),
    })
}
