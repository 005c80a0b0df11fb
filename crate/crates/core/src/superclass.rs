//! Superclasses: k-means over all class prototypes, a fit at superclass level,
//! and per-sample candidate sets that restrict the final fit.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FitTrace, Hyperparams, LossMode, PoolView, SeenSet};
use crate::numlin::DenseMatrix;
use crate::solver::{self, loss_matrix_raw, Projection};

pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone)]
pub struct KMeans {
    /// One center per row.
    pub centers: DenseMatrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(points: &DenseMatrix, i: usize, centers: &DenseMatrix, c: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(centers.row(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn seed_centers(points: &DenseMatrix, r: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let n = points.nrows();
    let mut chosen = Vec::with_capacity(r);
    let first = rand::Rng::random_range(rng, 0..n);
    chosen.push(first);
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points, i, points, first)).collect();
    while chosen.len() < r {
        let next = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen one
            Err(_) => (0..n).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(points, i, points, next));
        }
    }
    DenseMatrix::from_fn(r, points.ncols(), |c, j| points[(chosen[c], j)])
}

fn inertia_of(points: &DenseMatrix, centers: &DenseMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(points, i, centers, c))
        .sum()
}

fn assign(points: &DenseMatrix, centers: &DenseMatrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = (0..points.nrows())
        .map(|i| {
            let (best, dist) = (0..centers.nrows())
                .map(|c| (c, sq_dist(points, i, centers, c)))
                .fold(
                    (0, f64::INFINITY),
                    |acc, cur| if cur.1 < acc.1 { cur } else { acc },
                );
            inertia += dist;
            best
        })
        .collect();
    (assignment, inertia)
}

/// Moves the point farthest from its center in the largest cluster into each empty cluster.
fn repair_empty(points: &DenseMatrix, centers: &DenseMatrix, assignment: &mut [usize], r: usize) {
    loop {
        let mut sizes = vec![0usize; r];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..r)
            .max_by_key(|&c| (sizes[c], std::cmp::Reverse(c)))
            .unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let farthest = (0..points.nrows())
            .filter(|&i| assignment[i] == largest)
            .map(|i| (i, sq_dist(points, i, centers, largest)))
            .fold(
                (usize::MAX, -1.0),
                |acc, cur| if cur.1 > acc.1 { cur } else { acc },
            )
            .0;
        assignment[farthest] = empty;
    }
}

fn update_centers(points: &DenseMatrix, assignment: &[usize], r: usize) -> DenseMatrix {
    let mut sums = DenseMatrix::zeros(r, points.ncols());
    let mut counts = vec![0usize; r];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        let mut row = sums.row_mut(c);
        row += points.row(i);
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let mut row = sums.row_mut(c);
            row /= count as f64;
        }
    }
    sums
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &DenseMatrix, r: usize, seed: u64) -> Result<KMeans> {
    let n = points.nrows();
    if r == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    if r > n {
        return Err(Error::invalid(format!(
            "k-means with {r} clusters over {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, r, &mut rng);
    let (mut assignment, _) = assign(points, &centers);
    repair_empty(points, &centers, &mut assignment, r);
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        centers = update_centers(points, &assignment, r);
        let (mut next, _) = assign(points, &centers);
        repair_empty(points, &centers, &mut next, r);
        history.push(inertia_of(points, &centers, &next));
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let inertia = *history.last().unwrap_or(&0.0);
    Ok(KMeans {
        centers,
        assignment,
        inertia,
        inertia_history: history,
    })
}

/// Clusters over the stacked seen-then-unseen prototype table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperclassModel {
    #[serde(skip)]
    pub centers: DenseMatrix,
    /// Seen classes first (`0..p`), then unseen (`p..p+q`).
    pub class_to_cluster: Vec<usize>,
    pub r: usize,
    pub p: usize,
}

impl SuperclassModel {
    pub fn build(
        seen_prototypes: &DenseMatrix,
        unseen_prototypes: &DenseMatrix,
        r: usize,
        seed: u64,
    ) -> Result<Self> {
        let (p, q) = (seen_prototypes.nrows(), unseen_prototypes.nrows());
        let k = seen_prototypes.ncols();
        if unseen_prototypes.ncols() != k {
            return Err(Error::dim("seen and unseen prototypes differ in dimension"));
        }
        let stacked = DenseMatrix::from_fn(p + q, k, |i, j| {
            if i < p {
                seen_prototypes[(i, j)]
            } else {
                unseen_prototypes[(i - p, j)]
            }
        });
        let km = kmeans(&stacked, r, seed)?;
        Ok(SuperclassModel {
            centers: km.centers,
            class_to_cluster: km.assignment,
            r,
            p,
        })
    }

    pub fn seen_cluster(&self, class: usize) -> usize {
        self.class_to_cluster[class]
    }

    pub fn unseen_cluster(&self, class: usize) -> usize {
        self.class_to_cluster[self.p + class]
    }

    pub fn q(&self) -> usize {
        self.class_to_cluster.len() - self.p
    }
}

/// Per-sample sets of admissible unseen labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSets {
    sets: Vec<Vec<usize>>,
}

impl CandidateSets {
    pub fn new(mut sets: Vec<Vec<usize>>) -> Self {
        for set in &mut sets {
            set.sort_unstable();
            set.dedup();
        }
        CandidateSets { sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn stats(&self) -> CandidateStats {
        let sizes: Vec<usize> = self.sets.iter().map(Vec::len).collect();
        CandidateStats {
            samples: sizes.len(),
            mean_size: if sizes.is_empty() {
                0.0
            } else {
                sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
            },
            min_size: sizes.iter().copied().min().unwrap_or(0),
            max_size: sizes.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub samples: usize,
    pub mean_size: f64,
    pub min_size: usize,
    pub max_size: usize,
}

/// Ranks the superclasses that contain at least one unseen class by their
/// center's loss under `w_super` and keeps the unseen classes of the `top_m`
/// best. Sets are never empty; `top_m` at or above the number of such
/// superclasses yields every unseen class.
pub fn build_candidate_sets(
    w_super: &Projection,
    pool: PoolView<'_>,
    model: &SuperclassModel,
    top_m: usize,
    mode: LossMode,
) -> Result<CandidateSets> {
    if top_m == 0 {
        return Err(Error::invalid("top-m must be at least 1"));
    }
    if model.q() != pool.q() {
        return Err(Error::dim(format!(
            "superclass model covers {} unseen classes, pool has {}",
            model.q(),
            pool.q()
        )));
    }
    let mut ranked: Vec<usize> = (0..pool.q()).map(|j| model.unseen_cluster(j)).collect();
    ranked.sort_unstable();
    ranked.dedup();
    let losses = loss_matrix_raw(w_super, pool.features, &model.centers, mode, None)?;
    let mut sets = Vec::with_capacity(pool.n());
    for row in losses.row_iter() {
        let mut order = ranked.clone();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let top = &order[..top_m.min(order.len())];
        sets.push(
            (0..pool.q())
                .filter(|&j| top.contains(&model.unseen_cluster(j)))
                .collect(),
        );
    }
    Ok(CandidateSets { sets })
}

#[derive(Debug, Clone)]
pub struct SuperclassFit {
    pub projection: Projection,
    pub trace: FitTrace,
    /// Projection and trace of the fit over superclass centers.
    pub super_projection: Projection,
    pub super_trace: FitTrace,
    pub model: SuperclassModel,
    pub candidates: CandidateSets,
}

/// Clusters prototypes, fits over superclasses, derives candidate sets and
/// refits over the original prototypes with the subgradient restricted to them.
pub fn fit_with_superclasses(
    seen: &SeenSet,
    pool: PoolView<'_>,
    hp: &Hyperparams,
) -> Result<SuperclassFit> {
    let r = hp
        .superclass_r
        .ok_or_else(|| Error::invalid("superclass count not set"))?;
    let model = SuperclassModel::build(&seen.prototypes, pool.prototypes, r, hp.seed)?;

    let super_labels = seen.labels.iter().map(|&l| model.seen_cluster(l)).collect();
    let super_seen = SeenSet::new(seen.features.clone(), super_labels, model.centers.clone())?;
    let super_pool = PoolView {
        features: pool.features,
        prototypes: &model.centers,
    };
    let (super_projection, super_trace) = solver::fit(&super_seen, super_pool, hp, None)?;

    let candidates = build_candidate_sets(
        &super_projection,
        pool,
        &model,
        hp.candidate_top_m,
        hp.loss_mode,
    )?;
    let (projection, trace) = solver::fit(seen, pool, hp, Some(&candidates))?;
    Ok(SuperclassFit {
        projection,
        trace,
        super_projection,
        super_trace,
        model,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_one_point_per_cluster() {
        let pts = DenseMatrix::from_row_slice(3, 2, &[0., 0., 1., 5., -2., 3.]);
        let km = kmeans(&pts, 3, 1).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut got: Vec<(i64, i64)> = km
            .centers
            .row_iter()
            .map(|r| (r[0] as i64, r[1] as i64))
            .collect();
        got.sort();
        assert_eq!(got, vec![(-2, 3), (0, 0), (1, 5)]);
    }

    #[test]
    fn kmeans_two_blobs() {
        let eps = 0.01;
        let pts = DenseMatrix::from_row_slice(
            6,
            2,
            &[
                eps,
                0.,
                -eps,
                0.,
                0.,
                eps,
                10. + eps,
                10.,
                10. - eps,
                10.,
                10.,
                10. + eps,
            ],
        );
        for seed in 0..10 {
            let km = kmeans(&pts, 2, seed).unwrap();
            let mut centers: Vec<(f64, f64)> =
                km.centers.row_iter().map(|r| (r[0], r[1])).collect();
            centers.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert!((centers[0].0).abs() <= eps && (centers[0].1).abs() <= eps);
            assert!((centers[1].0 - 10.).abs() <= eps && (centers[1].1 - 10.).abs() <= eps);
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = DenseMatrix::from_row_slice(3, 2, &[0., 0., 3., 0., 0., 6.]);
        let km = kmeans(&pts, 1, 0).unwrap();
        assert!((km.centers[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((km.centers[(0, 1)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn kmeans_bad_r() {
        let pts = DenseMatrix::zeros(2, 2);
        assert!(kmeans(&pts, 3, 0).is_err());
        assert!(kmeans(&pts, 0, 0).is_err());
    }

    #[test]
    fn kmeans_duplicate_points() {
        let pts = DenseMatrix::from_row_slice(4, 1, &[1., 1., 1., 2.]);
        let km = kmeans(&pts, 3, 4).unwrap();
        let mut sizes = [0; 3];
        for &a in &km.assignment {
            sizes[a] += 1;
        }
        assert!(sizes.iter().all(|&s| s > 0));
        assert!(km.inertia.abs() < 1e-15);
    }

    fn two_group_model() -> (SuperclassModel, DenseMatrix) {
        // seen: 0 near origin; unseen: 0 near origin, 1 far away
        let seen = DenseMatrix::from_row_slice(1, 2, &[0., 0.1]);
        let unseen = DenseMatrix::from_row_slice(2, 2, &[0.1, 0., 10., 10.]);
        (
            SuperclassModel::build(&seen, &unseen, 2, 0).unwrap(),
            unseen,
        )
    }

    #[test]
    fn candidates_follow_best_cluster() {
        let (model, unseen) = two_group_model();
        let w = Projection::new(DenseMatrix::identity(2, 2)).unwrap();
        let x = DenseMatrix::from_row_slice(2, 2, &[9.5, 10., 0., 0.05]);
        let pool = PoolView {
            features: &x,
            prototypes: &unseen,
        };
        let c = build_candidate_sets(&w, pool, &model, 1, LossMode::Bidirectional).unwrap();
        assert_eq!(c.set(0), &[1]);
        assert_eq!(c.set(1), &[0]);
        let full = build_candidate_sets(&w, pool, &model, 2, LossMode::Bidirectional).unwrap();
        assert!(full.sets().iter().all(|s| s == &[0, 1]));
    }

    #[test]
    fn seen_only_superclasses_are_not_ranked() {
        let seen = DenseMatrix::from_row_slice(1, 2, &[-10., -10.]);
        let unseen = DenseMatrix::from_row_slice(2, 2, &[10., 10., 10.5, 10.]);
        let model = SuperclassModel::build(&seen, &unseen, 2, 0).unwrap();
        let w = Projection::new(DenseMatrix::identity(2, 2)).unwrap();
        // closest to the seen-only cluster, which must be skipped
        let x = DenseMatrix::from_row_slice(1, 2, &[-10., -9.]);
        let pool = PoolView {
            features: &x,
            prototypes: &unseen,
        };
        let c = build_candidate_sets(&w, pool, &model, 1, LossMode::Bidirectional).unwrap();
        assert_eq!(c.set(0), &[0, 1]);
        assert_eq!(c.stats().min_size, 2);
    }
}
