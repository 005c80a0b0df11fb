//! Shared fixtures for the criterion benches.

use dipl_core::numlin::DenseMatrix;
use dipl_core::synth::{generate, SynthData, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic problem with `n` samples per domain spread over `classes` classes each.
pub fn problem(n: usize, d: usize, k: usize, classes: usize) -> SynthData {
    generate(&SynthSpec {
        d,
        k,
        p: classes,
        q: classes,
        samples_per_class: n.div_ceil(classes),
        noise_sigma: 0.1,
        seed: 7,
        ..Default::default()
    })
    .expect("valid synthetic parameters")
}

/// Random Sylvester instance: SPD `a` (d x d), PSD `b` (k x k), dense `c`.
pub fn sylvester_instance(
    d: usize,
    k: usize,
    seed: u64,
) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform =
        |r: usize, c: usize| DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let g = uniform(d + 4, d);
    let h = uniform(k, k);
    let c = uniform(d, k);
    let a = g.tr_mul(&g) + DenseMatrix::identity(d, d) * 0.01;
    (a, h.tr_mul(&h), c)
}
