//! DIPL: a transductive zero-shot solver that learns one linear map between visual features and class semantics.
//!
//! A single linear map `W` (features `d` by semantics `k`) is learned so that
//! both `Wᵀx ≈ y` and `Wy ≈ x` hold on labelled seen-class data and, for each
//! unlabelled test sample, against the closest unseen-class prototype. The
//! sum-of-minimums term is handled by repeatedly linearising the minimum and
//! solving the resulting symmetric Sylvester equation.
//!
//! Module map:
//!
//! * [`numlin`]: eigendecomposition, Sylvester solver, Gram accumulation.
//! * [`model`]: datasets, hyperparameters, fit traces.
//! * [`solver`]: losses, subgradients, system assembly, the iterative fit and prediction.
//! * [`superclass`]: k-means superclasses and candidate-restricted fitting.
//! * [`metrics`]: accuracy, hit@k, generalized metrics, class-wise cross-validation.
//! * [`synth`]: synthetic data with known ground truth and an exhaustive oracle.
//! * [`io`]: CSV matrices, label files and dataset manifests.

pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numlin;
pub mod solver;
pub mod superclass;
pub mod synth;

pub use error::{Error, Result};
pub use io::{Dataset, Manifest};
pub use metrics::{GzslReport, MetricsReport};
pub use model::{
    Dims, FitTrace, Hyperparams, IterationRecord, LossMode, MetricMode, PoolView, SeenSet,
    Termination, UnseenPool,
};
pub use numlin::{DenseMatrix, SymEig};
pub use solver::{EtaRow, Projection};
pub use superclass::{CandidateSets, SuperclassFit, SuperclassModel};
pub use synth::{SynthData, SynthSpec};
