//! Confounder detection by linear probing of a model's penultimate-layer
//! representation.
//!
//! - [`dataio`]: the run directory format (representations, final layer,
//!   labels, covariates).
//! - [`probes`]: ridge least squares and penalized logistic probes with their
//!   fit scores.
//! - [`conscore`]: per-covariate Con-score reports and permutation tests.
//! - [`simgen`]: simulated validation instances and resampling deconfounding.
//! - [`reduce`]: PCA projection for visualization.

pub mod conscore;
pub mod dataio;
pub mod probes;
pub mod reduce;
pub mod simgen;

pub use conscore::{compute_report, ConScoreEntry, ConScoreOptions, ConScoreReport};
pub use dataio::{load_run, write_run, LoadedRun, RunData};
pub use probes::{ProbeFit, ProbeKind};
