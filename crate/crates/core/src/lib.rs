//! Streaming data balancing.
//!
//! Learns a weight `q` in `[0, Q]` for every labeled example so that the
//! reweighted data hits target attribute prevalences (representation) and
//! has no correlation between sensitive attributes and labels (association),
//! while keeping the average weight at `eta`. The weights come from a
//! stochastic dual method that touches each example once per pass and keeps
//! only `2m(c+1) + 1` numbers of state.

pub mod audit;
pub mod bias;
pub mod checkpoint;
pub mod error;
pub mod io;
pub mod oracle;
pub mod sampler;
pub mod solver;
pub mod synth;
pub mod types;

pub use audit::{data_ab, data_rb, model_ab, model_rb, weighted_pearson, AuditReport, PairGroup, PredictionRecord};
pub use bias::{bias_vector, BiasVector};
pub use error::{BalanceError, Result};
pub use oracle::{solve_exact, ExactSolution};
pub use sampler::{subsample, SampleDecision, SampleMode};
pub use solver::{fit, fit_from, primal_objective, search_eta, DualLossSample, EtaSearch, FitOptions};
pub use types::{validate_example, BalanceSpec, Example, Hyperparams, Schedule, SolverState, WeightedExample};
