//! Doubly robust estimation of group average treatment effects (GATE) and the
//! average treatment effect (ATE) with cross-fitted nuisances and kernel
//! smoothing of the orthogonal score.

pub mod ate;
pub mod crossfit;
pub mod data;
pub mod error;
pub mod gate;
pub mod kernel;
pub mod learners;
pub mod pipeline;
pub mod rng;
pub mod score;
pub mod sim;
pub mod stats;
pub mod theory;

pub use ate::{averaged_ate, compare_ate, smoothed_ate, AteComparison, AteMethod, AteResult};
pub use crossfit::{cross_fit, support_report, NuisanceConfig, NuisanceFits, SupportReport};
pub use data::{load_csv, ColumnRoles, Dataset, FoldPlan};
pub use error::{Error, Result};
pub use gate::{estimate_gate, select_bandwidth, BandwidthConfig, BandwidthMode, GateCurve, GatePoint, Moderators};
pub use kernel::{Bandwidth, KernelSpec};
pub use learners::{LearnerKind, LearnerSettings};
pub use pipeline::PipelineConfig;
pub use score::{score, ScoreVariant, ScoreVector};
pub use sim::{generate, run_mc, ArmSpec, DgpSpec, McReport, McSpec, TauShape};
pub use theory::{check_config, Diagnostic, RateRange, RateSpec, Regime};
