//! Enumeration oracles for the training objective and toy-task metrics.

mod bound;
mod eval;
mod sweep;

pub use bound::{
    estimate_ao_vs_dce, exact_order_marginal, tiny_sequence, verify_unified_bound, BoundReport,
    EquivalenceReport, Estimate, SpanMarginal, MAX_ENUM_SPAN,
};
pub use eval::{evaluate, EvalReport, RecordFailure, TextErrors};
pub use sweep::{run_sweep, ModelSource, SweepOptions, SweepReport};
