//! Consistent partial sampling of distributed traces and unbiased
//! estimation of trace quantities from the partially sampled result.
//!
//! Every span carries its own sampling rate; all spans of a trace share one
//! random number, so a span is kept iff that number is below its rate. The
//! [`estimator`] module turns the resulting span subsets into unbiased
//! estimates without knowing whether a trace is complete, and [`oracle`]
//! checks those claims exactly by enumerating all sampling outcomes.

pub mod cli;
pub mod estimator;
pub mod io;
pub mod model;
pub mod oracle;
pub mod quantity;
pub mod sampler;
pub mod simulator;
pub mod value;
pub mod verify;

pub use estimator::{
    composite_estimate, estimate_indicator, estimate_matching_spans, estimate_naive, estimate_new,
    variance_naive_exact, variance_new_exact, EstimateReport, EstimatorError,
};
pub use model::{
    build_rate_ladder, validate_trace, AncestorLink, FullTrace, ModelError, RateLadder,
    SampledTrace, SamplingRate, SharedRandom, Span, SpanId, TraceId,
};
pub use quantity::QuantitySpec;
pub use value::Value;
