//! Spans, traces, sampling rates and the propagated ancestor context.
//!
//! Everything here is an immutable value type. Sampling rates come in two
//! flavours: exponent mode (`2^-j`, the default, which keeps estimates of
//! integer quantities integral) and general mode (any real in `(0, 1]`).

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

/// Errors raised while constructing model values.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("empty span set")]
    EmptySpanSet,
    #[error("exponent out of range: {0} (max {max})", max = SamplingRate::MAX_EXPONENT)]
    ExponentOutOfRange(u32),
    #[error("sampling rate out of range: {0}")]
    RateOutOfRange(f64),
    #[error("identifier must be nonzero")]
    ZeroId,
    #[error("span belongs to trace {found}, expected {expected}")]
    TraceIdMismatch { expected: TraceId, found: TraceId },
    #[error("general-mode rate {0} cannot be decided from a shared random index")]
    IndexWithGeneralRate(f64),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

/// 128-bit trace identifier. Never zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TraceId(u128);

impl TraceId {
    pub fn new(value: u128) -> Result<Self, ModelError> {
        if value == 0 {
            return Err(ModelError::ZeroId);
        }
        Ok(TraceId(value))
    }

    pub fn get(self) -> u128 {
        self.0
    }
}

impl fmt::Display for TraceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for TraceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TraceId({self})")
    }
}

/// 64-bit span identifier. Never zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpanId(u64);

impl SpanId {
    pub fn new(value: u64) -> Result<Self, ModelError> {
        if value == 0 {
            return Err(ModelError::ZeroId);
        }
        Ok(SpanId(value))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl fmt::Debug for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpanId({self})")
    }
}

#[derive(Clone, Copy, Debug)]
enum RateRepr {
    Exponent(u8),
    General(f64),
}

/// A span sampling rate in `(0, 1]`.
///
/// Equality, ordering and hashing go by numeric value, so `2^-1` in exponent
/// mode and `0.5` in general mode are the same rate.
#[derive(Clone, Copy)]
pub struct SamplingRate(RateRepr);

impl SamplingRate {
    /// Largest supported exponent; `2^-62` is exact in an `f64` and the
    /// exponent fits a single byte.
    pub const MAX_EXPONENT: u8 = 62;

    pub const ONE: SamplingRate = SamplingRate(RateRepr::Exponent(0));

    /// Rate `2^-exponent`.
    pub fn from_exponent(exponent: u32) -> Result<Self, ModelError> {
        if exponent > u32::from(Self::MAX_EXPONENT) {
            return Err(ModelError::ExponentOutOfRange(exponent));
        }
        Ok(SamplingRate(RateRepr::Exponent(exponent as u8)))
    }

    /// Arbitrary rate in `(0, 1]`.
    pub fn general(value: f64) -> Result<Self, ModelError> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(ModelError::RateOutOfRange(value));
        }
        Ok(SamplingRate(RateRepr::General(value)))
    }

    pub fn value(self) -> f64 {
        match self.0 {
            RateRepr::Exponent(j) => pow2_neg(j),
            RateRepr::General(v) => v,
        }
    }

    /// The exponent `j` if this rate is in exponent mode.
    pub fn exponent(self) -> Option<u8> {
        match self.0 {
            RateRepr::Exponent(j) => Some(j),
            RateRepr::General(_) => None,
        }
    }

    pub fn is_exponent_mode(self) -> bool {
        self.exponent().is_some()
    }

    /// `1 / rate` as an integer, available in exponent mode.
    pub fn reciprocal_int(self) -> Option<i64> {
        self.exponent().map(|j| 1i64 << j)
    }

    /// Single-byte encoding of an exponent-mode rate.
    pub fn encode(self) -> Option<u8> {
        self.exponent()
    }

    pub fn decode(byte: u8) -> Result<Self, ModelError> {
        Self::from_exponent(u32::from(byte))
    }
}

/// Exact `2^-j` for `j <= 62`.
pub(crate) fn pow2_neg(j: u8) -> f64 {
    debug_assert!(j <= 63);
    f64::from_bits(u64::from(1023 - u16::from(j)) << 52)
}

impl PartialEq for SamplingRate {
    fn eq(&self, other: &Self) -> bool {
        self.value() == other.value()
    }
}

impl Eq for SamplingRate {}

impl PartialOrd for SamplingRate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SamplingRate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value().total_cmp(&other.value())
    }
}

impl Hash for SamplingRate {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.value().to_bits().hash(state);
    }
}

impl fmt::Debug for SamplingRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            RateRepr::Exponent(j) => write!(f, "2^-{j}"),
            RateRepr::General(v) => write!(f, "{v}"),
        }
    }
}

impl fmt::Display for SamplingRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Context linking a span to its closest known ancestor.
///
/// When intermediate spans are not sampled the link skips over them and
/// records how many were skipped. `Ancestor { span_id: None, .. }` marks a
/// span none of whose ancestors were sampled; `skipped` then counts every
/// ancestor up to and including the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AncestorLink {
    Root,
    Parent(SpanId),
    Ancestor {
        span_id: Option<SpanId>,
        skipped: u16,
    },
}

impl AncestorLink {
    /// Link to `span_id` across `skipped` unsampled spans, collapsing to a
    /// direct parent link when nothing was skipped.
    pub fn across(span_id: SpanId, skipped: u16) -> Self {
        if skipped == 0 {
            AncestorLink::Parent(span_id)
        } else {
            AncestorLink::Ancestor {
                span_id: Some(span_id),
                skipped,
            }
        }
    }

    pub fn target(&self) -> Option<SpanId> {
        match *self {
            AncestorLink::Root => None,
            AncestorLink::Parent(id) => Some(id),
            AncestorLink::Ancestor { span_id, .. } => span_id,
        }
    }

    pub fn skipped(&self) -> u16 {
        match *self {
            AncestorLink::Ancestor { skipped, .. } => skipped,
            _ => 0,
        }
    }

    pub fn is_root(&self) -> bool {
        matches!(self, AncestorLink::Root)
    }
}

/// One observed operation.
#[derive(Clone, Debug, PartialEq)]
pub struct Span {
    pub trace_id: TraceId,
    pub span_id: SpanId,
    pub link: AncestorLink,
    pub service: String,
    pub operation: String,
    pub start_micros: i64,
    pub duration_micros: u64,
    pub error: bool,
    pub rate: SamplingRate,
    pub attributes: BTreeMap<String, String>,
}

impl Span {
    /// A span with empty operation, zero timing and no attributes.
    pub fn new(
        trace_id: TraceId,
        span_id: SpanId,
        link: AncestorLink,
        service: impl Into<String>,
        rate: SamplingRate,
    ) -> Self {
        Span {
            trace_id,
            span_id,
            link,
            service: service.into(),
            operation: String::new(),
            start_micros: 0,
            duration_micros: 0,
            error: false,
            rate,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_error(mut self, error: bool) -> Self {
        self.error = error;
        self
    }
}

/// The shared random number of a trace, either as a real `r` in `[0, 1)` or
/// as the index `i` of the interval `[2^-(i+1), 2^-i)` containing it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SharedRandom {
    Real(f64),
    Index(u8),
}

/// All spans of one trace, with the trace's shared random number.
#[derive(Clone, Debug, PartialEq)]
pub struct FullTrace {
    pub trace_id: TraceId,
    pub spans: Vec<Span>,
    pub shared: SharedRandom,
}

impl FullTrace {
    pub fn new(trace_id: TraceId, spans: Vec<Span>, shared: SharedRandom) -> Self {
        FullTrace {
            trace_id,
            spans,
            shared,
        }
    }

    /// The same trace with every span's rate replaced by `rate_of(span)`.
    pub fn with_rates(&self, rate_of: impl Fn(&Span) -> SamplingRate) -> FullTrace {
        let spans = self
            .spans
            .iter()
            .map(|s| Span {
                rate: rate_of(s),
                ..s.clone()
            })
            .collect();
        FullTrace {
            spans,
            ..self.clone()
        }
    }
}

/// A nonempty set of consistently sampled spans of one trace.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTrace {
    trace_id: TraceId,
    spans: Vec<Span>,
}

impl SampledTrace {
    pub fn new(trace_id: TraceId, spans: Vec<Span>) -> Result<Self, ModelError> {
        if spans.is_empty() {
            return Err(ModelError::EmptySpanSet);
        }
        if let Some(bad) = spans.iter().find(|s| s.trace_id != trace_id) {
            return Err(ModelError::TraceIdMismatch {
                expected: trace_id,
                found: bad.trace_id,
            });
        }
        Ok(SampledTrace { trace_id, spans })
    }

    /// Builds a sample from spans, taking the trace id from the first span.
    pub fn from_spans(spans: Vec<Span>) -> Result<Self, ModelError> {
        let first = spans.first().ok_or(ModelError::EmptySpanSet)?;
        Self::new(first.trace_id, spans)
    }

    pub fn trace_id(&self) -> TraceId {
        self.trace_id
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn into_spans(self) -> Vec<Span> {
        self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Distinct sampling rates of a span set in strictly ascending order.
///
/// Index 0 of [`RateLadder::threshold`] is the sentinel `p_0 = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RateLadder {
    rates: Vec<SamplingRate>,
}

impl RateLadder {
    pub fn rates(&self) -> &[SamplingRate] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn min(&self) -> SamplingRate {
        self.rates[0]
    }

    pub fn max(&self) -> SamplingRate {
        self.rates[self.rates.len() - 1]
    }

    /// `p_i` for `i` in `0..=n`, with `p_0 = 0`.
    pub fn threshold(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.rates[i - 1].value()
        }
    }

    /// True when every rung is an exponent-mode rate.
    pub fn all_exponent_mode(&self) -> bool {
        self.rates.iter().all(|r| r.is_exponent_mode())
    }
}

pub fn build_rate_ladder(spans: &[Span]) -> Result<RateLadder, ModelError> {
    if spans.is_empty() {
        return Err(ModelError::EmptySpanSet);
    }
    let mut rates: Vec<SamplingRate> = spans.iter().map(|s| s.rate).collect();
    rates.sort();
    rates.dedup();
    Ok(RateLadder { rates })
}

/// A problem found by [`validate_trace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoSpans,
    TraceIdMismatch(SpanId),
    DuplicateSpanId(SpanId),
    NoRoot,
    MultipleRoots(Vec<SpanId>),
    SelfLink(SpanId),
    DanglingLink { span: SpanId, target: SpanId },
    Cycle(SpanId),
    InvalidLink(SpanId),
    SkippedSaturated(SpanId),
    RateOutOfRange(SpanId),
    IndexWithGeneralRate(SpanId),
    SharedRandomOutOfRange,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSpans => write!(f, "trace has no spans"),
            Violation::TraceIdMismatch(s) => write!(f, "span {s} carries a foreign trace id"),
            Violation::DuplicateSpanId(s) => write!(f, "duplicate span id {s}"),
            Violation::NoRoot => write!(f, "no root"),
            Violation::MultipleRoots(ids) => write!(f, "multiple roots ({} spans)", ids.len()),
            Violation::SelfLink(s) => write!(f, "cycle: span {s} links to itself"),
            Violation::DanglingLink { span, target } => {
                write!(f, "span {span} links to unknown span {target}")
            }
            Violation::Cycle(s) => write!(f, "cycle through span {s}"),
            Violation::InvalidLink(s) => {
                write!(f, "span {s} has an ancestor link with zero skipped")
            }
            Violation::SkippedSaturated(s) => {
                write!(f, "span {s} skipped count saturated at {}", u16::MAX)
            }
            Violation::RateOutOfRange(s) => write!(f, "span {s} rate out of range"),
            Violation::IndexWithGeneralRate(s) => write!(
                f,
                "span {s} has a general-mode rate but the trace carries only a shared random index"
            ),
            Violation::SharedRandomOutOfRange => write!(f, "shared random out of range"),
        }
    }
}

/// Checks the structural invariants of a full trace. An empty report means
/// the trace is valid.
pub fn validate_trace(trace: &FullTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    if trace.spans.is_empty() {
        out.push(Violation::NoSpans);
        return out;
    }
    match trace.shared {
        SharedRandom::Real(r) if !(0.0..1.0).contains(&r) => {
            out.push(Violation::SharedRandomOutOfRange)
        }
        SharedRandom::Index(i) if i > SamplingRate::MAX_EXPONENT => {
            out.push(Violation::SharedRandomOutOfRange)
        }
        _ => {}
    }

    let mut by_id: HashMap<SpanId, &Span> = HashMap::with_capacity(trace.spans.len());
    for span in &trace.spans {
        if span.trace_id != trace.trace_id {
            out.push(Violation::TraceIdMismatch(span.span_id));
        }
        if by_id.insert(span.span_id, span).is_some() {
            out.push(Violation::DuplicateSpanId(span.span_id));
        }
        let v = span.rate.value();
        if !(v > 0.0 && v <= 1.0) {
            out.push(Violation::RateOutOfRange(span.span_id));
        }
        if matches!(trace.shared, SharedRandom::Index(_)) && !span.rate.is_exponent_mode() {
            out.push(Violation::IndexWithGeneralRate(span.span_id));
        }
        match span.link {
            AncestorLink::Ancestor { skipped: 0, .. } => {
                out.push(Violation::InvalidLink(span.span_id))
            }
            AncestorLink::Ancestor {
                skipped: u16::MAX, ..
            } => out.push(Violation::SkippedSaturated(span.span_id)),
            _ => {}
        }
    }

    let roots: Vec<SpanId> = trace
        .spans
        .iter()
        .filter(|s| s.link.is_root())
        .map(|s| s.span_id)
        .collect();
    match roots.len() {
        0 => out.push(Violation::NoRoot),
        1 => {}
        _ => out.push(Violation::MultipleRoots(roots)),
    }

    let mut reported_cycle: HashSet<SpanId> = HashSet::new();
    for span in &trace.spans {
        let Some(target) = span.link.target() else {
            continue;
        };
        if target == span.span_id {
            out.push(Violation::SelfLink(span.span_id));
            reported_cycle.insert(span.span_id);
            continue;
        }
        if !by_id.contains_key(&target) {
            out.push(Violation::DanglingLink {
                span: span.span_id,
                target,
            });
        }
    }

    // Walk each chain upwards; a walk longer than the span count revisits a span.
    for span in &trace.spans {
        if reported_cycle.contains(&span.span_id) {
            continue;
        }
        let mut current = span;
        let mut steps = 0usize;
        while let Some(target) = current.link.target() {
            match by_id.get(&target) {
                Some(next) => current = next,
                None => break,
            }
            steps += 1;
            if steps > trace.spans.len() {
                if reported_cycle.insert(current.span_id) {
                    out.push(Violation::Cycle(span.span_id));
                }
                break;
            }
            if reported_cycle.contains(&current.span_id) {
                break;
            }
        }
    }
    out
}
