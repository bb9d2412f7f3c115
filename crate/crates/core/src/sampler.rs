//! Consistent sampling decisions, the downsampling function, shared random
//! generation and rate-limited rate selection.

use std::collections::{HashMap, HashSet};

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::model::{
    pow2_neg, validate_trace, AncestorLink, FullTrace, ModelError, SampledTrace, SamplingRate,
    SharedRandom, Span, SpanId, TraceId,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("non-monotonic timestamp: {now} < {last}")]
    NonMonotonicTimestamp { now: i64, last: i64 },
    #[error("desired rate out of range: {0}")]
    RateOutOfRange(f64),
    #[error("invalid rate limiter parameter: {0}")]
    InvalidLimiter(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Draws the index `i` of the interval `[2^-(i+1), 2^-i)` holding a uniform
/// random number, as the leading-zero count of a uniform 64-bit word.
///
/// `P(i = k) = 2^-(k+1)` for `k < 62`; the tail is clamped to 62.
pub fn draw_shared_index<R: RngCore + ?Sized>(rng: &mut R) -> u8 {
    (rng.next_u64().leading_zeros() as u8).min(SamplingRate::MAX_EXPONENT)
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Deterministic shared random number in `[0, 1)` derived from a trace id.
pub fn shared_random_from_trace_id(trace_id: TraceId) -> f64 {
    let id = trace_id.get();
    let hi = (id >> 64) as u64;
    let lo = id as u64;
    let mixed = fmix64(lo ^ fmix64(hi).rotate_left(31) ^ 0x9e37_79b9_7f4a_7c15);
    (mixed >> 11) as f64 * pow2_neg(53)
}

/// A span with rate `rate` is sampled iff `r < rate`.
pub fn sample_decision(r: f64, rate: SamplingRate) -> bool {
    r < rate.value()
}

/// Integer form of [`sample_decision`]: with `r` in `[2^-(i+1), 2^-i)` a span
/// with rate `2^-j` is sampled iff `i >= j`. `None` for general-mode rates,
/// which the index alone cannot decide.
pub fn sample_decision_indexed(index: u8, rate: SamplingRate) -> Option<bool> {
    rate.exponent().map(|j| index >= j)
}

/// Spans with rate strictly above `threshold`, relinked to their nearest
/// surviving ancestor.
pub fn downsample(spans: &[Span], threshold: f64) -> Vec<Span> {
    downsample_with(spans, threshold, |s| s.rate)
}

/// Keeps the spans `σ` with `threshold < rate_of(σ)`.
///
/// Survivors whose linked ancestor is dropped are relinked past it, so the
/// result is what the sampler would have emitted had it sampled at
/// `threshold` directly: applying this twice with thresholds `a <= b` equals
/// applying it once with `b`.
pub fn downsample_with<F>(spans: &[Span], threshold: f64, rate_of: F) -> Vec<Span>
where
    F: Fn(&Span) -> SamplingRate,
{
    let kept: HashSet<SpanId> = spans
        .iter()
        .filter(|s| threshold < rate_of(s).value())
        .map(|s| s.span_id)
        .collect();
    if kept.len() == spans.len() {
        return spans.to_vec();
    }
    let dropped: HashMap<SpanId, &Span> = spans
        .iter()
        .filter(|s| !kept.contains(&s.span_id))
        .map(|s| (s.span_id, s))
        .collect();

    spans
        .iter()
        .filter(|s| kept.contains(&s.span_id))
        .map(|s| Span {
            link: relink(s.link, &kept, &dropped),
            ..s.clone()
        })
        .collect()
}

fn relink(
    link: AncestorLink,
    kept: &HashSet<SpanId>,
    dropped: &HashMap<SpanId, &Span>,
) -> AncestorLink {
    let mut link = link;
    let mut skipped: u16 = 0;
    // Bounded by the number of dropped spans; guards against cyclic input.
    for _ in 0..=dropped.len() {
        let (target, extra) = match link {
            AncestorLink::Root if skipped == 0 => return AncestorLink::Root,
            AncestorLink::Root => {
                return AncestorLink::Ancestor {
                    span_id: None,
                    skipped,
                }
            }
            AncestorLink::Ancestor {
                span_id: None,
                skipped: k,
            } => {
                return AncestorLink::Ancestor {
                    span_id: None,
                    skipped: skipped.saturating_add(k),
                }
            }
            AncestorLink::Parent(id) => (id, 0),
            AncestorLink::Ancestor {
                span_id: Some(id),
                skipped: k,
            } => (id, k),
        };
        let through = skipped.saturating_add(extra);
        if kept.contains(&target) {
            return AncestorLink::across(target, through);
        }
        match dropped.get(&target) {
            Some(ancestor) => {
                skipped = through.saturating_add(1);
                link = ancestor.link;
            }
            // Unknown ancestor: keep pointing at it.
            None => return AncestorLink::across(target, through),
        }
    }
    link
}

/// Probability that the whole span set is sampled: the minimum rate.
pub fn probability_complete(spans: &[Span]) -> Result<SamplingRate, ModelError> {
    spans
        .iter()
        .map(|s| s.rate)
        .min()
        .ok_or(ModelError::EmptySpanSet)
}

/// Applies the trace's shared random number to every span. Returns `None`
/// when no span is sampled.
pub fn run_trace_sampling(trace: &FullTrace) -> Result<Option<SampledTrace>, ModelError> {
    let violations = validate_trace(trace);
    if let Some(v) = violations.first() {
        return Err(ModelError::InvalidTrace(v.to_string()));
    }
    let sampled = match trace.shared {
        SharedRandom::Real(r) => downsample(&trace.spans, r),
        // r in [2^-(i+1), 2^-i) decides exponent rates exactly like its lower end.
        SharedRandom::Index(i) => downsample(&trace.spans, pow2_neg(i + 1)),
    };
    if sampled.is_empty() {
        return Ok(None);
    }
    Ok(Some(SampledTrace::new(trace.trace_id, sampled)?))
}

/// Rate-limiter state: an exponentially weighted average of the gap between
/// consecutive spans, turned into a desired rate `min(1, gap * limit)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateLimiterState {
    pub limit_per_second: f64,
    pub ewma_gap_seconds: f64,
    pub ewma_alpha: f64,
    pub last_timestamp_micros: Option<i64>,
}

impl RateLimiterState {
    pub const DEFAULT_ALPHA: f64 = 0.2;

    /// Limiter with smoothing 0.2 and prior gap `1 / limit`.
    pub fn new(limit_per_second: f64) -> Result<Self, SamplerError> {
        Self::with_params(
            limit_per_second,
            Self::DEFAULT_ALPHA,
            1.0 / limit_per_second,
        )
    }

    pub fn with_params(
        limit_per_second: f64,
        ewma_alpha: f64,
        prior_gap_seconds: f64,
    ) -> Result<Self, SamplerError> {
        if !(limit_per_second > 0.0 && limit_per_second.is_finite()) {
            return Err(SamplerError::InvalidLimiter("limit must be positive"));
        }
        if !(ewma_alpha > 0.0 && ewma_alpha <= 1.0) {
            return Err(SamplerError::InvalidLimiter("alpha must lie in (0, 1]"));
        }
        if !(prior_gap_seconds >= 0.0 && prior_gap_seconds.is_finite()) {
            return Err(SamplerError::InvalidLimiter(
                "prior gap must be nonnegative",
            ));
        }
        Ok(RateLimiterState {
            limit_per_second,
            ewma_gap_seconds: prior_gap_seconds,
            ewma_alpha,
            last_timestamp_micros: None,
        })
    }

    /// Records a span at `now_micros` and returns the updated state with the
    /// desired sampling rate. The first observation uses the prior gap.
    pub fn observe(&self, now_micros: i64) -> Result<(RateLimiterState, f64), SamplerError> {
        let mut next = *self;
        if let Some(last) = self.last_timestamp_micros {
            if now_micros < last {
                return Err(SamplerError::NonMonotonicTimestamp {
                    now: now_micros,
                    last,
                });
            }
            let gap = (now_micros - last) as f64 * 1e-6;
            next.ewma_gap_seconds =
                self.ewma_alpha * gap + (1.0 - self.ewma_alpha) * self.ewma_gap_seconds;
        }
        next.last_timestamp_micros = Some(now_micros);
        let rho = (next.ewma_gap_seconds * next.limit_per_second).clamp(MIN_DESIRED_RATE, 1.0);
        Ok((next, rho))
    }
}

/// Smallest desired rate handed out; a zero gap would otherwise yield 0.
pub const MIN_DESIRED_RATE: f64 = 1.0 / (1u64 << 62) as f64;

/// Exponent `i` with `rho` in `(2^-(i+1), 2^-i]`, capped at 62.
fn bracket_exponent(rho: f64) -> u8 {
    let mut i = 0u8;
    while i < SamplingRate::MAX_EXPONENT && rho <= pow2_neg(i + 1) {
        i += 1;
    }
    i
}

/// Picks `2^-i` or `2^-(i+1)` around `rho` so that the expected rate is
/// exactly `rho`.
pub fn discretize_rate<R: Rng + ?Sized>(
    rho: f64,
    rng: &mut R,
) -> Result<SamplingRate, SamplerError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(SamplerError::RateOutOfRange(rho));
    }
    let i = bracket_exponent(rho);
    if i == SamplingRate::MAX_EXPONENT && rho <= pow2_neg(i) {
        return Ok(SamplingRate::from_exponent(u32::from(i))?);
    }
    let upper = pow2_neg(i);
    let lower = pow2_neg(i + 1);
    let p_upper = (rho - lower) / (upper - lower);
    let exponent = if p_upper >= 1.0 || rng.gen::<f64>() < p_upper {
        i
    } else {
        i + 1
    };
    Ok(SamplingRate::from_exponent(u32::from(exponent))?)
}

/// Probability with which [`discretize_rate`] returns the larger rate `2^-i`,
/// together with `i`.
pub fn discretize_weights(rho: f64) -> Result<(u8, f64), SamplerError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(SamplerError::RateOutOfRange(rho));
    }
    let i = bracket_exponent(rho);
    let upper = pow2_neg(i);
    let lower = pow2_neg(i + 1);
    Ok((i, ((rho - lower) / (upper - lower)).min(1.0)))
}
