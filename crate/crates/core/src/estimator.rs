//! Estimators for trace quantities from consistently sampled span sets.
//!
//! [`estimate_new`] needs no knowledge of whether a trace was sampled
//! completely: it strips the lowest sampling rate of the sample step by step
//! and lets each more complete view correct the extrapolation of the less
//! complete ones. [`estimate_naive`] only counts complete traces.
//!
//! With exponent-mode rates (`2^-j`, `j <= 52`) and integer-valued
//! quantities every weight is an integer, and the estimates are computed in
//! exact 64-bit integer arithmetic. Everything else, and any integer
//! overflow, falls back to `f64`.

use std::collections::HashSet;

use thiserror::Error;

use crate::model::{build_rate_ladder, FullTrace, SampledTrace, SamplingRate, Span, TraceId};
use crate::quantity::{QuantitySpec, SpanPredicate};
use crate::sampler::downsample;
use crate::value::{exact_int, Value};

/// Largest exponent for which the integer path is used.
pub const MAX_INT_EXPONENT: u8 = 52;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EstimatorError {
    #[error("specialization requires monotone indicator")]
    NotMonotoneIndicator,
    #[error("stream not grouped: trace {0} appears more than once")]
    StreamNotGrouped(TraceId),
}

/// Per-rung data of a sample: ascending distinct rates `p'_1 < ... < p'_m`
/// and the quantity on each nested set, `values[j] = q(D(O; p'_j))` with
/// `p'_0 = 0`, so `values[0] = q(O)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RungChain {
    pub rates: Vec<SamplingRate>,
    pub values: Vec<f64>,
}

impl RungChain {
    /// Builds the chain by repeated downsampling of the sample.
    pub fn from_sample(spans: &[Span], quantity: &QuantitySpec) -> Self {
        let mut rates = Vec::new();
        let mut values = Vec::new();
        let mut current = spans.to_vec();
        while let Some(min) = current.iter().map(|s| s.rate).min() {
            values.push(quantity.evaluate(&current));
            rates.push(min);
            current = downsample(&current, min.value());
        }
        RungChain { rates, values }
    }
}

/// Weighted sum `Σ delta_k / rate_k`, exact when possible.
fn weighted_sum(terms: &[(SamplingRate, f64)]) -> Value {
    let exact: Option<Vec<(i64, i64)>> = terms
        .iter()
        .map(|&(rate, delta)| {
            let w = rate
                .reciprocal_int()
                .filter(|_| rate.exponent() <= Some(MAX_INT_EXPONENT))?;
            Some((w, exact_int(delta)?))
        })
        .collect();
    if let Some(exact) = exact {
        let mut acc: i64 = 0;
        let mut ok = true;
        for (w, d) in exact {
            match d.checked_mul(w).and_then(|t| acc.checked_add(t)) {
                Some(next) => acc = next,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Value::Int(acc);
        }
    }
    Value::Real(terms.iter().map(|&(r, d)| d / r.value()).sum())
}

/// Unbiased estimate of `q(S)` from a nonempty consistent sample `O`.
///
/// ```text
/// est ← 0; q_prev ← q(O)
/// loop:
///     p ← min rate in O
///     O ← {σ ∈ O : p < s(σ)}
///     if O = ∅: return est + q_prev / p
///     q_next ← q(O)
///     est ← est + (q_prev − q_next) / p
///     q_prev ← q_next
/// ```
pub fn estimate_new(sample: &SampledTrace, quantity: &QuantitySpec) -> Value {
    let mut terms: Vec<(SamplingRate, f64)> = Vec::new();
    let mut current: Vec<Span> = sample.spans().to_vec();
    let mut q_prev = quantity.evaluate(&current);
    loop {
        let p = match current.iter().map(|s| s.rate).min() {
            Some(p) => p,
            None => unreachable!("sample is nonempty"),
        };
        current = downsample(&current, p.value());
        if current.is_empty() {
            terms.push((p, q_prev));
            return weighted_sum(&terms);
        }
        let q_next = quantity.evaluate(&current);
        terms.push((p, q_prev - q_next));
        q_prev = q_next;
    }
}

/// Complete-trace-only estimate: `q(O) / min rate` if the caller knows the
/// sample is the full trace, else 0.
pub fn estimate_naive(sample: &SampledTrace, quantity: &QuantitySpec, is_complete: bool) -> Value {
    if !is_complete {
        return Value::ZERO;
    }
    let min = sample
        .spans()
        .iter()
        .map(|s| s.rate)
        .min()
        .unwrap_or(SamplingRate::ONE);
    weighted_sum(&[(min, quantity.evaluate(sample.spans()))])
}

/// Matching-span count estimate: the sum of inverse rates of the matching
/// sampled spans.
pub fn estimate_matching_spans(sample: &SampledTrace, predicate: &SpanPredicate) -> Value {
    let terms: Vec<(SamplingRate, f64)> = sample
        .spans()
        .iter()
        .filter(|s| predicate(s))
        .map(|s| (s.rate, 1.0))
        .collect();
    weighted_sum(&terms)
}

/// Estimate for a monotone 0/1 quantity: `1 / p'_k` where `p'_k` is the
/// smallest rate that must still be sampled for the indicator to hold, or 0
/// if it does not hold on the sample.
pub fn estimate_indicator(
    sample: &SampledTrace,
    quantity: &QuantitySpec,
) -> Result<Value, EstimatorError> {
    if !(quantity.is_indicator() && quantity.claims_monotonic()) {
        return Err(EstimatorError::NotMonotoneIndicator);
    }
    let chain = RungChain::from_sample(sample.spans(), quantity);
    if chain.values[0] == 0.0 {
        return Ok(Value::ZERO);
    }
    let k = chain.values.iter().rposition(|&v| v == 1.0).unwrap_or(0);
    Ok(weighted_sum(&[(chain.rates[k], 1.0)]))
}

/// Sum of per-trace estimates over a stream of sampled traces.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub estimate: Value,
    pub per_trace_terms: Option<Vec<(TraceId, Value)>>,
    pub contributing_traces: usize,
    pub warnings: Vec<String>,
}

/// Sums [`estimate_new`] over the samples. Traces with no sampled spans are
/// simply absent and contribute 0.
pub fn composite_estimate<'a, I>(
    samples: I,
    quantity: &QuantitySpec,
    keep_terms: bool,
) -> Result<EstimateReport, EstimatorError>
where
    I: IntoIterator<Item = &'a SampledTrace>,
{
    let mut seen = HashSet::new();
    let mut total = Value::ZERO;
    let mut terms = keep_terms.then(Vec::new);
    let mut count = 0;
    let mut warnings = Vec::new();
    for sample in samples {
        if !seen.insert(sample.trace_id()) {
            return Err(EstimatorError::StreamNotGrouped(sample.trace_id()));
        }
        let est = estimate_new(sample, quantity);
        if !est.is_int() && integer_path_applies(sample, quantity) {
            warnings.push(format!(
                "trace {}: integer overflow, estimate computed in floating point",
                sample.trace_id()
            ));
        }
        let before = total;
        total = total + est;
        if before.is_int() && est.is_int() && !total.is_int() {
            warnings.push("integer overflow in total, switched to floating point".to_string());
        }
        if let Some(t) = terms.as_mut() {
            t.push((sample.trace_id(), est));
        }
        count += 1;
    }
    Ok(EstimateReport {
        estimate: total,
        per_trace_terms: terms,
        contributing_traces: count,
        warnings,
    })
}

fn integer_path_applies(sample: &SampledTrace, quantity: &QuantitySpec) -> bool {
    let chain = RungChain::from_sample(sample.spans(), quantity);
    chain
        .rates
        .iter()
        .all(|r| r.exponent().is_some_and(|j| j <= MAX_INT_EXPONENT))
        && chain.values.iter().all(|&v| exact_int(v).is_some())
}

/// Exact variance of [`estimate_new`] over the sampling randomness, for a
/// fully known trace with ladder `p_1 < ... < p_n`:
///
/// `q(S)²(1/p_n − 1) + Σ_{j<n} (q(S) − q(D(S; p_j)))² (1/p_j − 1/p_{j+1})`
pub fn variance_new_exact(trace: &FullTrace, quantity: &QuantitySpec) -> Value {
    let Ok(ladder) = build_rate_ladder(&trace.spans) else {
        return Value::ZERO;
    };
    let rates = ladder.rates();
    let n = rates.len();
    let q_full = quantity.evaluate(&trace.spans);
    let mut terms: Vec<(f64, SamplingRate, Option<SamplingRate>)> =
        vec![(q_full, rates[n - 1], None)];
    for j in 0..n - 1 {
        let q_j = quantity.evaluate(&downsample(&trace.spans, rates[j].value()));
        terms.push((q_full - q_j, rates[j], Some(rates[j + 1])));
    }
    variance_sum(&terms)
}

/// Exact variance of [`estimate_naive`]: `q(S)² (1/min rate − 1)`.
pub fn variance_naive_exact(trace: &FullTrace, quantity: &QuantitySpec) -> Value {
    let Ok(ladder) = build_rate_ladder(&trace.spans) else {
        return Value::ZERO;
    };
    let q_full = quantity.evaluate(&trace.spans);
    variance_sum(&[(q_full, ladder.min(), None)])
}

/// `Σ d² (1/a − 1/b)` where `b = None` stands for rate 1.
fn variance_sum(terms: &[(f64, SamplingRate, Option<SamplingRate>)]) -> Value {
    let exact = || -> Option<i64> {
        let mut acc: i64 = 0;
        for &(d, a, b) in terms {
            let d = exact_int(d)?;
            let wa = a
                .reciprocal_int()
                .filter(|_| a.exponent() <= Some(MAX_INT_EXPONENT))?;
            let wb = match b {
                Some(b) => b
                    .reciprocal_int()
                    .filter(|_| b.exponent() <= Some(MAX_INT_EXPONENT))?,
                None => 1,
            };
            let term = d.checked_mul(d)?.checked_mul(wa - wb)?;
            acc = acc.checked_add(term)?;
        }
        Some(acc)
    };
    if let Some(v) = exact() {
        return Value::Int(v);
    }
    Value::Real(
        terms
            .iter()
            .map(|&(d, a, b)| d * d * (1.0 / a.value() - 1.0 / b.map_or(1.0, |b| b.value())))
            .sum(),
    )
}

/// The three equivalent closed forms of the estimator, evaluated in `f64`
/// from a [`RungChain`]. Algorithm-form estimates must agree with all three.
pub mod forms {
    use super::RungChain;

    fn inv(chain: &RungChain, j: usize) -> f64 {
        1.0 / chain.rates[j].value()
    }

    /// `q(O)/p'_1 − Σ_{j=1}^{m−1} q(D(O; p'_j)) (1/p'_j − 1/p'_{j+1})`
    pub fn telescoped(chain: &RungChain) -> f64 {
        let m = chain.rates.len();
        let mut est = chain.values[0] * inv(chain, 0);
        for j in 1..m {
            est -= chain.values[j] * (inv(chain, j - 1) - inv(chain, j));
        }
        est
    }

    /// `q(O)/p'_m + Σ_{j=1}^{m−1} (q(O) − q(D(O; p'_j))) (1/p'_j − 1/p'_{j+1})`
    pub fn deviation(chain: &RungChain) -> f64 {
        let m = chain.rates.len();
        let q = chain.values[0];
        let mut est = q * inv(chain, m - 1);
        for j in 1..m {
            est += (q - chain.values[j]) * (inv(chain, j - 1) - inv(chain, j));
        }
        est
    }

    /// `q(D(O; p'_{m−1}))/p'_m + Σ_{j=1}^{m−1} (q(D(O; p'_{j−1})) − q(D(O; p'_j))) / p'_j`
    pub fn increments(chain: &RungChain) -> f64 {
        let m = chain.rates.len();
        let mut est = chain.values[m - 1] * inv(chain, m - 1);
        for j in 1..m {
            est += (chain.values[j - 1] - chain.values[j]) * inv(chain, j - 1);
        }
        est
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AncestorLink, SharedRandom, SpanId};
    use crate::quantity::{
        const_one, is_error, matching_span_count, service_is, span_count, trace_has,
    };

    fn tid(v: u128) -> TraceId {
        TraceId::new(v).unwrap()
    }
    fn sid(v: u64) -> SpanId {
        SpanId::new(v).unwrap()
    }
    fn exp(j: u32) -> SamplingRate {
        SamplingRate::from_exponent(j).unwrap()
    }
    fn sp(id: u64, link: AncestorLink, service: &str, j: u32) -> Span {
        Span::new(tid(1), sid(id), link, service, exp(j))
    }

    fn parent_child() -> Vec<Span> {
        vec![
            sp(1, AncestorLink::Root, "A", 1),
            sp(2, AncestorLink::Parent(sid(1)), "B", 2),
        ]
    }

    fn sample(spans: Vec<Span>) -> SampledTrace {
        SampledTrace::from_spans(spans).unwrap()
    }

    #[test]
    fn worked_example_values() {
        let full = sample(parent_child());
        assert_eq!(estimate_new(&full, &span_count()), Value::Int(6));
        let parent = sample(parent_child()[..1].to_vec());
        assert_eq!(estimate_new(&parent, &span_count()), Value::Int(2));
        assert_eq!(estimate_naive(&full, &span_count(), true), Value::Int(8));
        assert_eq!(estimate_naive(&parent, &span_count(), false), Value::Int(0));
    }

    #[test]
    fn three_rung_example() {
        let spans = vec![
            sp(1, AncestorLink::Root, "a", 1),
            sp(2, AncestorLink::Parent(sid(1)), "b", 1),
            sp(3, AncestorLink::Parent(sid(1)), "c", 3),
        ];
        assert_eq!(estimate_new(&sample(spans), &span_count()), Value::Int(12));
    }

    #[test]
    fn rate_one_single_span() {
        let s = sample(vec![sp(1, AncestorLink::Root, "a", 0)]);
        assert_eq!(estimate_new(&s, &const_one()), Value::Int(1));
        assert_eq!(estimate_naive(&s, &const_one(), true), Value::Int(1));
        assert_eq!(estimate_matching_spans(&s, &service_is("a")), Value::Int(1));
    }

    #[test]
    fn matching_spans_closed_form() {
        let spans = vec![
            sp(1, AncestorLink::Root, "a", 1).with_error(true),
            sp(2, AncestorLink::Parent(sid(1)), "b", 2).with_error(true),
            sp(3, AncestorLink::Parent(sid(1)), "c", 2).with_error(true),
        ];
        let s = sample(spans);
        assert_eq!(estimate_matching_spans(&s, &is_error()), Value::Int(10));
        assert_eq!(
            estimate_new(&s, &matching_span_count("e", is_error())),
            Value::Int(10)
        );
        assert_eq!(
            estimate_matching_spans(&s, &service_is("zzz")),
            Value::Int(0)
        );
    }

    #[test]
    fn indicator_examples() {
        let s = sample(parent_child());
        assert_eq!(
            estimate_indicator(&s, &trace_has("B", service_is("B"))).unwrap(),
            Value::Int(4)
        );
        assert_eq!(
            estimate_indicator(&s, &trace_has("A", service_is("A"))).unwrap(),
            Value::Int(2)
        );
        assert_eq!(
            estimate_indicator(&s, &trace_has("C", service_is("C"))).unwrap(),
            Value::Int(0)
        );
        let err = estimate_indicator(&s, &span_count()).unwrap_err();
        assert_eq!(
            err.to_string(),
            "specialization requires monotone indicator"
        );
    }

    #[test]
    fn composite_sums_and_rejects_duplicates() {
        let empty: Vec<SampledTrace> = Vec::new();
        let r = composite_estimate(&empty, &span_count(), false).unwrap();
        assert_eq!(r.estimate, Value::Int(0));
        assert_eq!(r.contributing_traces, 0);

        let mut a = parent_child();
        let mut b = parent_child();
        for s in &mut b {
            s.trace_id = tid(2);
        }
        let samples = vec![sample(a.clone()), sample(b)];
        let r = composite_estimate(&samples, &span_count(), true).unwrap();
        assert_eq!(r.estimate, Value::Int(12));
        assert_eq!(r.per_trace_terms.as_ref().unwrap().len(), 2);

        a.truncate(1);
        let mixed = vec![samples[0].clone(), sample(a)];
        assert!(matches!(
            composite_estimate(&mixed, &span_count(), false),
            Err(EstimatorError::StreamNotGrouped(_))
        ));
    }

    #[test]
    fn variance_examples() {
        let t = FullTrace::new(tid(1), parent_child(), SharedRandom::Index(0));
        assert_eq!(variance_new_exact(&t, &span_count()), Value::Int(6));
        assert_eq!(variance_naive_exact(&t, &span_count()), Value::Int(12));

        let one = FullTrace::new(
            tid(1),
            vec![sp(1, AncestorLink::Root, "a", 0)],
            SharedRandom::Index(0),
        );
        assert_eq!(variance_new_exact(&one, &span_count()), Value::Int(0));
        assert_eq!(variance_naive_exact(&one, &span_count()), Value::Int(0));

        let zero = trace_has("none", service_is("zzz"));
        assert_eq!(variance_naive_exact(&t, &zero), Value::Int(0));
    }

    #[test]
    fn equal_rates_match_naive_variance() {
        let spans: Vec<Span> = (1..=4)
            .map(|i| {
                let link = if i == 1 {
                    AncestorLink::Root
                } else {
                    AncestorLink::Parent(sid(1))
                };
                sp(i, link, "x", 3)
            })
            .collect();
        let t = FullTrace::new(tid(1), spans, SharedRandom::Index(0));
        assert_eq!(variance_new_exact(&t, &span_count()), Value::Int(16 * 7));
        assert_eq!(
            variance_new_exact(&t, &span_count()),
            variance_naive_exact(&t, &span_count())
        );
    }

    #[test]
    fn general_rates_use_floating_point() {
        let mut spans = parent_child();
        spans[0].rate = SamplingRate::general(0.3).unwrap();
        let s = sample(spans);
        let v = estimate_new(&s, &span_count());
        assert!(!v.is_int());
        assert!((v.to_f64() - (1.0 / 0.25 + 1.0 / 0.3)).abs() < 1e-12);
    }

    #[test]
    fn overflow_falls_back_to_float() {
        let big = QuantitySpec::new("big", |_| 4.0e15);
        let s = sample(vec![sp(1, AncestorLink::Root, "a", 40)]);
        let v = estimate_new(&s, &big);
        assert!(!v.is_int());
        assert!((v.to_f64() - 4.0e15 * 2f64.powi(40)).abs() / v.to_f64() < 1e-12);
        let r = composite_estimate([&s], &big, false).unwrap();
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn forms_agree_on_worked_example() {
        let chain = RungChain::from_sample(&parent_child(), &span_count());
        assert_eq!(chain.values, vec![2.0, 1.0]);
        for f in [forms::telescoped, forms::deviation, forms::increments] {
            assert_eq!(f(&chain), 6.0);
        }
    }
}
