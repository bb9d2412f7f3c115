//! Quantity functions over span sets, and the built-in catalog.
//!
//! A quantity maps any nonempty span set to a real number. Whenever a set is
//! indistinguishable from a complete trace the quantity must return the true
//! value for that trace; beyond that, its value on partial sets is free. The
//! `bounded` and `monotonic` claims are caller assertions used only for the
//! variance guarantees; unbiasedness never depends on them.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::model::{build_rate_ladder, AncestorLink, FullTrace, Span, SpanId};
use crate::sampler::downsample;

pub type SpanPredicate = Arc<dyn Fn(&Span) -> bool + Send + Sync>;
pub type SetPredicate = Arc<dyn Fn(&[Span]) -> bool + Send + Sync>;
type Evaluator = Arc<dyn Fn(&[Span]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct QuantitySpec {
    name: String,
    evaluate: Evaluator,
    claims_bounded: bool,
    claims_monotonic: bool,
    indicator: bool,
}

impl QuantitySpec {
    /// A quantity with no bounded/monotonic claims.
    pub fn new<F>(name: impl Into<String>, evaluate: F) -> Self
    where
        F: Fn(&[Span]) -> f64 + Send + Sync + 'static,
    {
        QuantitySpec {
            name: name.into(),
            evaluate: Arc::new(evaluate),
            claims_bounded: false,
            claims_monotonic: false,
            indicator: false,
        }
    }

    pub fn claim_bounded(mut self) -> Self {
        self.claims_bounded = true;
        self
    }

    /// Monotonic quantities are bounded too.
    pub fn claim_monotonic(mut self) -> Self {
        self.claims_monotonic = true;
        self.claims_bounded = true;
        self
    }

    /// Marks the quantity as 0/1-valued.
    pub fn indicator(mut self) -> Self {
        self.indicator = true;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn claims_bounded(&self) -> bool {
        self.claims_bounded
    }

    pub fn claims_monotonic(&self) -> bool {
        self.claims_monotonic
    }

    pub fn is_indicator(&self) -> bool {
        self.indicator
    }

    pub fn evaluate(&self, spans: &[Span]) -> f64 {
        (self.evaluate)(spans)
    }
}

impl fmt::Debug for QuantitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuantitySpec")
            .field("name", &self.name)
            .field("claims_bounded", &self.claims_bounded)
            .field("claims_monotonic", &self.claims_monotonic)
            .field("indicator", &self.indicator)
            .finish()
    }
}

/// Number of traces: 1 for every nonempty set.
pub fn const_one() -> QuantitySpec {
    QuantitySpec::new("const-one", |_| 1.0).claim_monotonic()
}

/// Number of spans.
pub fn span_count() -> QuantitySpec {
    QuantitySpec::new("span-count", |s| s.len() as f64).claim_monotonic()
}

/// Number of spans satisfying `predicate`.
pub fn matching_span_count(name: impl Into<String>, predicate: SpanPredicate) -> QuantitySpec {
    QuantitySpec::new(name, move |s| {
        s.iter().filter(|x| predicate(x)).count() as f64
    })
    .claim_monotonic()
}

/// 0/1 indicator of a trace property. `monotonic` is the caller's claim that
/// the property, once true on a set, stays true on every superset.
pub fn trace_indicator(
    name: impl Into<String>,
    predicate: SetPredicate,
    monotonic: bool,
) -> QuantitySpec {
    let q = QuantitySpec::new(name, move |s| if predicate(s) { 1.0 } else { 0.0 }).indicator();
    if monotonic {
        q.claim_monotonic()
    } else {
        q
    }
}

/// Indicator: some span satisfies `predicate`.
pub fn trace_has(name: impl Into<String>, predicate: SpanPredicate) -> QuantitySpec {
    trace_indicator(
        name,
        Arc::new(move |s: &[Span]| s.iter().any(|x| predicate(x))),
        true,
    )
}

/// Indicator: the set contains service `a` but not service `b`. Not bounded.
pub fn has_a_not_b(a: impl Into<String>, b: impl Into<String>) -> QuantitySpec {
    let (a, b) = (a.into(), b.into());
    let name = format!("{a}-not-{b}");
    trace_indicator(
        name,
        Arc::new(move |s: &[Span]| {
            s.iter().any(|x| x.service == a) && !s.iter().any(|x| x.service == b)
        }),
        false,
    )
}

/// Span predicate: service equals `name`.
pub fn service_is(name: impl Into<String>) -> SpanPredicate {
    let name = name.into();
    Arc::new(move |s: &Span| s.service == name)
}

/// Span predicate: error flag set.
pub fn is_error() -> SpanPredicate {
    Arc::new(|s: &Span| s.error)
}

/// Length of the longest known root-to-span path, counting edges.
///
/// An ancestor link across `k` unsampled spans counts `k + 1` edges. A span
/// linked to an ancestor missing from the set starts a fragment measured
/// from that span. A span with no sampled ancestor at all sits at depth `k`.
///
/// For an average depth, estimate the depth total and the trace count
/// separately. Their ratio is consistent but not unbiased, so no ratio
/// estimator is provided.
pub fn call_depth() -> QuantitySpec {
    QuantitySpec::new("depth", |spans| depth_of(spans) as f64).claim_monotonic()
}

fn depth_of(spans: &[Span]) -> u64 {
    let index: HashMap<SpanId, usize> = spans
        .iter()
        .enumerate()
        .map(|(i, s)| (s.span_id, i))
        .collect();
    let mut memo: Vec<Option<u64>> = vec![None; spans.len()];
    let mut on_path = vec![false; spans.len()];
    let mut best = 0;
    for start in 0..spans.len() {
        // Walk up until a span whose depth is known or decidable, then unwind.
        let mut path: Vec<usize> = Vec::new();
        let mut cur = start;
        let mut depth = loop {
            if let Some(d) = memo[cur] {
                break d;
            }
            match spans[cur].link {
                AncestorLink::Root => break 0,
                AncestorLink::Ancestor {
                    span_id: None,
                    skipped,
                } => break u64::from(skipped),
                AncestorLink::Parent(id)
                | AncestorLink::Ancestor {
                    span_id: Some(id), ..
                } => {
                    match index.get(&id) {
                        Some(&next) if !on_path[next] && next != cur => {
                            on_path[cur] = true;
                            path.push(cur);
                            cur = next;
                        }
                        // Missing ancestor or cyclic links: fragment top.
                        _ => break 0,
                    }
                }
            }
        };
        memo[cur] = Some(depth);
        while let Some(node) = path.pop() {
            on_path[node] = false;
            depth += 1 + u64::from(spans[node].link.skipped());
            memo[node] = Some(depth);
        }
        best = best.max(depth);
    }
    best
}

/// Indicator: the set proves that some span of service `a` is an ancestor of
/// some span of service `b`, following parent and ancestor links between
/// spans present in the set.
pub fn a_calls_b(a: impl Into<String>, b: impl Into<String>) -> QuantitySpec {
    let (a, b) = (a.into(), b.into());
    let name = format!("a-calls-b:{a},{b}");
    trace_indicator(
        name,
        Arc::new(move |spans: &[Span]| proves_call(spans, &a, &b)),
        true,
    )
}

fn proves_call(spans: &[Span], a: &str, b: &str) -> bool {
    let index: HashMap<SpanId, &Span> = spans.iter().map(|s| (s.span_id, s)).collect();
    spans.iter().filter(|s| s.service == b).any(|callee| {
        let mut cur = callee;
        for _ in 0..spans.len() {
            let Some(up) = cur.link.target().and_then(|id| index.get(&id)) else {
                return false;
            };
            if up.service == a {
                return true;
            }
            cur = up;
        }
        false
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainProperty {
    Bounded,
    Monotonic,
}

/// One failure of a chain property: member `subset` (a rung index into
/// [`ChainReport::values`]) against member `superset`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainViolation {
    pub property: ChainProperty,
    pub claimed: bool,
    pub subset: usize,
    pub superset: usize,
    pub subset_value: f64,
    pub superset_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainReport {
    /// `(threshold p_i, q(D(S; p_i)))` for `i = 0..n`, largest set first.
    pub values: Vec<(f64, f64)>,
    /// Every observed failure, claimed or not.
    pub violations: Vec<ChainViolation>,
}

impl ChainReport {
    pub fn bounded_holds(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| v.property == ChainProperty::Bounded)
    }

    pub fn monotonic_holds(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| v.property == ChainProperty::Monotonic)
    }

    /// Failures of properties the quantity claims.
    pub fn claim_violations(&self) -> impl Iterator<Item = &ChainViolation> {
        self.violations.iter().filter(|v| v.claimed)
    }
}

/// `x` lies in `[0, limit]`, or `[limit, 0]` when `limit` is negative.
fn within(x: f64, limit: f64) -> bool {
    if limit >= 0.0 {
        (0.0..=limit).contains(&x)
    } else {
        (limit..=0.0).contains(&x)
    }
}

/// Evaluates `spec` on every nonempty member of the trace's downsampling
/// chain and checks the bounded and monotonic conditions.
pub fn check_quantity_on_chain(spec: &QuantitySpec, trace: &FullTrace) -> ChainReport {
    let Ok(ladder) = build_rate_ladder(&trace.spans) else {
        return ChainReport {
            values: Vec::new(),
            violations: Vec::new(),
        };
    };
    let values: Vec<(f64, f64)> = (0..ladder.len())
        .map(|i| {
            let t = ladder.threshold(i);
            (t, spec.evaluate(&downsample(&trace.spans, t)))
        })
        .collect();

    let mut violations = Vec::new();
    let full = values[0].1;
    for (i, &(_, q)) in values.iter().enumerate().skip(1) {
        if !within(q, 2.0 * full) {
            violations.push(ChainViolation {
                property: ChainProperty::Bounded,
                claimed: spec.claims_bounded(),
                subset: i,
                superset: 0,
                subset_value: q,
                superset_value: full,
            });
        }
    }
    for sup in 0..values.len() {
        for sub in sup + 1..values.len() {
            if !within(values[sub].1, values[sup].1) {
                violations.push(ChainViolation {
                    property: ChainProperty::Monotonic,
                    claimed: spec.claims_monotonic(),
                    subset: sub,
                    superset: sup,
                    subset_value: values[sub].1,
                    superset_value: values[sup].1,
                });
            }
        }
    }
    ChainReport { values, violations }
}
