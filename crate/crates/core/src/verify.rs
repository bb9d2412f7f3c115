//! Randomized verification of the estimator's guarantees against the exact
//! oracle: unbiasedness, the closed-form variance, the variance ordering
//! against the naive estimator, dominance under raised rates, agreement of
//! the count/indicator shortcuts with the general algorithm, and integrality.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::estimator::{
    estimate_indicator, estimate_matching_spans, estimate_naive, estimate_new,
    variance_naive_exact, variance_new_exact,
};
use crate::model::{
    AncestorLink, FullTrace, SampledTrace, SamplingRate, SharedRandom, Span, SpanId, TraceId,
};
use crate::oracle::{enumerate_outcomes, exact_moments, Exact, OutcomeTable};
use crate::quantity::{
    a_calls_b, call_depth, check_quantity_on_chain, const_one, has_a_not_b, is_error,
    matching_span_count, service_is, span_count, trace_has, QuantitySpec, SpanPredicate,
};
use crate::value::{close, exact_int, Value};

/// Tolerance for comparisons that leave exact arithmetic.
pub const FLOAT_TOLERANCE: f64 = 1e-9;

pub type EstimatorFn = fn(&SampledTrace, &QuantitySpec) -> Value;

const SERVICES: [&str; 3] = ["A", "B", "C"];

/// Random tree with `1..=max_spans` spans, exponent-mode rates `2^-j` with
/// `j <= max_exponent`, services from {A, B, C}.
pub fn random_trace<R: Rng + ?Sized>(rng: &mut R, max_spans: usize, max_exponent: u8) -> FullTrace {
    random_trace_with(rng, max_spans, |rng| {
        SamplingRate::from_exponent(rng.gen_range(0..=u32::from(max_exponent))).expect("in range")
    })
}

/// Like [`random_trace`] but with general-mode rates drawn from a coarse
/// grid in `(0, 1]`, so ties still occur.
pub fn random_general_trace<R: Rng + ?Sized>(rng: &mut R, max_spans: usize) -> FullTrace {
    random_trace_with(rng, max_spans, |rng| {
        SamplingRate::general(f64::from(rng.gen_range(1..=40u32)) / 40.0).expect("in range")
    })
}

fn random_trace_with<R, F>(rng: &mut R, max_spans: usize, mut rate: F) -> FullTrace
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> SamplingRate,
{
    let trace_id = TraceId::new(rng.gen::<u128>() | 1).expect("nonzero");
    let n = rng.gen_range(1..=max_spans.max(1));
    let spans = (0..n)
        .map(|k| {
            let link = if k == 0 {
                AncestorLink::Root
            } else {
                AncestorLink::Parent(SpanId::new(rng.gen_range(0..k) as u64 + 1).expect("nonzero"))
            };
            let service = SERVICES[rng.gen_range(0..SERVICES.len())];
            let r = rate(rng);
            Span::new(
                trace_id,
                SpanId::new(k as u64 + 1).expect("nonzero"),
                link,
                service,
                r,
            )
            .with_error(rng.gen_bool(0.3))
        })
        .collect();
    FullTrace::new(trace_id, spans, SharedRandom::Real(0.0))
}

/// Trace from the two-span worked example: parent at 1/2, child at 1/4.
pub fn worked_example() -> FullTrace {
    let tid = TraceId::new(0x25).expect("nonzero");
    let p = SpanId::new(1).expect("nonzero");
    let c = SpanId::new(2).expect("nonzero");
    let half = SamplingRate::from_exponent(1).expect("in range");
    let quarter = SamplingRate::from_exponent(2).expect("in range");
    FullTrace::new(
        tid,
        vec![
            Span::new(tid, p, AncestorLink::Root, "A", half),
            Span::new(tid, c, AncestorLink::Parent(p), "B", quarter),
        ],
        SharedRandom::Real(0.0),
    )
}

/// The built-in quantities exercised by the suite.
pub fn shipped_quantities() -> Vec<QuantitySpec> {
    vec![
        span_count(),
        const_one(),
        matching_span_count("error-spans", is_error()),
        matching_span_count("A-spans", service_is("A")),
        trace_has("has-B", service_is("B")),
        trace_has("has-error", is_error()),
        call_depth(),
        a_calls_b("A", "B"),
        has_a_not_b("A", "B"),
    ]
}

/// Predicates of the matching-count quantities, by quantity name.
fn count_predicates() -> Vec<(&'static str, SpanPredicate)> {
    vec![
        ("error-spans", is_error()),
        ("A-spans", service_is("A")),
        ("span-count", std::sync::Arc::new(|_: &Span| true)),
    ]
}

/// Deliberately biased estimator: weights every sample by its own minimum
/// rate, as if it were complete.
pub fn biased_full_weighting(sample: &SampledTrace, quantity: &QuantitySpec) -> Value {
    let min = sample
        .spans()
        .iter()
        .map(|s| s.rate)
        .min()
        .unwrap_or(SamplingRate::ONE);
    match (
        exact_int(quantity.evaluate(sample.spans())),
        min.reciprocal_int(),
    ) {
        (Some(q), Some(w)) => q
            .checked_mul(w)
            .map_or(Value::Real(q as f64 * w as f64), Value::Int),
        _ => Value::Real(quantity.evaluate(sample.spans()) / min.value()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Check {
    Unbiased,
    NaiveUnbiased,
    Variance,
    VarianceGeneral,
    Ordering,
    Dominance,
    Specialization,
    Integrality,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::Unbiased,
        Check::NaiveUnbiased,
        Check::Variance,
        Check::VarianceGeneral,
        Check::Ordering,
        Check::Dominance,
        Check::Specialization,
        Check::Integrality,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Check::Unbiased => "expectation equals true value",
            Check::NaiveUnbiased => "naive expectation equals true value",
            Check::Variance => "enumerated variance equals closed form",
            Check::VarianceGeneral => "closed-form variance with general rates",
            Check::Ordering => "variance not above naive for bounded quantities",
            Check::Dominance => "raising rates never increases variance",
            Check::Specialization => "count and indicator shortcuts agree",
            Check::Integrality => "integer inputs give integer estimates",
        }
    }
}

/// A failed check with everything needed to reproduce it.
#[derive(Clone, Debug)]
pub struct Counterexample {
    pub check: Check,
    pub case: u64,
    pub quantity: String,
    pub trace: FullTrace,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "check failed: {} (case {}, quantity {})",
            self.check.label(),
            self.case,
            self.quantity
        )?;
        writeln!(f, "  expected {}, got {}", self.expected, self.actual)?;
        write!(f, "  trace {} spans:", self.trace.trace_id)?;
        for s in &self.trace.spans {
            let parent = match s.link.target() {
                Some(id) => format!("<-{}", id.get()),
                None => "root".to_string(),
            };
            write!(
                f,
                " [{} {} {} rate {}{}]",
                s.span_id.get(),
                s.service,
                parent,
                s.rate,
                if s.error { " err" } else { "" }
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub run: u64,
    pub failed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub cases: u64,
    pub tallies: BTreeMap<Check, Tally>,
    /// Failures in case order.
    pub failures: Vec<Counterexample>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn tally(&self, check: Check) -> Tally {
        self.tallies.get(&check).copied().unwrap_or_default()
    }

    fn record(&mut self, check: Check, failure: Option<Counterexample>) {
        let t = self.tallies.entry(check).or_default();
        t.run += 1;
        if let Some(f) = failure {
            t.failed += 1;
            self.failures.push(f);
        }
    }

    fn merge(&mut self, other: VerifyReport) {
        for (k, v) in other.tallies {
            let t = self.tallies.entry(k).or_default();
            t.run += v.run;
            t.failed += v.failed;
        }
        self.failures.extend(other.failures);
    }
}

#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub seed: u64,
    pub cases: u64,
    pub max_spans: usize,
    pub max_exponent: u8,
    pub checks: Vec<Check>,
    pub estimator: EstimatorFn,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            cases: 1000,
            max_spans: 8,
            max_exponent: 6,
            checks: Check::ALL.to_vec(),
            estimator: estimate_new,
        }
    }
}

fn fmt_value(v: Value) -> String {
    v.to_string()
}

fn le(a: Value, b: Value) -> bool {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x <= y,
        _ => a.to_f64() <= b.to_f64() || close(a.to_f64(), b.to_f64(), FLOAT_TOLERANCE),
    }
}

struct CaseContext<'a> {
    config: &'a VerifyConfig,
    case: u64,
    trace: FullTrace,
    table: OutcomeTable,
    rng: ChaCha8Rng,
}

impl CaseContext<'_> {
    fn fail(
        &self,
        check: Check,
        q: &QuantitySpec,
        trace: &FullTrace,
        expected: String,
        actual: String,
    ) -> Option<Counterexample> {
        Some(Counterexample {
            check,
            case: self.case,
            quantity: q.name().to_string(),
            trace: trace.clone(),
            expected,
            actual,
        })
    }
}

fn check_unbiased(ctx: &CaseContext, q: &QuantitySpec) -> Option<Counterexample> {
    let est = ctx.config.estimator;
    let (mean, _) = exact_moments(&ctx.table, |o| est(&o.sampled, q));
    let truth = q.evaluate(&ctx.trace.spans);
    let ok = match exact_int(truth) {
        Some(t) if mean.is_rational() => mean.matches(Value::Int(t), 0.0),
        _ => mean.matches_f64(truth, FLOAT_TOLERANCE),
    };
    (!ok).then(|| {
        ctx.fail(
            Check::Unbiased,
            q,
            &ctx.trace,
            format!("{truth}"),
            mean.to_string(),
        )
    })?
}

fn check_naive_unbiased(ctx: &CaseContext, q: &QuantitySpec) -> Option<Counterexample> {
    let (mean, _) = exact_moments(&ctx.table, |o| estimate_naive(&o.sampled, q, o.is_complete));
    let truth = q.evaluate(&ctx.trace.spans);
    let ok = match exact_int(truth) {
        Some(t) if mean.is_rational() => mean.matches(Value::Int(t), 0.0),
        _ => mean.matches_f64(truth, FLOAT_TOLERANCE),
    };
    (!ok).then(|| {
        ctx.fail(
            Check::NaiveUnbiased,
            q,
            &ctx.trace,
            format!("{truth}"),
            mean.to_string(),
        )
    })?
}

fn check_variance(ctx: &CaseContext, q: &QuantitySpec) -> Option<Counterexample> {
    let est = ctx.config.estimator;
    let (_, var) = exact_moments(&ctx.table, |o| est(&o.sampled, q));
    let closed = variance_new_exact(&ctx.trace, q);
    (!var.matches(closed, FLOAT_TOLERANCE)).then(|| {
        ctx.fail(
            Check::Variance,
            q,
            &ctx.trace,
            fmt_value(closed),
            var.to_string(),
        )
    })?
}

fn check_variance_general(ctx: &mut CaseContext, q: &QuantitySpec) -> Option<Counterexample> {
    let trace = random_general_trace(&mut ctx.rng, ctx.config.max_spans);
    let table = enumerate_outcomes(&trace).expect("nonempty trace");
    let est = ctx.config.estimator;
    let (mean, var) = exact_moments(&table, |o| est(&o.sampled, q));
    let closed = variance_new_exact(&trace, q);
    let truth = q.evaluate(&trace.spans);
    if !var.matches(closed, FLOAT_TOLERANCE) {
        return ctx.fail(
            Check::VarianceGeneral,
            q,
            &trace,
            fmt_value(closed),
            var.to_string(),
        );
    }
    if !mean.matches_f64(truth, FLOAT_TOLERANCE) {
        return ctx.fail(
            Check::VarianceGeneral,
            q,
            &trace,
            format!("mean {truth}"),
            format!("mean {mean}"),
        );
    }
    None
}

fn check_ordering(ctx: &CaseContext, q: &QuantitySpec) -> Option<Option<Counterexample>> {
    if !check_quantity_on_chain(q, &ctx.trace).bounded_holds() {
        return None;
    }
    let new = variance_new_exact(&ctx.trace, q);
    let naive = variance_naive_exact(&ctx.trace, q);
    Some(if le(new, naive) {
        None
    } else {
        ctx.fail(
            Check::Ordering,
            q,
            &ctx.trace,
            format!("<= {naive}"),
            fmt_value(new),
        )
    })
}

fn check_dominance(
    ctx: &CaseContext,
    q: &QuantitySpec,
    raised: &FullTrace,
) -> Option<Option<Counterexample>> {
    if !q.claims_monotonic() {
        return None;
    }
    let low = variance_new_exact(&ctx.trace, q);
    let high = variance_new_exact(raised, q);
    Some(if le(high, low) {
        None
    } else {
        ctx.fail(
            Check::Dominance,
            q,
            raised,
            format!("<= {low}"),
            fmt_value(high),
        )
    })
}

fn check_specialization(ctx: &CaseContext, q: &QuantitySpec) -> Option<Option<Counterexample>> {
    let predicate = count_predicates()
        .into_iter()
        .find(|(n, _)| *n == q.name())
        .map(|(_, p)| p);
    let indicator = q.is_indicator() && q.claims_monotonic();
    if predicate.is_none() && !indicator {
        return None;
    }
    for o in &ctx.table.outcomes {
        let general = estimate_new(&o.sampled, q);
        let special = match &predicate {
            Some(p) => estimate_matching_spans(&o.sampled, p),
            None => match estimate_indicator(&o.sampled, q) {
                Ok(v) => v,
                Err(e) => {
                    return Some(ctx.fail(
                        Check::Specialization,
                        q,
                        &ctx.trace,
                        fmt_value(general),
                        e.to_string(),
                    ))
                }
            },
        };
        if general != special || general.is_int() != special.is_int() {
            return Some(ctx.fail(
                Check::Specialization,
                q,
                &ctx.trace,
                fmt_value(general),
                fmt_value(special),
            ));
        }
    }
    Some(None)
}

fn check_integrality(ctx: &CaseContext, q: &QuantitySpec) -> Option<Counterexample> {
    for o in &ctx.table.outcomes {
        let all_int = o
            .sampled
            .spans()
            .iter()
            .all(|s| exact_int(s.rate.value().recip()).is_some());
        if !all_int {
            continue;
        }
        for v in [
            estimate_new(&o.sampled, q),
            estimate_naive(&o.sampled, q, o.is_complete),
        ] {
            if !v.is_int() {
                return ctx.fail(
                    Check::Integrality,
                    q,
                    &ctx.trace,
                    "integer".into(),
                    fmt_value(v),
                );
            }
        }
    }
    None
}

/// Same trace with a random subset of spans moved to larger rates.
pub fn raise_random_rates<R: Rng + ?Sized>(rng: &mut R, trace: &FullTrace) -> FullTrace {
    let choices: Vec<Option<u32>> = trace
        .spans
        .iter()
        .map(|s| {
            let j = u32::from(s.rate.exponent().unwrap_or(0));
            rng.gen_bool(0.5).then(|| rng.gen_range(0..=j))
        })
        .collect();
    let mut out = trace.clone();
    for (span, c) in out.spans.iter_mut().zip(choices) {
        if let Some(j) = c {
            span.rate = SamplingRate::from_exponent(j).expect("in range");
        }
    }
    out
}

fn run_case(config: &VerifyConfig, case: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(case);
    let trace = if case == 0 {
        worked_example()
    } else {
        random_trace(&mut rng, config.max_spans, config.max_exponent)
    };
    let table = enumerate_outcomes(&trace).expect("nonempty trace");
    let raised = raise_random_rates(&mut rng, &trace);
    let mut ctx = CaseContext {
        config,
        case,
        trace,
        table,
        rng,
    };
    let mut report = VerifyReport {
        cases: 1,
        ..VerifyReport::default()
    };
    for q in shipped_quantities() {
        for &check in &config.checks {
            match check {
                Check::Unbiased => report.record(check, check_unbiased(&ctx, &q)),
                Check::NaiveUnbiased => report.record(check, check_naive_unbiased(&ctx, &q)),
                Check::Variance => report.record(check, check_variance(&ctx, &q)),
                Check::VarianceGeneral => {
                    report.record(check, check_variance_general(&mut ctx, &q))
                }
                Check::Ordering => {
                    if let Some(r) = check_ordering(&ctx, &q) {
                        report.record(check, r)
                    }
                }
                Check::Dominance => {
                    if let Some(r) = check_dominance(&ctx, &q, &raised) {
                        report.record(check, r)
                    }
                }
                Check::Specialization => {
                    if let Some(r) = check_specialization(&ctx, &q) {
                        report.record(check, r)
                    }
                }
                Check::Integrality => report.record(check, check_integrality(&ctx, &q)),
            }
        }
    }
    report
}

/// Runs `config.cases` cases; case 0 is the two-span worked example, the
/// rest are random traces. Deterministic for a given seed regardless of
/// thread count.
pub fn run_verify(config: &VerifyConfig) -> VerifyReport {
    let per_case: Vec<VerifyReport> = (0..config.cases)
        .into_par_iter()
        .map(|c| run_case(config, c))
        .collect();
    let mut total = VerifyReport::default();
    for r in per_case {
        total.cases += r.cases;
        total.merge(r);
    }
    total
}

/// Convenience for the exact expectation of a sample-level estimator.
pub fn expectation_of(trace: &FullTrace, estimator: impl Fn(&SampledTrace) -> Value) -> Exact {
    let table = enumerate_outcomes(trace).expect("nonempty trace");
    exact_moments(&table, |o| estimator(&o.sampled)).0
}
