//! Exact reference by enumeration.
//!
//! A trace's sampled set depends only on which ladder interval
//! `[p_i, p_{i+1})` the shared random number falls into, so a trace with `n`
//! distinct rates has exactly `n` nonempty outcomes plus the empty one.
//! Expectations and variances of any estimator are then finite sums. For
//! exponent-mode ladders and integer estimates the sums are evaluated in
//! exact rational arithmetic.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul, CheckedSub};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    build_rate_ladder, FullTrace, ModelError, SampledTrace, SamplingRate, SharedRandom,
};
use crate::sampler::{downsample, run_trace_sampling};
use crate::value::{close, Value};

pub type Rational = Ratio<i128>;

/// One nonempty sampling outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub probability: f64,
    /// Set when both interval ends are exponent-mode rates.
    pub exact_probability: Option<Rational>,
    /// Lower end `p_i` of the interval producing this outcome.
    pub threshold: f64,
    pub sampled: SampledTrace,
    pub is_complete: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeTable {
    pub outcomes: Vec<Outcome>,
    /// Probability that nothing is sampled: `1 − p_n`.
    pub residual_probability: f64,
    pub exact_residual: Option<Rational>,
}

impl OutcomeTable {
    pub fn is_exact(&self) -> bool {
        self.exact_residual.is_some()
    }
}

fn rational_rate(rate: SamplingRate) -> Option<Rational> {
    rate.exponent().map(|j| Rational::new(1, 1i128 << j))
}

fn exact_interval(rates: &[SamplingRate], i: usize) -> Option<Rational> {
    let lo = if i == 0 {
        Rational::from_integer(0)
    } else {
        rational_rate(rates[i - 1])?
    };
    Some(rational_rate(rates[i])? - lo)
}

/// Enumerates the outcomes `D(S; p_i)` for `i = 0..n` with probabilities
/// `p_{i+1} − p_i` (`p_0 = 0`).
pub fn enumerate_outcomes(trace: &FullTrace) -> Result<OutcomeTable, ModelError> {
    let ladder = build_rate_ladder(&trace.spans)?;
    let exact = ladder.all_exponent_mode();
    let mut outcomes = Vec::with_capacity(ladder.len());
    for i in 0..ladder.len() {
        let lo = ladder.threshold(i);
        let hi = ladder.rates()[i];
        let exact_probability = if exact {
            exact_interval(ladder.rates(), i)
        } else {
            None
        };
        let sampled = SampledTrace::new(trace.trace_id, downsample(&trace.spans, lo))?;
        outcomes.push(Outcome {
            probability: hi.value() - lo,
            exact_probability,
            threshold: lo,
            sampled,
            is_complete: i == 0,
        });
    }
    let max = ladder.max();
    Ok(OutcomeTable {
        outcomes,
        residual_probability: 1.0 - max.value(),
        exact_residual: if exact {
            rational_rate(max).map(|m| Rational::from_integer(1) - m)
        } else {
            None
        },
    })
}

/// An exactly computed moment: rational when the whole computation stayed
/// exact, floating point otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exact {
    Rational(Rational),
    Real(f64),
}

impl Exact {
    pub fn to_f64(self) -> f64 {
        match self {
            Exact::Rational(r) => *r.numer() as f64 / *r.denom() as f64,
            Exact::Real(v) => v,
        }
    }

    pub fn is_rational(self) -> bool {
        matches!(self, Exact::Rational(_))
    }

    /// Exact comparison when both sides are exact, else within `tol`.
    pub fn matches(self, value: Value, tol: f64) -> bool {
        match (self, value) {
            (Exact::Rational(r), Value::Int(v)) => r == Rational::from_integer(i128::from(v)),
            _ => close(self.to_f64(), value.to_f64(), tol),
        }
    }

    pub fn matches_f64(self, value: f64, tol: f64) -> bool {
        close(self.to_f64(), value, tol)
    }
}

impl std::fmt::Display for Exact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Exact::Rational(r) if r.is_integer() => write!(f, "{}", r.numer()),
            Exact::Rational(r) => write!(f, "{}/{}", r.numer(), r.denom()),
            Exact::Real(v) => write!(f, "{v}"),
        }
    }
}

fn moments<E>(table: &OutcomeTable, estimator: E) -> (Exact, Exact)
where
    E: Fn(&Outcome) -> Value,
{
    let values: Vec<Value> = table.outcomes.iter().map(&estimator).collect();

    let rational = || -> Option<(Rational, Rational)> {
        let mut m1 = Rational::from_integer(0);
        let mut m2 = Rational::from_integer(0);
        for (o, v) in table.outcomes.iter().zip(&values) {
            let p = o.exact_probability?;
            let x = Rational::from_integer(i128::from(v.as_int()?));
            let px = p.checked_mul(&x)?;
            m1 = m1.checked_add(&px)?;
            m2 = m2.checked_add(&px.checked_mul(&x)?)?;
        }
        let var = m2.checked_sub(&m1.checked_mul(&m1)?)?;
        Some((m1, var))
    };
    if let Some((m1, var)) = rational() {
        return (Exact::Rational(m1), Exact::Rational(var));
    }
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (o, v) in table.outcomes.iter().zip(&values) {
        let x = v.to_f64();
        m1 += o.probability * x;
        m2 += o.probability * x * x;
    }
    (Exact::Real(m1), Exact::Real(m2 - m1 * m1))
}

/// `Σ P(outcome) · estimator(outcome)`; the empty outcome contributes 0.
pub fn exact_expectation<E>(trace: &FullTrace, estimator: E) -> Result<Exact, ModelError>
where
    E: Fn(&Outcome) -> Value,
{
    Ok(moments(&enumerate_outcomes(trace)?, estimator).0)
}

/// `E[est²] − E[est]²` with the empty outcome contributing 0.
pub fn exact_variance<E>(trace: &FullTrace, estimator: E) -> Result<Exact, ModelError>
where
    E: Fn(&Outcome) -> Value,
{
    Ok(moments(&enumerate_outcomes(trace)?, estimator).1)
}

/// Both moments from one enumeration.
pub fn exact_moments<E>(table: &OutcomeTable, estimator: E) -> (Exact, Exact)
where
    E: Fn(&Outcome) -> Value,
{
    moments(table, estimator)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloSummary {
    pub mean: f64,
    /// `None` for a single draw.
    pub stderr: Option<f64>,
    pub draws: u64,
}

/// Empirical mean of an estimator over repeated sampling. Each draw gets a
/// trace from `traces`, a fresh uniform shared random number, runs the
/// sampler, and scores the sample (an empty sample scores 0).
pub fn monte_carlo_estimate<G, E>(
    mut traces: G,
    estimator: E,
    draws: u64,
    seed: u64,
) -> MonteCarloSummary
where
    G: FnMut(&mut dyn RngCore) -> FullTrace,
    E: Fn(&SampledTrace) -> Value,
{
    assert!(draws >= 1, "draws must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 1..=draws {
        let mut trace = traces(&mut rng);
        trace.shared = SharedRandom::Real(rng.gen::<f64>());
        let x = match run_trace_sampling(&trace) {
            Ok(Some(sample)) => estimator(&sample).to_f64(),
            Ok(None) => 0.0,
            Err(e) => panic!("invalid trace from generator: {e}"),
        };
        let delta = x - mean;
        mean += delta / k as f64;
        m2 += delta * (x - mean);
    }
    let stderr = (draws > 1).then(|| (m2 / (draws - 1) as f64 / draws as f64).sqrt());
    MonteCarloSummary {
        mean,
        stderr,
        draws,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{estimate_naive, estimate_new, variance_new_exact};
    use crate::model::{AncestorLink, Span, SpanId, TraceId};
    use crate::quantity::span_count;

    fn tid() -> TraceId {
        TraceId::new(1).unwrap()
    }
    fn sid(v: u64) -> SpanId {
        SpanId::new(v).unwrap()
    }
    fn exp(j: u32) -> SamplingRate {
        SamplingRate::from_exponent(j).unwrap()
    }

    fn worked() -> FullTrace {
        FullTrace::new(
            tid(),
            vec![
                Span::new(tid(), sid(1), AncestorLink::Root, "p", exp(1)),
                Span::new(tid(), sid(2), AncestorLink::Parent(sid(1)), "c", exp(2)),
            ],
            SharedRandom::Index(0),
        )
    }

    fn q(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn worked_outcomes() {
        let t = enumerate_outcomes(&worked()).unwrap();
        assert_eq!(t.outcomes.len(), 2);
        assert_eq!(t.outcomes[0].exact_probability, Some(q(1, 4)));
        assert_eq!(t.outcomes[0].sampled.len(), 2);
        assert!(t.outcomes[0].is_complete);
        assert_eq!(t.outcomes[1].exact_probability, Some(q(1, 4)));
        assert_eq!(t.outcomes[1].sampled.len(), 1);
        assert!(!t.outcomes[1].is_complete);
        assert_eq!(t.exact_residual, Some(q(1, 2)));
    }

    #[test]
    fn single_and_equal_rate_outcomes() {
        let one = FullTrace::new(
            tid(),
            vec![Span::new(tid(), sid(1), AncestorLink::Root, "p", exp(0))],
            SharedRandom::Index(0),
        );
        let t = enumerate_outcomes(&one).unwrap();
        assert_eq!(t.outcomes.len(), 1);
        assert_eq!(t.outcomes[0].probability, 1.0);
        assert_eq!(t.residual_probability, 0.0);

        let mut both = worked();
        both.spans[1].rate = exp(1);
        let t = enumerate_outcomes(&both).unwrap();
        assert_eq!(t.outcomes.len(), 1);
        assert_eq!(t.outcomes[0].probability, 0.5);
        assert_eq!(t.outcomes[0].sampled.len(), 2);
        assert_eq!(t.residual_probability, 0.5);
    }

    #[test]
    fn expectation_and_variance_of_worked_example() {
        let q_span = span_count();
        let e = exact_expectation(&worked(), |o| estimate_new(&o.sampled, &q_span)).unwrap();
        assert_eq!(e, Exact::Rational(q(2, 1)));
        let v = exact_variance(&worked(), |o| estimate_new(&o.sampled, &q_span)).unwrap();
        assert_eq!(v, Exact::Rational(q(6, 1)));
        assert!(v.matches(variance_new_exact(&worked(), &q_span), 0.0));
        let vn = exact_variance(&worked(), |o| {
            estimate_naive(&o.sampled, &q_span, o.is_complete)
        })
        .unwrap();
        assert_eq!(vn, Exact::Rational(q(12, 1)));
    }

    #[test]
    fn biased_weighting_gives_five_halves() {
        let biased = |o: &Outcome| {
            let min = o.sampled.spans().iter().map(|s| s.rate).min().unwrap();
            Value::Int(o.sampled.len() as i64 * min.reciprocal_int().unwrap())
        };
        assert_eq!(
            exact_expectation(&worked(), biased).unwrap(),
            Exact::Rational(q(5, 2))
        );
    }

    #[test]
    fn general_rates_use_float_mode() {
        let mut t = worked();
        t.spans[0].rate = SamplingRate::general(0.6).unwrap();
        t.shared = SharedRandom::Real(0.0);
        let table = enumerate_outcomes(&t).unwrap();
        assert!(!table.is_exact());
        let q_span = span_count();
        let e = exact_expectation(&t, |o| estimate_new(&o.sampled, &q_span)).unwrap();
        assert!(!e.is_rational());
        assert!(e.matches_f64(2.0, 1e-12));
    }

    #[test]
    fn monte_carlo_is_deterministic_and_handles_one_draw() {
        let q_span = span_count();
        let run =
            |draws| monte_carlo_estimate(|_| worked(), |s| estimate_new(s, &q_span), draws, 9);
        assert_eq!(run(1000), run(1000));
        assert_eq!(run(1).stderr, None);
    }
}
