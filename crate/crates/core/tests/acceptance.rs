//! Acceptance suite. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spansketch::estimator::{
    composite_estimate, estimate_indicator, estimate_matching_spans, estimate_naive, estimate_new,
    variance_naive_exact, variance_new_exact,
};
use spansketch::io::reassemble;
use spansketch::model::{build_rate_ladder, FullTrace, SamplingRate, SharedRandom};
use spansketch::oracle::{enumerate_outcomes, exact_moments, Exact};
use spansketch::quantity::{
    check_quantity_on_chain, is_error, service_is, span_count, SpanPredicate,
};
use spansketch::sampler::{discretize_rate, draw_shared_index, run_trace_sampling};
use spansketch::simulator::{run_simulation, SimulationConfig};
use spansketch::value::Value;
use spansketch::verify::{
    biased_full_weighting, raise_random_rates, random_general_trace, random_trace,
    shipped_quantities, worked_example,
};

const CORPUS_SEED: u64 = 0x5eed;
const CORPUS_SIZE: usize = 1000;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn corpus() -> Vec<FullTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED);
    (0..CORPUS_SIZE)
        .map(|_| random_trace(&mut rng, 8, 6))
        .collect()
}

fn rational_int(e: Exact) -> Option<i128> {
    match e {
        Exact::Rational(r) if r.is_integer() => Some(*r.numer()),
        _ => None,
    }
}

fn within_time(start: Instant, limit: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    if took < limit {
        Ok(format!("{detail} ({took:.2?})"))
    } else {
        Err(format!("{detail} but took {took:.2?}, limit {limit:?}"))
    }
}

fn worked_example_values() -> Outcome {
    let start = Instant::now();
    let trace = worked_example();
    let q = span_count();
    let table = enumerate_outcomes(&trace).map_err(|e| e.to_string())?;
    let values: Vec<Value> = table
        .outcomes
        .iter()
        .map(|o| estimate_new(&o.sampled, &q))
        .collect();
    let empty = composite_estimate(std::iter::empty(), &q, false)
        .map_err(|e| e.to_string())?
        .estimate;
    if values != [Value::Int(6), Value::Int(2)] || empty != Value::Int(0) {
        return Err(format!(
            "estimates {values:?} and empty {empty:?}, want 6, 2, 0"
        ));
    }
    let (mean, _) = exact_moments(&table, |o| estimate_new(&o.sampled, &q));
    if mean != Exact::Rational(Ratio::from_integer(2)) {
        return Err(format!("expectation {mean}, want exactly 2"));
    }
    within_time(
        start,
        Duration::from_secs(1),
        "full 6, parent-only 2, empty 0, expectation 2".into(),
    )
}

fn bias_counterexample() -> Outcome {
    let trace = worked_example();
    let q = span_count();
    let table = enumerate_outcomes(&trace).map_err(|e| e.to_string())?;
    let full = biased_full_weighting(&table.outcomes[0].sampled, &q);
    let (mean, _) = exact_moments(&table, |o| biased_full_weighting(&o.sampled, &q));
    let want = Exact::Rational(Ratio::new(5, 2));
    if full != Value::Int(8) || mean != want {
        return Err(format!(
            "full outcome {full}, expectation {mean}, want 8 and 5/2"
        ));
    }
    Ok("full outcome weighted 2/s(child) = 8, expectation 5/2".into())
}

fn unbiasedness(corpus: &[FullTrace]) -> Outcome {
    let start = Instant::now();
    let quantities = shipped_quantities();
    let mut checks = 0;
    for trace in corpus {
        let table = enumerate_outcomes(trace).map_err(|e| e.to_string())?;
        for q in &quantities {
            let truth = q.evaluate(&trace.spans) as i128;
            let (mean, _) = exact_moments(&table, |o| estimate_new(&o.sampled, q));
            if rational_int(mean) != Some(truth) {
                return Err(format!(
                    "{} on trace {}: expectation {mean}, truth {truth}",
                    q.name(),
                    trace.trace_id
                ));
            }
            checks += 1;
        }
    }
    within_time(
        start,
        Duration::from_secs(30),
        format!("{checks} exact expectations match"),
    )
}

fn variance_formula(corpus: &[FullTrace]) -> Outcome {
    let quantities = shipped_quantities();
    let mut checks = 0;
    for trace in corpus {
        let table = enumerate_outcomes(trace).map_err(|e| e.to_string())?;
        for q in &quantities {
            let (_, var) = exact_moments(&table, |o| estimate_new(&o.sampled, q));
            let closed = variance_new_exact(trace, q);
            match (rational_int(var), closed) {
                (Some(v), Value::Int(c)) if v == i128::from(c) => checks += 1,
                _ => {
                    return Err(format!(
                        "{} on trace {}: oracle {var}, formula {closed}",
                        q.name(),
                        trace.trace_id
                    ))
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED + 1);
    let mut general = 0;
    for _ in 0..CORPUS_SIZE {
        let trace = random_general_trace(&mut rng, 8);
        let table = enumerate_outcomes(&trace).map_err(|e| e.to_string())?;
        for q in &quantities {
            let (_, var) = exact_moments(&table, |o| estimate_new(&o.sampled, q));
            let closed = variance_new_exact(&trace, q).to_f64();
            let v = var.to_f64();
            if (v - closed).abs() > 1e-9 * v.abs().max(1.0) {
                return Err(format!(
                    "general rates, {}: oracle {v}, formula {closed}",
                    q.name()
                ));
            }
            general += 1;
        }
    }
    Ok(format!(
        "{checks} exact, {general} general-rate within 1e-9"
    ))
}

fn variance_ordering(corpus: &[FullTrace]) -> Outcome {
    let quantities = shipped_quantities();
    let mut checks = 0;
    for trace in corpus {
        for q in &quantities {
            if !check_quantity_on_chain(q, trace).bounded_holds() {
                continue;
            }
            let (new, naive) = (variance_new_exact(trace, q), variance_naive_exact(trace, q));
            match (new, naive) {
                (Value::Int(a), Value::Int(b)) if a <= b => checks += 1,
                _ => {
                    return Err(format!(
                        "{} on trace {}: new {new}, naive {naive}",
                        q.name(),
                        trace.trace_id
                    ))
                }
            }
        }
    }
    Ok(format!("{checks} bounded cases, zero violations"))
}

fn rate_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED + 2);
    let monotone: Vec<_> = shipped_quantities()
        .into_iter()
        .filter(|q| q.claims_monotonic())
        .collect();
    let mut checks = 0;
    for _ in 0..500 {
        let low = random_trace(&mut rng, 8, 6);
        let high = raise_random_rates(&mut rng, &low);
        for q in &monotone {
            match (variance_new_exact(&low, q), variance_new_exact(&high, q)) {
                (Value::Int(a), Value::Int(b)) if b <= a => checks += 1,
                (a, b) => {
                    return Err(format!(
                        "{} on trace {}: s1 {a}, s2 {b}",
                        q.name(),
                        low.trace_id
                    ))
                }
            }
        }
    }
    Ok(format!(
        "{checks} paired cases over {} monotone quantities, zero violations",
        monotone.len()
    ))
}

fn specializations(corpus: &[FullTrace]) -> Outcome {
    let counts: Vec<(&str, SpanPredicate)> =
        vec![("error-spans", is_error()), ("A-spans", service_is("A"))];
    let quantities = shipped_quantities();
    let mut checks = 0;
    for trace in corpus {
        let table = enumerate_outcomes(trace).map_err(|e| e.to_string())?;
        for o in &table.outcomes {
            for q in &quantities {
                let general = estimate_new(&o.sampled, q);
                let special = if let Some((_, p)) = counts.iter().find(|(n, _)| *n == q.name()) {
                    estimate_matching_spans(&o.sampled, p)
                } else if q.is_indicator() && q.claims_monotonic() {
                    estimate_indicator(&o.sampled, q).map_err(|e| e.to_string())?
                } else {
                    continue;
                };
                if general != special {
                    return Err(format!(
                        "{}: general {general}, shortcut {special}",
                        q.name()
                    ));
                }
                checks += 1;
            }
        }
    }
    Ok(format!("{checks} outcome comparisons equal"))
}

fn integrality(corpus: &[FullTrace]) -> Outcome {
    let quantities = shipped_quantities();
    let mut checks = 0;
    for trace in corpus {
        let table = enumerate_outcomes(trace).map_err(|e| e.to_string())?;
        for o in &table.outcomes {
            for q in &quantities {
                for v in [
                    estimate_new(&o.sampled, q),
                    estimate_naive(&o.sampled, q, o.is_complete),
                ] {
                    if !v.is_int() {
                        return Err(format!("{} gave {v}", q.name()));
                    }
                    checks += 1;
                }
            }
        }
    }
    Ok(format!("{checks} estimates, all integers"))
}

fn geometric_draws() -> Outcome {
    let start = Instant::now();
    const N: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut buckets = [0u64; 64];
    for _ in 0..N {
        buckets[usize::from(draw_shared_index(&mut rng))] += 1;
    }
    let mut worst: f64 = 0.0;
    for (k, &count) in buckets.iter().enumerate().take(11) {
        let p = 0.5f64.powi(k as i32 + 1);
        let sigma = (N as f64 * p * (1.0 - p)).sqrt();
        let z = (count as f64 - N as f64 * p) / sigma;
        worst = worst.max(z.abs());
        if z.abs() > 4.0 {
            return Err(format!("bucket {k}: {count} draws, z = {z:.2}"));
        }
    }
    within_time(
        start,
        Duration::from_secs(5),
        format!("buckets 0..=10 within 4 sigma, max |z| {worst:.2}"),
    )
}

fn discretization() -> Outcome {
    const N: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut parts = Vec::new();
    for rho in [0.3, 0.7, 0.05] {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..N {
            let v = discretize_rate(rho, &mut rng)
                .map_err(|e| e.to_string())?
                .value();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / N as f64;
        let var = sum_sq / N as f64 - mean * mean;
        let z = (mean - rho) / (var / N as f64).sqrt();
        if z.abs() > 4.0 {
            return Err(format!("rho {rho}: mean {mean}, z = {z:.2}"));
        }
        parts.push(format!("rho {rho} z {z:.2}"));
    }
    Ok(parts.join(", "))
}

fn pipeline() -> Outcome {
    let start = Instant::now();
    let config = SimulationConfig {
        trace_count: 100_000,
        seed: 11,
        ..SimulationConfig::default()
    };
    let sim = run_simulation(&config).map_err(|e| e.to_string())?;
    let traces = reassemble(sim.spans).map_err(|e| e.to_string())?;
    let q = span_count();
    let estimate = composite_estimate(&traces, &q, false)
        .map_err(|e| e.to_string())?
        .estimate
        .to_f64();
    let truth: usize = sim.ledger.iter().map(|e| e.trace.spans.len()).sum();
    let variance: f64 = sim
        .ledger
        .iter()
        .map(|e| variance_new_exact(&e.trace, &q).to_f64())
        .sum();
    let z = (estimate - truth as f64) / variance.sqrt();
    if z.abs() > 4.0 {
        return Err(format!("estimate {estimate}, truth {truth}, z = {z:.2}"));
    }
    within_time(
        start,
        Duration::from_secs(60),
        format!("estimate {estimate}, truth {truth}, z = {z:.2}"),
    )
}

fn completeness_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED + 3);
    let mut checks = 0;
    for _ in 0..200 {
        let base = random_trace(&mut rng, 8, 6);
        let ladder = build_rate_ladder(&base.spans).map_err(|e| e.to_string())?;
        let min = ladder.min().value();
        let mut points = Vec::new();
        for i in 0..=ladder.len() {
            let lo = ladder.threshold(i);
            let hi = if i < ladder.len() {
                ladder.rates()[i].value()
            } else {
                1.0
            };
            points.extend([lo, (lo + hi) / 2.0, lo + (hi - lo) * rng.gen::<f64>()]);
        }
        for r in points.into_iter().filter(|r| (0.0..1.0).contains(r)) {
            let trace = FullTrace::new(base.trace_id, base.spans.clone(), SharedRandom::Real(r));
            let sampled = run_trace_sampling(&trace).map_err(|e| e.to_string())?;
            let full = sampled
                .as_ref()
                .is_some_and(|s| s.len() == base.spans.len());
            if full != (r < min) {
                return Err(format!(
                    "trace {}: r {r}, min rate {min}, full {full}",
                    base.trace_id
                ));
            }
            checks += 1;
        }
        for i in 0..=SamplingRate::MAX_EXPONENT {
            let trace = FullTrace::new(base.trace_id, base.spans.clone(), SharedRandom::Index(i));
            let sampled = run_trace_sampling(&trace).map_err(|e| e.to_string())?;
            let full = sampled
                .as_ref()
                .is_some_and(|s| s.len() == base.spans.len());
            let below_min = ladder.min().exponent().is_some_and(|j| i >= j);
            if full != below_min {
                return Err(format!("trace {}: index {i}, full {full}", base.trace_id));
            }
            checks += 1;
        }
    }
    Ok(format!("{checks} sweep points, zero violations"))
}

fn main() {
    let corpus = corpus();
    let criteria: Vec<Criterion> = vec![
        ("worked example", Box::new(worked_example_values)),
        ("bias counterexample", Box::new(bias_counterexample)),
        ("unbiasedness", Box::new(|| unbiasedness(&corpus))),
        ("variance formula", Box::new(|| variance_formula(&corpus))),
        ("variance ordering", Box::new(|| variance_ordering(&corpus))),
        ("rate dominance", Box::new(rate_dominance)),
        ("shortcut estimators", Box::new(|| specializations(&corpus))),
        ("integrality", Box::new(|| integrality(&corpus))),
        ("geometric draw law", Box::new(geometric_draws)),
        ("rate discretization", Box::new(discretization)),
        ("pipeline monte carlo", Box::new(pipeline)),
        ("completeness law", Box::new(completeness_law)),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", n + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
