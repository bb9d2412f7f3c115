use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spansketch::estimator::{estimate_new, variance_new_exact};
use spansketch::model::TraceId;
use spansketch::oracle::{exact_expectation, monte_carlo_estimate};
use spansketch::quantity::{a_calls_b, span_count};
use spansketch::sampler::{discretize_rate, discretize_weights, shared_random_from_trace_id};
use spansketch::verify::{random_trace, worked_example};

/// Kolmogorov-Smirnov statistic of `xs` against Uniform(0, 1).
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

#[test]
fn trace_id_hash_is_uniform() {
    let n = 100_000u128;
    // Sequential ids are the hardest case for a weak mixer.
    let xs: Vec<f64> = (1..=n)
        .map(|i| shared_random_from_trace_id(TraceId::new(i).unwrap()))
        .collect();
    assert!(xs.iter().all(|x| (0.0..1.0).contains(x)));
    let d = ks_uniform(xs);
    // Critical value at significance 0.001.
    assert!(d < 1.95 / (n as f64).sqrt(), "KS statistic {d}");
}

#[test]
fn discretization_uses_two_neighbouring_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for rho in [0.9, 0.5, 0.3, 0.01, 1e-6] {
        let (i, p_upper) = discretize_weights(rho).unwrap();
        let n = 200_000;
        let mut upper = 0usize;
        for _ in 0..n {
            let r = discretize_rate(rho, &mut rng).unwrap();
            let j = r.exponent().unwrap();
            assert!(j == i || j == i + 1, "rho {rho}: exponent {j}, bracket {i}");
            upper += usize::from(j == i);
        }
        let sigma = (p_upper * (1.0 - p_upper) / n as f64).sqrt();
        let frac = upper as f64 / n as f64;
        assert!(
            (frac - p_upper).abs() <= 4.0 * sigma + 1e-12,
            "rho {rho}: {frac} vs {p_upper}"
        );
    }
}

#[test]
fn monte_carlo_agrees_with_exact_oracle() {
    let trace = worked_example();
    let q = span_count();
    let exact = exact_expectation(&trace, |o| estimate_new(&o.sampled, &q))
        .unwrap()
        .to_f64();
    let sd = variance_new_exact(&trace, &q).to_f64().sqrt();
    let draws = 200_000;
    let mc = monte_carlo_estimate(|_| trace.clone(), |s| estimate_new(s, &q), draws, 17);
    assert_eq!(mc.draws, draws);
    assert!(
        (mc.mean - exact).abs() <= 4.0 * sd / (draws as f64).sqrt(),
        "{} vs {exact}",
        mc.mean
    );
}

#[test]
fn monte_carlo_on_random_traces_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = a_calls_b("A", "B");
    for _ in 0..20 {
        let trace = random_trace(&mut rng, 8, 4);
        let truth = q.evaluate(&trace.spans);
        let sd = variance_new_exact(&trace, &q).to_f64().sqrt();
        let draws = 20_000;
        let mc = monte_carlo_estimate(|_| trace.clone(), |s| estimate_new(s, &q), draws, 3);
        assert!(
            (mc.mean - truth).abs() <= 4.5 * sd / (draws as f64).sqrt() + 1e-12,
            "{} vs {truth}",
            mc.mean
        );
    }
}
