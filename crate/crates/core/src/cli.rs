//! Command-line front end. [`run`] takes the argument list and output
//! streams so it can be driven in-process by tests.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::estimator::{composite_estimate, variance_naive_exact, variance_new_exact};
use crate::io::{read_ledger, read_spans, reassemble, write_ledger, write_spans};
use crate::quantity::{
    a_calls_b, call_depth, const_one, is_error, matching_span_count, service_is, span_count,
    trace_has, QuantitySpec, SpanPredicate,
};
use crate::simulator::{run_simulation, RatePolicy, SimulationConfig};
use crate::value::Value;
use crate::verify::{biased_full_weighting, run_verify, Check, VerifyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping the worker threads used by `verify`.
pub const THREADS_ENV: &str = "SPANSKETCH_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "spansketch",
    version,
    about = "Partial trace sampling and unbiased estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic traces, sample them, write spans and ground truth.
    Simulate(SimulateArgs),
    /// Estimate a quantity's total from a sampled span file.
    Estimate(EstimateArgs),
    /// Exact variance of the new and naive estimators over a ledger.
    Variance(VarianceArgs),
    /// Randomized check of the estimator against the exact oracle.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    traces: u64,
    #[arg(long)]
    seed: u64,
    /// fixed:J, per-service:svc=J,...,*=J, depth:B,S, error-boost:B,X or rate-limit:R
    #[arg(long, default_value = "depth:1,1")]
    policy: RatePolicy,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// const-one, span-count, match-spans:PRED, trace-has:PRED, a-calls-b:A,B or depth;
    /// PRED is `error` or `service=NAME`
    #[arg(long)]
    quantity: QuantityArg,
    #[arg(long)]
    per_trace: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct VarianceArgs {
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    quantity: QuantityArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    cases: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u16).range(1..=64))]
    max_spans: u16,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u8).range(0..=52))]
    max_exponent: u8,
    #[arg(long)]
    json: bool,
    /// Replace the estimator with a known-biased one, to see the checker fail.
    #[arg(long, hide = true)]
    inject_biased_estimator: bool,
}

/// Parsed `--quantity` argument.
#[derive(Clone)]
pub struct QuantityArg {
    pub text: String,
    pub spec: QuantitySpec,
}

impl std::fmt::Debug for QuantityArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

fn parse_predicate(s: &str) -> Result<SpanPredicate, String> {
    if s == "error" {
        return Ok(is_error());
    }
    match s.strip_prefix("service=") {
        Some(name) if !name.is_empty() => Ok(service_is(name)),
        _ => Err(format!(
            "unknown predicate `{s}` (expected `error` or `service=NAME`)"
        )),
    }
}

impl FromStr for QuantityArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let spec = match (name, args) {
            ("const-one", None) => const_one(),
            ("span-count", None) => span_count(),
            ("depth", None) => call_depth(),
            ("match-spans", Some(p)) => matching_span_count(s, parse_predicate(p)?),
            ("trace-has", Some(p)) => trace_has(s, parse_predicate(p)?),
            ("a-calls-b", Some(pair)) => match pair.split_once(',') {
                Some((a, b)) if !a.is_empty() && !b.is_empty() => a_calls_b(a, b),
                _ => return Err(format!("a-calls-b needs two services, got `{pair}`")),
            },
            _ => return Err(format!("unknown quantity `{s}`")),
        };
        Ok(QuantityArg {
            text: s.to_string(),
            spec,
        })
    }
}

fn value_json(v: Value) -> serde_json::Value {
    match v {
        Value::Int(i) => json!(i),
        Value::Real(x) => json!(x),
    }
}

fn ratio(new: Value, naive: Value) -> Option<f64> {
    let d = naive.to_f64();
    if d == 0.0 {
        (new.to_f64() == 0.0).then_some(1.0)
    } else {
        Some(new.to_f64() / d)
    }
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

type CmdResult = Result<i32, String>;

fn open(path: &Path) -> Result<BufReader<File>, String> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| format!("cannot open {}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, String> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| format!("cannot create {}: {e}", path.display()))
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> CmdResult {
    let config = SimulationConfig {
        trace_count: a.traces,
        seed: a.seed,
        rate_policy: a.policy.clone(),
        ..SimulationConfig::default()
    };
    let sim = run_simulation(&config).map_err(|e| e.to_string())?;
    let mut spans = create(&a.out)?;
    write_spans(&sim.spans, &mut spans).map_err(|e| e.to_string())?;
    spans.flush().map_err(|e| e.to_string())?;
    let mut ledger = create(&a.ledger)?;
    write_ledger(&sim.ledger, &mut ledger).map_err(|e| e.to_string())?;
    ledger.flush().map_err(|e| e.to_string())?;

    let fraction = sim.complete_fraction();
    let w = |e: std::io::Error| e.to_string();
    writeln!(out, "traces: {}", a.traces).map_err(w)?;
    writeln!(out, "spans emitted: {}", sim.spans.len()).map_err(w)?;
    writeln!(out, "complete fraction: {fraction:?}").map_err(w)?;
    if a.json {
        let line = json!({
            "traces": a.traces,
            "spans": sim.spans.len(),
            "complete_fraction": fraction,
            "policy": a.policy.to_string(),
        });
        writeln!(out, "{line}").map_err(w)?;
    }
    Ok(EXIT_OK)
}

fn cmd_estimate(a: EstimateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let spans = read_spans(open(&a.input)?).map_err(|e| e.to_string())?;
    let traces = reassemble(spans).map_err(|e| e.to_string())?;
    let report =
        composite_estimate(&traces, &a.quantity.spec, a.per_trace).map_err(|e| e.to_string())?;
    let w = |e: std::io::Error| e.to_string();
    for warning in &report.warnings {
        writeln!(err, "warning: {warning}").map_err(w)?;
    }
    if let Some(terms) = &report.per_trace_terms {
        for (tid, v) in terms {
            writeln!(out, "{tid} {v}").map_err(w)?;
        }
    }
    writeln!(out, "estimate: {}", report.estimate).map_err(w)?;
    writeln!(out, "traces: {}", report.contributing_traces).map_err(w)?;
    if a.json {
        let line = json!({
            "quantity": a.quantity.text,
            "estimate": value_json(report.estimate),
            "traces": report.contributing_traces,
        });
        writeln!(out, "{line}").map_err(w)?;
    }
    Ok(EXIT_OK)
}

fn cmd_variance(a: VarianceArgs, out: &mut dyn Write) -> CmdResult {
    let ledger = read_ledger(open(&a.ledger)?).map_err(|e| e.to_string())?;
    let q = &a.quantity.spec;
    let w = |e: std::io::Error| e.to_string();
    let mut total_new = Value::ZERO;
    let mut total_naive = Value::ZERO;
    writeln!(out, "trace new naive ratio").map_err(w)?;
    for entry in &ledger {
        let new = variance_new_exact(&entry.trace, q);
        let naive = variance_naive_exact(&entry.trace, q);
        writeln!(
            out,
            "{} {new} {naive} {}",
            entry.trace.trace_id,
            fmt_ratio(ratio(new, naive))
        )
        .map_err(w)?;
        total_new = total_new + new;
        total_naive = total_naive + naive;
    }
    let r = ratio(total_new, total_naive);
    writeln!(
        out,
        "total new {total_new} naive {total_naive} ratio {}",
        fmt_ratio(r)
    )
    .map_err(w)?;
    if a.json {
        let line = json!({
            "quantity": a.quantity.text,
            "traces": ledger.len(),
            "variance_new": value_json(total_new),
            "variance_naive": value_json(total_naive),
            "ratio": r,
        });
        writeln!(out, "{line}").map_err(w)?;
    }
    Ok(EXIT_OK)
}

fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> CmdResult {
    let config = VerifyConfig {
        seed: a.seed,
        cases: a.cases,
        max_spans: usize::from(a.max_spans),
        max_exponent: a.max_exponent,
        checks: Check::ALL.to_vec(),
        estimator: if a.inject_biased_estimator {
            biased_full_weighting
        } else {
            crate::estimator::estimate_new
        },
    };
    let report = match thread_limit() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| e.to_string())?
            .install(|| run_verify(&config)),
        None => run_verify(&config),
    };
    let w = |e: std::io::Error| e.to_string();
    if report.cases == 0 {
        writeln!(out, "0 cases: nothing to verify").map_err(w)?;
    } else {
        writeln!(out, "{} cases, seed {}", report.cases, a.seed).map_err(w)?;
        for check in Check::ALL {
            let t = report.tally(check);
            writeln!(
                out,
                "  {:<50} {:>7} run {:>5} failed",
                check.label(),
                t.run,
                t.failed
            )
            .map_err(w)?;
        }
    }
    if let Some(first) = report.failures.first() {
        writeln!(out, "{first}").map_err(w)?;
    } else if report.cases > 0 {
        writeln!(out, "all checks passed").map_err(w)?;
    }
    if a.json {
        let line = json!({
            "cases": report.cases,
            "seed": a.seed,
            "passed": report.passed(),
            "failures": report.failures.len(),
        });
        writeln!(out, "{line}").map_err(w)?;
    }
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

fn thread_limit() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Estimate(a) => cmd_estimate(a, out, err),
        Command::Variance(a) => cmd_variance(a, out),
        Command::Verify(a) => cmd_verify(a, out),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("spansketch").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn quantity_syntax() {
        for ok in [
            "const-one",
            "span-count",
            "depth",
            "match-spans:error",
            "trace-has:service=db",
            "a-calls-b:A,B",
        ] {
            assert!(ok.parse::<QuantityArg>().is_ok(), "{ok}");
        }
        for bad in [
            "spans",
            "match-spans",
            "match-spans:color=red",
            "a-calls-b:A",
            "depth:3",
        ] {
            assert!(bad.parse::<QuantityArg>().is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_quantity_is_usage_error() {
        let (code, _, err) = run_str(&["estimate", "--in", "x.jsonl", "--quantity", "bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("unknown quantity"));
    }

    #[test]
    fn verify_zero_cases() {
        let (code, out, _) = run_str(&["verify", "--seed", "1", "--cases", "0"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("0 cases"));
    }

    #[test]
    fn missing_seed_is_usage_error() {
        let (code, _, _) = run_str(&["verify"]);
        assert_eq!(code, EXIT_USAGE);
    }
}
