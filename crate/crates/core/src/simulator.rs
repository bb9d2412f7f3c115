//! Synthetic call trees pushed through the sampling pipeline.
//!
//! Trees are Galton-Watson processes with Poisson offspring, capped in
//! fanout, depth and total size. Each trace gets its own ChaCha stream keyed
//! by `(seed, ordinal)`, so stateless rate policies produce the same trace
//! for the same ordinal regardless of generation order. The rate-limited
//! policy carries per-service limiter state across traces and is therefore
//! only reproducible for a full sequential run.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::io::LedgerEntry;
use crate::model::{
    AncestorLink, FullTrace, SampledTrace, SamplingRate, SharedRandom, Span, SpanId, TraceId,
};
use crate::sampler::{
    discretize_rate, draw_shared_index, run_trace_sampling, RateLimiterState, SamplerError,
};

pub const MAX_FANOUT: usize = 16;
pub const MAX_DEPTH: u32 = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid policy {0:?}: {1}")]
    BadPolicy(String, String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// How span sampling rates are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum RatePolicy {
    /// Every span gets `2^-j`.
    FixedExponent(u8),
    /// Exponent by service name, with a fallback.
    PerService {
        exponents: BTreeMap<String, u8>,
        default: u8,
    },
    /// `base + step * depth`, clamped to `[0, 62]`; a negative step raises
    /// rates for deeper spans.
    DepthScaled { base: u8, step: i8 },
    /// Error spans get `boosted`, all others `base`.
    ErrorBoosted { base: u8, boosted: u8 },
    /// Per-service rate limiting to `limit_per_second` sampled spans.
    RateLimited { limit_per_second: f64 },
}

fn parse_exp(s: &str) -> Result<u8, String> {
    let j: u8 = s
        .trim()
        .parse()
        .map_err(|_| format!("bad exponent {s:?}"))?;
    if j > SamplingRate::MAX_EXPONENT {
        return Err(format!("exponent out of range: {j}"));
    }
    Ok(j)
}

impl FromStr for RatePolicy {
    type Err = SimError;

    /// `fixed:J`, `per-service:svc=J,...[,*=J]`, `depth:BASE,STEP`,
    /// `error-boost:BASE,BOOSTED`, `rate-limit:R`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |msg: String| SimError::BadPolicy(s.to_string(), msg);
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| bad("expected KIND:ARGS".into()))?;
        let pair = |args: &str| -> Result<(String, String), SimError> {
            args.split_once(',')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| bad("expected two comma-separated values".into()))
        };
        match kind {
            "fixed" => Ok(RatePolicy::FixedExponent(parse_exp(args).map_err(bad)?)),
            "per-service" => {
                let mut exponents = BTreeMap::new();
                let mut default = 0;
                for item in args.split(',').filter(|x| !x.is_empty()) {
                    let (svc, j) = item
                        .split_once('=')
                        .ok_or_else(|| bad(format!("bad entry {item:?}")))?;
                    let j = parse_exp(j).map_err(bad)?;
                    if svc == "*" {
                        default = j;
                    } else {
                        exponents.insert(svc.to_string(), j);
                    }
                }
                Ok(RatePolicy::PerService { exponents, default })
            }
            "depth" => {
                let (base, step) = pair(args)?;
                let step: i8 = step
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad step {step:?}")))?;
                Ok(RatePolicy::DepthScaled {
                    base: parse_exp(&base).map_err(bad)?,
                    step,
                })
            }
            "error-boost" => {
                let (base, boosted) = pair(args)?;
                Ok(RatePolicy::ErrorBoosted {
                    base: parse_exp(&base).map_err(bad)?,
                    boosted: parse_exp(&boosted).map_err(bad)?,
                })
            }
            "rate-limit" => {
                let r: f64 = args
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad limit {args:?}")))?;
                if !(r > 0.0 && r.is_finite()) {
                    return Err(bad("limit must be positive".into()));
                }
                Ok(RatePolicy::RateLimited {
                    limit_per_second: r,
                })
            }
            other => Err(bad(format!("unknown policy kind {other:?}"))),
        }
    }
}

impl fmt::Display for RatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatePolicy::FixedExponent(j) => write!(f, "fixed:{j}"),
            RatePolicy::PerService { exponents, default } => {
                write!(f, "per-service:")?;
                for (svc, j) in exponents {
                    write!(f, "{svc}={j},")?;
                }
                write!(f, "*={default}")
            }
            RatePolicy::DepthScaled { base, step } => write!(f, "depth:{base},{step}"),
            RatePolicy::ErrorBoosted { base, boosted } => write!(f, "error-boost:{base},{boosted}"),
            RatePolicy::RateLimited { limit_per_second } => {
                write!(f, "rate-limit:{limit_per_second}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub trace_count: u64,
    pub seed: u64,
    /// Mean number of children per span.
    pub branching: f64,
    /// Maximum number of span levels; 1 means root only.
    pub max_depth: u32,
    pub max_spans: usize,
    pub service_pool: Vec<String>,
    pub error_rate: f64,
    pub rate_policy: RatePolicy,
    /// Mean spacing of trace start times.
    pub trace_interval_micros: i64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            trace_count: 1000,
            seed: 0,
            branching: 1.2,
            max_depth: 6,
            max_spans: 64,
            service_pool: ["frontend", "auth", "cart", "db", "cache", "search"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            error_rate: 0.05,
            rate_policy: RatePolicy::DepthScaled { base: 1, step: 1 },
            trace_interval_micros: 10_000,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::BadConfig(m.to_string()));
        if !(self.branching >= 0.0 && self.branching.is_finite()) {
            return bad("branching must be a nonnegative number");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1");
        }
        if self.max_spans < 1 {
            return bad("max_spans must be at least 1");
        }
        if self.service_pool.is_empty() {
            return bad("service pool is empty");
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return bad("error_rate must lie in [0, 1]");
        }
        if self.trace_interval_micros < 1 {
            return bad("trace interval must be positive");
        }
        Ok(())
    }
}

/// Stateful trace generator.
pub struct Simulator {
    config: SimulationConfig,
    limiters: HashMap<String, RateLimiterState>,
}

struct Node {
    index: usize,
    depth: u32,
}

impl Simulator {
    pub fn new(config: SimulationConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Simulator {
            config,
            limiters: HashMap::new(),
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    fn rng_for(&self, ordinal: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(ordinal);
        rng
    }

    /// Builds trace number `ordinal`, with rates assigned and a shared
    /// random index drawn.
    pub fn generate_trace(&mut self, ordinal: u64) -> Result<FullTrace, SimError> {
        let cfg = &self.config;
        let mut rng = self.rng_for(ordinal);
        let trace_id = TraceId::new(rng.gen::<u128>() | 1).expect("nonzero");
        let depth_cap = cfg.max_depth.min(MAX_DEPTH);
        let offspring = if cfg.branching > 0.0 {
            Some(Poisson::new(cfg.branching).map_err(|e| SimError::BadConfig(e.to_string()))?)
        } else {
            None
        };

        let mut used_ids = HashSet::new();
        let mut new_id = |rng: &mut ChaCha8Rng| loop {
            let v: u64 = rng.gen();
            if v != 0 && used_ids.insert(v) {
                return SpanId::new(v).expect("nonzero");
            }
        };
        let base_start = ordinal as i64 * cfg.trace_interval_micros
            + rng.gen_range(0..cfg.trace_interval_micros);
        let pick_service = |rng: &mut ChaCha8Rng| {
            cfg.service_pool[rng.gen_range(0..cfg.service_pool.len())].clone()
        };

        let mut spans: Vec<Span> = Vec::new();
        let mut depths: Vec<u32> = Vec::new();
        let root_service = pick_service(&mut rng);
        let mut root = Span::new(
            trace_id,
            new_id(&mut rng),
            AncestorLink::Root,
            root_service,
            SamplingRate::ONE,
        );
        root.start_micros = base_start;
        root.duration_micros = rng.gen_range(1_000..=50_000);
        spans.push(root);
        depths.push(0);

        let mut queue = VecDeque::from([Node { index: 0, depth: 0 }]);
        while let Some(node) = queue.pop_front() {
            if node.depth + 1 >= depth_cap {
                continue;
            }
            let Some(dist) = offspring.as_ref() else {
                continue;
            };
            let children = (dist.sample(&mut rng) as usize).min(MAX_FANOUT);
            for _ in 0..children {
                if spans.len() >= cfg.max_spans {
                    break;
                }
                let parent = &spans[node.index];
                let parent_id = parent.span_id;
                let parent_start = parent.start_micros;
                let parent_dur = parent.duration_micros.max(2);
                let offset = rng.gen_range(0..parent_dur / 2);
                let duration = rng.gen_range(1..=(parent_dur - offset).max(1));
                let mut span = Span::new(
                    trace_id,
                    new_id(&mut rng),
                    AncestorLink::Parent(parent_id),
                    pick_service(&mut rng),
                    SamplingRate::ONE,
                );
                span.operation = format!("op{}", rng.gen_range(0..4));
                span.start_micros = parent_start + offset as i64;
                span.duration_micros = duration;
                spans.push(span);
                depths.push(node.depth + 1);
                queue.push_back(Node {
                    index: spans.len() - 1,
                    depth: node.depth + 1,
                });
            }
        }
        for span in &mut spans {
            span.error = rng.gen_bool(cfg.error_rate);
            if span.operation.is_empty() {
                span.operation = "op0".into();
            }
        }

        let policy = cfg.rate_policy.clone();
        let exp = |j: i64| {
            SamplingRate::from_exponent(j.clamp(0, i64::from(SamplingRate::MAX_EXPONENT)) as u32)
                .expect("clamped")
        };
        match policy {
            RatePolicy::FixedExponent(j) => {
                spans.iter_mut().for_each(|s| s.rate = exp(i64::from(j)))
            }
            RatePolicy::PerService { exponents, default } => spans.iter_mut().for_each(|s| {
                s.rate = exp(i64::from(*exponents.get(&s.service).unwrap_or(&default)));
            }),
            RatePolicy::DepthScaled { base, step } => {
                for (s, d) in spans.iter_mut().zip(&depths) {
                    s.rate = exp(i64::from(base) + i64::from(step) * i64::from(*d));
                }
            }
            RatePolicy::ErrorBoosted { base, boosted } => spans.iter_mut().for_each(|s| {
                s.rate = exp(i64::from(if s.error { boosted } else { base }));
            }),
            RatePolicy::RateLimited { limit_per_second } => {
                let mut order: Vec<usize> = (0..spans.len()).collect();
                order.sort_by_key(|&i| spans[i].start_micros);
                for i in order {
                    let service = spans[i].service.clone();
                    let state = match self.limiters.get(&service) {
                        Some(s) => *s,
                        None => RateLimiterState::new(limit_per_second)?,
                    };
                    let now = spans[i]
                        .start_micros
                        .max(state.last_timestamp_micros.unwrap_or(i64::MIN));
                    let (next, rho) = state.observe(now)?;
                    self.limiters.insert(service, next);
                    spans[i].rate = discretize_rate(rho, &mut rng)?;
                }
            }
        }

        let shared = SharedRandom::Index(draw_shared_index(&mut rng));
        Ok(FullTrace::new(trace_id, spans, shared))
    }
}

/// Trace `ordinal` of a fresh simulator.
pub fn generate_trace(config: &SimulationConfig, ordinal: u64) -> Result<FullTrace, SimError> {
    Simulator::new(config.clone())?.generate_trace(ordinal)
}

/// Sampled span stream plus the ground truth it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOutput {
    /// Sampled spans of all traces, ordered by start time.
    pub spans: Vec<Span>,
    pub ledger: Vec<LedgerEntry>,
}

impl SimulationOutput {
    pub fn complete_fraction(&self) -> f64 {
        if self.ledger.is_empty() {
            return 0.0;
        }
        self.ledger.iter().filter(|e| e.complete).count() as f64 / self.ledger.len() as f64
    }
}

pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationOutput, SimError> {
    let mut sim = Simulator::new(config.clone())?;
    let mut spans = Vec::new();
    let mut ledger = Vec::with_capacity(config.trace_count as usize);
    for ordinal in 0..config.trace_count {
        let trace = sim.generate_trace(ordinal)?;
        let sampled = run_trace_sampling(&trace).map_err(|e| SimError::BadConfig(e.to_string()))?;
        let sampled_spans = sampled.as_ref().map_or(0, |s| s.len());
        ledger.push(LedgerEntry {
            complete: sampled_spans == trace.spans.len(),
            sampled_spans,
            trace,
        });
        if let Some(s) = sampled {
            spans.extend(s.into_spans());
        }
    }
    spans.sort_by_key(|s| (s.start_micros, s.trace_id, s.span_id));
    Ok(SimulationOutput { spans, ledger })
}

/// A sampled trace with the index of its shared random number, when known.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedSample {
    pub sample: SampledTrace,
    pub shared_index: Option<u8>,
}

/// Most complete traces first: the larger the shared random index, the
/// smaller the shared random number. Ties are ordered by trace id.
pub fn sort_by_completeness(samples: Vec<IndexedSample>) -> Result<Vec<IndexedSample>, SimError> {
    if let Some(bad) = samples.iter().find(|s| s.shared_index.is_none()) {
        return Err(SimError::BadConfig(format!(
            "trace {} has no shared random index",
            bad.sample.trace_id()
        )));
    }
    let mut samples = samples;
    samples.sort_by(|a, b| {
        b.shared_index
            .cmp(&a.shared_index)
            .then(a.sample.trace_id().cmp(&b.sample.trace_id()))
    });
    Ok(samples)
}
