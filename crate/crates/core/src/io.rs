//! JSON Lines span streams and ground-truth ledgers, plus trace reassembly.
//!
//! Span record, one per line:
//!
//! ```text
//! {"trace_id":"<32 hex>","span_id":"<16 hex>",
//!  "link":{"kind":"root"|"parent"|"ancestor","ancestor_span_id":"<16 hex>","skipped":N},
//!  "service":"..","op":"..","start_us":N,"dur_us":N,"error":false,
//!  "rate_exp":J | "rate":0.3, "attrs":{..}}
//! ```
//!
//! `skipped` is present iff `kind` is `"ancestor"`; an ancestor link without
//! `ancestor_span_id` marks a span with no sampled ancestor. A leading
//! `{"v":1}` header line is accepted and ignored, as are unknown keys.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AncestorLink, FullTrace, SampledTrace, SamplingRate, SharedRandom, Span, SpanId, TraceId,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate span id {span} in trace {trace}")]
    DuplicateSpan { trace: TraceId, span: SpanId },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct LinkRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ancestor_span_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skipped: Option<u64>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct SpanRecord {
    trace_id: String,
    span_id: String,
    link: LinkRecord,
    service: String,
    op: String,
    start_us: i64,
    dur_us: u64,
    error: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate_exp: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, String>,
}

fn parse_hex(s: &str, width: usize, what: &str) -> Result<u128, String> {
    if s.len() != width
        || !s
            .bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    {
        return Err(format!(
            "invalid {what}: expected {width} lowercase hex chars, got {s:?}"
        ));
    }
    u128::from_str_radix(s, 16).map_err(|e| e.to_string())
}

fn parse_span_id(s: &str, what: &str) -> Result<SpanId, String> {
    SpanId::new(parse_hex(s, 16, what)? as u64).map_err(|e| format!("{what}: {e}"))
}

impl SpanRecord {
    fn from_span(span: &Span) -> Self {
        let link = match span.link {
            AncestorLink::Root => LinkRecord {
                kind: "root".into(),
                ancestor_span_id: None,
                skipped: None,
            },
            AncestorLink::Parent(id) => LinkRecord {
                kind: "parent".into(),
                ancestor_span_id: Some(id.to_string()),
                skipped: None,
            },
            AncestorLink::Ancestor { span_id, skipped } => LinkRecord {
                kind: "ancestor".into(),
                ancestor_span_id: span_id.map(|id| id.to_string()),
                skipped: Some(u64::from(skipped)),
            },
        };
        let (rate_exp, rate) = match span.rate.exponent() {
            Some(j) => (Some(u64::from(j)), None),
            None => (None, Some(span.rate.value())),
        };
        SpanRecord {
            trace_id: span.trace_id.to_string(),
            span_id: span.span_id.to_string(),
            link,
            service: span.service.clone(),
            op: span.operation.clone(),
            start_us: span.start_micros,
            dur_us: span.duration_micros,
            error: span.error,
            rate_exp,
            rate,
            attrs: span.attributes.clone(),
        }
    }

    fn into_span(self) -> Result<Span, String> {
        let trace_id = TraceId::new(parse_hex(&self.trace_id, 32, "trace_id")?)
            .map_err(|e| format!("trace_id: {e}"))?;
        let span_id = parse_span_id(&self.span_id, "span_id")?;
        let l = &self.link;
        let link = match l.kind.as_str() {
            "root" => {
                if l.ancestor_span_id.is_some() || l.skipped.is_some() {
                    return Err("root link carries ancestor fields".into());
                }
                AncestorLink::Root
            }
            "parent" => {
                if l.skipped.is_some() {
                    return Err("skipped present on parent link".into());
                }
                let id = l
                    .ancestor_span_id
                    .as_deref()
                    .ok_or("parent link without ancestor_span_id")?;
                AncestorLink::Parent(parse_span_id(id, "ancestor_span_id")?)
            }
            "ancestor" => {
                let skipped = l.skipped.ok_or("ancestor link without skipped")?;
                if skipped == 0 || skipped > u64::from(u16::MAX) {
                    return Err(format!("skipped out of range: {skipped}"));
                }
                let id = match l.ancestor_span_id.as_deref() {
                    Some(id) => Some(parse_span_id(id, "ancestor_span_id")?),
                    None => None,
                };
                AncestorLink::Ancestor {
                    span_id: id,
                    skipped: skipped as u16,
                }
            }
            other => return Err(format!("unknown link kind {other:?}")),
        };
        let rate = match (self.rate_exp, self.rate) {
            (Some(_), Some(_)) => return Err("both rate_exp and rate present".into()),
            (None, None) => return Err("missing rate_exp or rate".into()),
            (Some(j), None) => {
                if j > u64::from(SamplingRate::MAX_EXPONENT) {
                    return Err(format!("exponent out of range: {j}"));
                }
                SamplingRate::from_exponent(j as u32).map_err(|e| e.to_string())?
            }
            (None, Some(v)) => SamplingRate::general(v).map_err(|e| e.to_string())?,
        };
        Ok(Span {
            trace_id,
            span_id,
            link,
            service: self.service,
            operation: self.op,
            start_micros: self.start_us,
            duration_micros: self.dur_us,
            error: self.error,
            rate,
            attributes: self.attrs,
        })
    }
}

/// Writes one JSON object per span, each terminated by `\n`.
pub fn write_spans<'a, W, I>(spans: I, mut sink: W) -> Result<(), IoError>
where
    W: Write,
    I: IntoIterator<Item = &'a Span>,
{
    for span in spans {
        serde_json::to_writer(&mut sink, &SpanRecord::from_span(span))
            .map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

fn is_header(value: &serde_json::Value) -> bool {
    value.get("v").is_some() && value.get("trace_id").is_none()
}

fn lines<R: BufRead>(
    source: R,
) -> impl Iterator<Item = Result<(usize, serde_json::Value), IoError>> {
    source.lines().enumerate().filter_map(|(i, line)| {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(IoError::Io(e))),
        };
        if line.trim().is_empty() {
            return None;
        }
        match serde_json::from_str::<serde_json::Value>(&line) {
            Ok(v) if is_header(&v) => None,
            Ok(v) => Some(Ok((line_no, v))),
            Err(e) => Some(Err(IoError::Malformed {
                line: line_no,
                message: e.to_string(),
            })),
        }
    })
}

fn decode_span(line: usize, value: serde_json::Value) -> Result<Span, IoError> {
    let malformed = |message: String| IoError::Malformed { line, message };
    let record: SpanRecord = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    record.into_span().map_err(malformed)
}

/// Reads a span stream. Errors carry the 1-based line number.
pub fn read_spans<R: BufRead>(source: R) -> Result<Vec<Span>, IoError> {
    lines(source)
        .map(|item| item.and_then(|(line, value)| decode_span(line, value)))
        .collect()
}

/// Groups spans by trace id, in order of each trace's first appearance.
pub fn reassemble<I>(spans: I) -> Result<Vec<SampledTrace>, IoError>
where
    I: IntoIterator<Item = Span>,
{
    let mut order: Vec<TraceId> = Vec::new();
    let mut groups: HashMap<TraceId, (Vec<Span>, HashSet<SpanId>)> = HashMap::new();
    for span in spans {
        let entry = groups.entry(span.trace_id).or_insert_with(|| {
            order.push(span.trace_id);
            (Vec::new(), HashSet::new())
        });
        if !entry.1.insert(span.span_id) {
            return Err(IoError::DuplicateSpan {
                trace: span.trace_id,
                span: span.span_id,
            });
        }
        entry.0.push(span);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (spans, _) = groups.remove(&id).unwrap_or_default();
            SampledTrace::new(id, spans).expect("group is nonempty and homogeneous")
        })
        .collect())
}

/// Ground truth for one simulated trace.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub trace: FullTrace,
    pub complete: bool,
    pub sampled_spans: usize,
}

#[derive(Serialize, Deserialize)]
struct LedgerRecord {
    trace_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shared_index: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shared_r: Option<f64>,
    complete: bool,
    sampled_spans: usize,
    span_count: usize,
    spans: Vec<SpanRecord>,
}

/// Writes ledger entries, one JSON object per line.
pub fn write_ledger<'a, W, I>(entries: I, mut sink: W) -> Result<(), IoError>
where
    W: Write,
    I: IntoIterator<Item = &'a LedgerEntry>,
{
    for entry in entries {
        let (shared_index, shared_r) = match entry.trace.shared {
            SharedRandom::Index(i) => (Some(i), None),
            SharedRandom::Real(r) => (None, Some(r)),
        };
        let record = LedgerRecord {
            trace_id: entry.trace.trace_id.to_string(),
            shared_index,
            shared_r,
            complete: entry.complete,
            sampled_spans: entry.sampled_spans,
            span_count: entry.trace.spans.len(),
            spans: entry
                .trace
                .spans
                .iter()
                .map(SpanRecord::from_span)
                .collect(),
        };
        serde_json::to_writer(&mut sink, &record).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_ledger<R: BufRead>(source: R) -> Result<Vec<LedgerEntry>, IoError> {
    lines(source)
        .map(|item| {
            let (line, value) = item?;
            let malformed = |message: String| IoError::Malformed { line, message };
            let record: LedgerRecord =
                serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            let trace_id =
                TraceId::new(parse_hex(&record.trace_id, 32, "trace_id").map_err(malformed)?)
                    .map_err(|e| malformed(e.to_string()))?;
            let shared = match (record.shared_index, record.shared_r) {
                (Some(i), None) if i <= SamplingRate::MAX_EXPONENT => SharedRandom::Index(i),
                (None, Some(r)) if (0.0..1.0).contains(&r) => SharedRandom::Real(r),
                _ => {
                    return Err(malformed(
                        "need exactly one valid shared_index or shared_r".into(),
                    ))
                }
            };
            let spans = record
                .spans
                .into_iter()
                .map(|r| r.into_span().map_err(malformed))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LedgerEntry {
                trace: FullTrace::new(trace_id, spans, shared),
                complete: record.complete,
                sampled_spans: record.sampled_spans,
            })
        })
        .collect()
}
