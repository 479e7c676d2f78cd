//! Hit-log parsing, sessionization and the temporal train/test split.
//!
//! Two input encodings are accepted. JSONL carries one object per line:
//!
//! ```text
//! {"user_id":"u1","ts":1700000000,"report_id":"r3","kind":"timeseries",
//!  "metric":"visits","dim_element":"home","values":[2,5,3,7],"session":"s9"}
//! ```
//!
//! CSV uses a header row with the same column names; `values` is a
//! semicolon-joined list of numbers and `session` may be empty.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default inactivity gap (seconds) that closes a session when no hints exist.
pub const DEFAULT_SESSION_TIMEOUT: u64 = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    TimeSeries,
    Histogram,
}

/// One timestamped report access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub user_id: String,
    #[serde(rename = "ts")]
    pub timestamp: u64,
    pub report_id: String,
    pub kind: ReportKind,
    pub metric: String,
    #[serde(rename = "dim_element")]
    pub dimension_element: String,
    pub values: Vec<f64>,
    #[serde(rename = "session", default, skip_serializing_if = "Option::is_none")]
    pub session_hint: Option<String>,
}

impl HitRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.user_id.is_empty() {
            return Err("empty user_id".into());
        }
        if self.report_id.is_empty() {
            return Err("empty report_id".into());
        }
        if self.values.is_empty() {
            return Err("empty values".into());
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::argument(format!("unknown hit format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedHits {
    pub records: Vec<HitRecord>,
    pub skipped: usize,
}

/// Parses a hit log. Malformed rows are skipped and counted; if more than
/// half of the rows are malformed the whole input is rejected.
pub fn parse_hits<R: Read>(source: R, format: Format) -> Result<ParsedHits> {
    let parsed = match format {
        Format::Jsonl => parse_jsonl(source)?,
        Format::Csv => parse_csv(source)?,
    };
    let total = parsed.records.len() + parsed.skipped;
    if total > 0 && parsed.skipped * 2 > total {
        return Err(Error::data(format!(
            "{} of {} rows malformed",
            parsed.skipped, total
        )));
    }
    if parsed.skipped > 0 {
        log::warn!("skipped {} malformed hit rows", parsed.skipped);
    }
    Ok(parsed)
}

fn parse_jsonl<R: Read>(source: R) -> Result<ParsedHits> {
    let mut out = ParsedHits::default();
    for line in std::io::BufReader::new(source).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<HitRecord>(&line) {
            Ok(hit) if hit.validate().is_ok() => out.records.push(hit),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

fn parse_csv<R: Read>(source: R) -> Result<ParsedHits> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let cols = CsvColumns {
        user: column("user_id"),
        ts: column("ts"),
        report: column("report_id"),
        kind: column("kind"),
        metric: column("metric"),
        element: column("dim_element"),
        values: column("values"),
        session: column("session"),
    };

    let mut out = ParsedHits::default();
    for row in reader.records() {
        let row = match row {
            Ok(row) => row,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                out.skipped += 1;
                continue;
            }
        };
        match cols.hit(&row) {
            Some(hit) if hit.validate().is_ok() => out.records.push(hit),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

struct CsvColumns {
    user: Option<usize>,
    ts: Option<usize>,
    report: Option<usize>,
    kind: Option<usize>,
    metric: Option<usize>,
    element: Option<usize>,
    values: Option<usize>,
    session: Option<usize>,
}

impl CsvColumns {
    fn hit(&self, row: &csv::StringRecord) -> Option<HitRecord> {
        let field = |idx: Option<usize>| idx.and_then(|i| row.get(i));
        let kind = match field(self.kind)? {
            "timeseries" => ReportKind::TimeSeries,
            "histogram" => ReportKind::Histogram,
            _ => return None,
        };
        let values = field(self.values)?
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().ok())
            .collect::<Option<Vec<_>>>()?;
        let session_hint = field(self.session)
            .filter(|s| !s.is_empty())
            .map(str::to_owned);
        Some(HitRecord {
            user_id: field(self.user)?.to_owned(),
            timestamp: field(self.ts)?.parse().ok()?,
            report_id: field(self.report)?.to_owned(),
            kind,
            metric: field(self.metric)?.to_owned(),
            dimension_element: field(self.element)?.to_owned(),
            values,
            session_hint,
        })
    }
}

/// Writes hits as JSONL, one object per line.
pub fn write_jsonl<W: Write>(mut sink: W, hits: &[HitRecord]) -> Result<()> {
    for hit in hits {
        serde_json::to_writer(&mut sink, hit)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// A time-ordered run of hits by one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    pub hits: Vec<HitRecord>,
}

impl Session {
    pub fn start(&self) -> u64 {
        self.hits.first().map_or(0, |h| h.timestamp)
    }

    pub fn end(&self) -> u64 {
        self.hits.last().map_or(0, |h| h.timestamp)
    }

    pub fn report_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.report_id.as_str())
    }
}

/// Groups hits per user and splits each user's stream into sessions.
///
/// Between two consecutive hits that both carry a session hint, a change of
/// hint starts a new session. Otherwise a gap strictly larger than `timeout`
/// does. Equal timestamps keep input order. Users come out sorted by id.
pub fn sessionize(hits: &[HitRecord], timeout: u64) -> Vec<Session> {
    assert!(timeout > 0, "session timeout must be positive");
    let mut per_user: BTreeMap<&str, Vec<&HitRecord>> = BTreeMap::new();
    for hit in hits {
        per_user.entry(hit.user_id.as_str()).or_default().push(hit);
    }

    let mut sessions = Vec::new();
    for (user, mut user_hits) in per_user {
        // stable: ties keep file order
        user_hits.sort_by_key(|h| h.timestamp);
        let mut current: Vec<HitRecord> = Vec::new();
        for hit in user_hits {
            if let Some(prev) = current.last() {
                let split = match (&prev.session_hint, &hit.session_hint) {
                    (Some(a), Some(b)) => a != b,
                    _ => hit.timestamp - prev.timestamp > timeout,
                };
                if split {
                    sessions.push(Session {
                        user_id: user.to_owned(),
                        hits: std::mem::take(&mut current),
                    });
                }
            }
            current.push(hit.clone());
        }
        if !current.is_empty() {
            sessions.push(Session {
                user_id: user.to_owned(),
                hits: current,
            });
        }
    }
    sessions
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub split_instant: u64,
}

impl Dataset {
    pub fn train_hits(&self) -> usize {
        self.train.iter().map(|s| s.hits.len()).sum()
    }

    pub fn test_hits(&self) -> usize {
        self.test.iter().map(|s| s.hits.len()).sum()
    }
}

/// Splits sessions at a single instant so that every training hit precedes
/// it and every test hit is at or after it.
///
/// The cut is placed at a session start. Among cuts that do not split any
/// session, the earliest one leaving at least `train_fraction` of the hits in
/// train is chosen; sessions overlapping the cut are pulled into train. If no
/// such cut leaves a non-empty test side, the latest valid cut is used.
pub fn temporal_split(sessions: &[Session], train_fraction: f64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::argument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut ordered: Vec<&Session> = sessions.iter().filter(|s| !s.hits.is_empty()).collect();
    if ordered.len() < 2 {
        return Err(Error::argument(
            "need at least two sessions to produce a non-empty test split",
        ));
    }
    ordered.sort_by(|a, b| (a.start(), a.end(), &a.user_id).cmp(&(b.start(), b.end(), &b.user_id)));

    let total: usize = ordered.iter().map(|s| s.hits.len()).sum();
    let wanted = train_fraction * total as f64;

    // valid cut c: every session before c ends strictly before session c starts
    let mut chosen = None;
    let mut last_valid = None;
    let mut prefix_end = 0u64;
    let mut prefix_hits = 0usize;
    for c in 1..ordered.len() {
        prefix_end = prefix_end.max(ordered[c - 1].end());
        prefix_hits += ordered[c - 1].hits.len();
        if prefix_end < ordered[c].start() {
            last_valid = Some(c);
            if prefix_hits as f64 >= wanted {
                chosen = Some(c);
                break;
            }
        }
    }
    let cut = chosen.or(last_valid).ok_or_else(|| {
        Error::data("sessions overlap everywhere; no instant separates train from test")
    })?;

    Ok(Dataset {
        train: ordered[..cut].iter().map(|s| (*s).clone()).collect(),
        test: ordered[cut..].iter().map(|s| (*s).clone()).collect(),
        split_instant: ordered[cut].start(),
    })
}
