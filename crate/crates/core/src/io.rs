//! Line-delimited JSON records.
//!
//! Input lines look like `{"id": "a", "s": [1, 0], "y": [1], "u": 2.0}`; `u`
//! defaults to 1 and `y` may be omitted when there are no labels. Unknown
//! fields are ignored and counted. Decision logs reuse the same layout with
//! `q`, `kept` and `draw` appended, so they can be read back as input.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use log::warn;
use serde::de::{self, IgnoredAny, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{BalanceError, Result};
use crate::sampler::SampleDecision;
use crate::types::{Example, WeightedExample};

/// One parsed line, before validation.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct RecordLine {
    pub id: Option<String>,
    pub s: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
    pub u: Option<f64>,
    pub kept: Option<bool>,
    pub unknown_fields: u32,
}

impl<'de> Deserialize<'de> for RecordLine {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct LineVisitor;

        impl<'de> Visitor<'de> for LineVisitor {
            type Value = RecordLine;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a record object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RecordLine, A::Error> {
                let mut rec = RecordLine::default();
                while let Some(key) = map.next_key::<std::borrow::Cow<'de, str>>()? {
                    match key.as_ref() {
                        "id" => rec.id = Some(map.next_value::<IdValue>()?.0),
                        "s" => rec.s = Some(map.next_value()?),
                        "y" => rec.y = Some(map.next_value()?),
                        "u" => rec.u = map.next_value()?,
                        "kept" => rec.kept = Some(map.next_value()?),
                        // decision-log columns, recomputed downstream
                        "q" | "draw" => {
                            map.next_value::<IgnoredAny>()?;
                        }
                        _ => {
                            map.next_value::<IgnoredAny>()?;
                            rec.unknown_fields += 1;
                        }
                    }
                }
                Ok(rec)
            }
        }

        deserializer.deserialize_map(LineVisitor)
    }
}

/// Ids may be written as strings or integers.
struct IdValue(String);

impl<'de> Deserialize<'de> for IdValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct IdVisitor;

        impl<'de> Visitor<'de> for IdVisitor {
            type Value = IdValue;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a string or integer id")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<IdValue, E> {
                Ok(IdValue(v.to_owned()))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<IdValue, E> {
                Ok(IdValue(v.to_string()))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<IdValue, E> {
                Ok(IdValue(v.to_string()))
            }
        }

        deserializer.deserialize_any(IdVisitor)
    }
}

fn to_binary(what: &'static str, xs: &[f64]) -> Result<Vec<u8>> {
    xs.iter()
        .enumerate()
        .map(|(index, &x)| {
            if x == 0.0 {
                Ok(0)
            } else if x == 1.0 {
                Ok(1)
            } else {
                Err(BalanceError::NonBinaryEntry { what, index, value: x })
            }
        })
        .collect()
}

impl RecordLine {
    /// Converts to an example, checking binary entries, utility and, when
    /// given, the expected `(m, c)`.
    pub fn into_example(self, dims: Option<(usize, usize)>) -> Result<Example> {
        let id = self.id.ok_or_else(|| BalanceError::InvalidSpec("missing field 'id'".into()))?;
        let s = to_binary("s", &self.s.ok_or_else(|| BalanceError::InvalidSpec("missing field 's'".into()))?)?;
        let y = to_binary("y", &self.y.unwrap_or_default())?;
        let u = self.u.unwrap_or(1.0);
        if !(u.is_finite() && u > 0.0) {
            return Err(BalanceError::NonPositiveUtility(u));
        }
        if let Some((m, c)) = dims {
            if s.len() != m {
                return Err(BalanceError::DimensionMismatch { what: "s", got: s.len(), expected: m });
            }
            if y.len() != c {
                return Err(BalanceError::DimensionMismatch { what: "y", got: y.len(), expected: c });
            }
        }
        Ok(Example { id, s, y, u })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub lines: u64,
    pub records: u64,
    pub malformed: u64,
    pub unknown_fields: u64,
    /// Records dropped by a `kept == false` filter.
    pub filtered: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Fail on the first malformed line instead of skipping it.
    pub strict: bool,
    /// Expected `(m, c)`; inferred from the first valid record when absent.
    pub dims: Option<(usize, usize)>,
    /// Only yield records whose `kept` flag is not false.
    pub kept_only: bool,
}

/// Streaming reader yielding validated examples.
pub struct RecordReader<R> {
    input: R,
    opts: IngestOptions,
    stats: IngestStats,
    buf: String,
    failed: bool,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(input: R, opts: IngestOptions) -> Self {
        Self {
            input,
            opts,
            stats: IngestStats::default(),
            buf: String::with_capacity(256),
            failed: false,
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.opts.dims
    }

    fn parse_line(&mut self) -> Result<Option<Example>> {
        let line = self.buf.trim();
        if line.is_empty() {
            return Ok(None);
        }
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| BalanceError::InvalidSpec(e.to_string()))?;
        self.stats.unknown_fields += u64::from(rec.unknown_fields);
        let kept = rec.kept;
        let e = rec.into_example(self.opts.dims)?;
        if self.opts.dims.is_none() {
            self.opts.dims = Some((e.s.len(), e.y.len()));
        }
        if self.opts.kept_only && kept == Some(false) {
            self.stats.filtered += 1;
            return Ok(None);
        }
        Ok(Some(e))
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(BalanceError::UnreadableSource(e.to_string())));
                }
            }
            self.stats.lines += 1;
            match self.parse_line() {
                Ok(Some(e)) => {
                    self.stats.records += 1;
                    return Some(Ok(e));
                }
                Ok(None) => continue,
                Err(err) => {
                    self.stats.malformed += 1;
                    let line = self.stats.lines;
                    if self.opts.strict {
                        self.failed = true;
                        return Some(Err(BalanceError::MalformedLine {
                            line,
                            reason: err.to_string(),
                        }));
                    }
                    if self.stats.malformed <= 10 {
                        warn!("skipping line {line}: {err}");
                    }
                }
            }
        }
    }
}

/// Opens `path` for reading; `-` means standard input.
pub fn open_source(path: &Path) -> Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let file = File::open(path).map_err(|e| BalanceError::UnreadableSource(format!("{}: {e}", path.display())))?;
    Ok(Box::new(BufReader::with_capacity(1 << 16, file)))
}

/// Reads every valid example from `input`.
pub fn read_examples<R: BufRead>(input: R, opts: IngestOptions) -> Result<(Vec<Example>, IngestStats)> {
    let mut reader = RecordReader::new(input, opts);
    let mut out = Vec::new();
    for item in reader.by_ref() {
        out.push(item?);
    }
    let stats = reader.stats();
    if stats.unknown_fields > 0 {
        warn!("ignored {} unknown field(s)", stats.unknown_fields);
    }
    if stats.malformed > 0 {
        warn!("skipped {} malformed line(s)", stats.malformed);
    }
    Ok((out, stats))
}

/// Convenience wrapper over [`open_source`] and [`read_examples`].
pub fn ingest(path: &Path, opts: IngestOptions) -> Result<(Vec<Example>, IngestStats)> {
    read_examples(open_source(path)?, opts)
}

pub fn read_all<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| BalanceError::UnreadableSource(e.to_string()))?;
    Ok(buf)
}

#[derive(Serialize)]
struct ExampleOut<'a> {
    id: &'a str,
    s: &'a [u8],
    y: &'a [u8],
    u: f64,
}

#[derive(Serialize)]
struct WeightOut<'a> {
    id: &'a str,
    q: f64,
    alpha: f64,
    beta: f64,
}

#[derive(Serialize)]
struct DecisionOut<'a> {
    id: &'a str,
    s: &'a [u8],
    y: &'a [u8],
    u: f64,
    q: f64,
    kept: bool,
    draw: f64,
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(io::Error::other)?;
    w.write_all(b"\n")
}

pub fn write_examples<W: Write>(w: &mut W, data: &[Example]) -> io::Result<()> {
    for e in data {
        write_line(w, &ExampleOut { id: &e.id, s: &e.s, y: &e.y, u: e.u })?;
    }
    Ok(())
}

pub fn write_weights<W: Write>(w: &mut W, items: &[WeightedExample]) -> io::Result<()> {
    for we in items {
        write_line(
            w,
            &WeightOut {
                id: &we.example.id,
                q: we.q,
                alpha: we.alpha,
                beta: we.beta,
            },
        )?;
    }
    Ok(())
}

/// Decision log: the input record plus `q`, `kept` and `draw`.
pub fn write_decisions<W: Write>(w: &mut W, items: &[WeightedExample], decisions: &[SampleDecision]) -> io::Result<()> {
    for (we, d) in items.iter().zip(decisions) {
        let e = &we.example;
        write_line(
            w,
            &DecisionOut {
                id: &e.id,
                s: &e.s,
                y: &e.y,
                u: e.u,
                q: d.q,
                kept: d.kept,
                draw: d.draw,
            },
        )?;
    }
    Ok(())
}
