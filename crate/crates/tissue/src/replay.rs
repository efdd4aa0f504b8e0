//! Recorded event logs: parsing, strace conversion, and timed replay.
//!
//! A replay log is line-based ASCII, one event per line:
//!
//! ```text
//! # offset_us A syscall      or      offset_us S index level
//! 0 A 5
//! 1200 A 3
//! 1000000 S 0 0.35
//! ```
//!
//! Offsets are microseconds from the start of the log and must not
//! decrease.

use std::collections::BTreeMap;
use std::io::{self};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::net::{AntigenClient, SignalClient};

/// Payload of one replay event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    Antigen(u32),
    Signal { index: usize, level: f64 },
}

/// One timed event from a recorded log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayEvent {
    /// Microseconds from the start of the log.
    pub offset_us: u64,
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read log: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: offset {offset} is before the previous offset {previous}")]
    NonMonotonic {
        line: usize,
        offset: u64,
        previous: u64,
    },
    #[error("transport failed after sending {sent} events: {source}")]
    Transport { sent: usize, source: io::Error },
}

fn parse_error(line: usize, message: impl Into<String>) -> ReplayError {
    ReplayError::Parse {
        line,
        message: message.into(),
    }
}

/// Parses replay-log text. Blank lines and `#` comments are ignored.
pub fn parse_replay_text(text: &str) -> Result<Vec<ReplayEvent>, ReplayError> {
    let mut events = Vec::new();
    let mut previous: u64 = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.split_once('#') {
            Some((before, _)) => before,
            None => raw,
        };
        let mut fields = stripped.split_whitespace();
        let Some(offset_text) = fields.next() else {
            continue;
        };
        let offset_us: u64 = offset_text
            .parse()
            .map_err(|e| parse_error(line, format!("bad offset {offset_text:?}: {e}")))?;
        if offset_us < previous {
            return Err(ReplayError::NonMonotonic {
                line,
                offset: offset_us,
                previous,
            });
        }
        let kind = match fields.next() {
            Some("A") => {
                let value_text = fields
                    .next()
                    .ok_or_else(|| parse_error(line, "A event needs a syscall number"))?;
                let value: u32 = value_text.parse().map_err(|e| {
                    parse_error(line, format!("bad syscall number {value_text:?}: {e}"))
                })?;
                EventKind::Antigen(value)
            }
            Some("S") => {
                let index_text = fields
                    .next()
                    .ok_or_else(|| parse_error(line, "S event needs an index and a level"))?;
                let level_text = fields
                    .next()
                    .ok_or_else(|| parse_error(line, "S event needs a level"))?;
                let index: usize = index_text.parse().map_err(|e| {
                    parse_error(line, format!("bad signal index {index_text:?}: {e}"))
                })?;
                let level: f64 = level_text.parse().map_err(|e| {
                    parse_error(line, format!("bad signal level {level_text:?}: {e}"))
                })?;
                if !level.is_finite() {
                    return Err(parse_error(line, "signal level must be finite"));
                }
                EventKind::Signal { index, level }
            }
            Some(other) => return Err(parse_error(line, format!("unknown event kind {other:?}"))),
            None => return Err(parse_error(line, "offset without an event")),
        };
        if fields.next().is_some() {
            return Err(parse_error(line, "trailing fields after the event"));
        }
        events.push(ReplayEvent { offset_us, kind });
        previous = offset_us;
    }
    Ok(events)
}

/// Reads and parses a replay log file.
pub fn load_replay_log(path: impl AsRef<Path>) -> Result<Vec<ReplayEvent>, ReplayError> {
    parse_replay_text(&std::fs::read_to_string(path)?)
}

/// Renders events back into replay-log text.
pub fn format_replay_log(events: &[ReplayEvent]) -> String {
    let mut out = String::new();
    for e in events {
        match e.kind {
            EventKind::Antigen(value) => {
                out.push_str(&format!("{} A {}\n", e.offset_us, value));
            }
            EventKind::Signal { index, level } => {
                out.push_str(&format!("{} S {} {}\n", e.offset_us, index, level));
            }
        }
    }
    out
}

/// Maps syscall names to numbers (and back) for strace conversion and
/// policy annotation.
#[derive(Debug, Clone, Default)]
pub struct NameMap {
    by_name: BTreeMap<String, u32>,
    by_number: BTreeMap<u32, String>,
}

impl NameMap {
    /// Parses "name number" pairs, one per line, `#` comments allowed.
    /// A repeated name is an error; repeated numbers are aliases and the
    /// first name wins for reverse lookups.
    pub fn parse(text: &str) -> Result<Self, ReplayError> {
        let mut map = NameMap::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            };
            let mut fields = stripped.split_whitespace();
            let Some(name) = fields.next() else { continue };
            let number_text = fields
                .next()
                .ok_or_else(|| parse_error(line, format!("{name:?} has no number")))?;
            let number: u32 = number_text.parse().map_err(|e| {
                parse_error(line, format!("bad number {number_text:?} for {name:?}: {e}"))
            })?;
            if fields.next().is_some() {
                return Err(parse_error(line, "trailing fields after the number"));
            }
            if map.by_name.insert(name.to_string(), number).is_some() {
                return Err(parse_error(line, format!("duplicate name {name:?}")));
            }
            map.by_number.entry(number).or_insert_with(|| name.to_string());
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The map shipped with the crate.
    pub fn builtin() -> &'static NameMap {
        static BUILTIN: OnceLock<NameMap> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            NameMap::parse(include_str!("../data/syscall_map.txt"))
                .expect("shipped syscall map parses")
        })
    }

    pub fn number(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, number: u32) -> Option<&str> {
        self.by_number.get(&number).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// Outcome of converting an strace capture.
#[derive(Debug, Clone, Default)]
pub struct StraceReport {
    pub events: Vec<ReplayEvent>,
    /// Syscall names seen but missing from the map, with counts.
    pub skipped_names: BTreeMap<String, u64>,
    /// Lines that were not complete `name(args) = ret` records
    /// (signal deliveries, exits, unfinished/resumed halves, noise).
    pub skipped_lines: u64,
}

/// Converts strace output to replay events.
///
/// Handles untimestamped output, `-r` relative timestamps, `-t`/`-tt`
/// wall-clock timestamps, and `-ttt` epoch timestamps. Lines without a
/// timestamp are spaced `synth_gap_us` apart. Offsets never go
/// backwards; a clock that does is clamped.
pub fn parse_strace_text(text: &str, map: &NameMap, synth_gap_us: u64) -> StraceReport {
    let mut report = StraceReport::default();
    let mut last_offset: u64 = 0;
    let mut have_events = false;
    let mut relative_acc: f64 = 0.0;
    let mut first_absolute: Option<f64> = None;

    for raw in text.lines() {
        let mut rest = raw.trim();
        if rest.is_empty() {
            continue;
        }
        // strace -f prefixes lines with the pid
        if let Some(stripped) = rest.strip_prefix("[pid") {
            match stripped.split_once(']') {
                Some((_, after)) => rest = after.trim_start(),
                None => {
                    report.skipped_lines += 1;
                    continue;
                }
            }
        }

        // optional timestamp token
        let mut offset: Option<u64> = None;
        if let Some((first, after)) = rest.split_once(char::is_whitespace) {
            if let Some(seconds) = parse_decimal_seconds(first) {
                // large values are epoch stamps (-ttt), small ones are
                // -r deltas accumulated from the start of the capture
                if seconds >= 1_000_000.0 {
                    let base = *first_absolute.get_or_insert(seconds);
                    offset = Some(((seconds - base) * 1e6).round().max(0.0) as u64);
                } else {
                    relative_acc += seconds;
                    offset = Some((relative_acc * 1e6).round() as u64);
                }
                rest = after.trim_start();
            } else if let Some(seconds) = parse_clock(first) {
                let base = *first_absolute.get_or_insert(seconds);
                let mut delta = seconds - base;
                if delta < 0.0 {
                    // clock wrapped past midnight
                    delta += 86_400.0;
                }
                offset = Some((delta * 1e6).round() as u64);
                rest = after.trim_start();
            }
        }

        // signal deliveries, exit notices, and resumed halves are not
        // complete syscall records
        if rest.starts_with("---") || rest.starts_with("+++") || rest.starts_with("<...") {
            report.skipped_lines += 1;
            continue;
        }

        let Some(paren) = rest.find('(') else {
            report.skipped_lines += 1;
            continue;
        };
        let name = &rest[..paren];
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_')
        {
            report.skipped_lines += 1;
            continue;
        }
        if !rest[paren..].contains(" = ") {
            // unfinished call; its resumed half is skipped above
            report.skipped_lines += 1;
            continue;
        }

        let offset_us = match offset {
            Some(o) => o.max(last_offset),
            None => {
                if have_events {
                    last_offset + synth_gap_us
                } else {
                    0
                }
            }
        };

        match map.number(name) {
            Some(number) => {
                report.events.push(ReplayEvent {
                    offset_us,
                    kind: EventKind::Antigen(number),
                });
                last_offset = offset_us;
                have_events = true;
            }
            None => {
                *report.skipped_names.entry(name.to_string()).or_insert(0) += 1;
            }
        }
    }
    report
}

pub fn load_strace_log(
    path: impl AsRef<Path>,
    map: &NameMap,
    synth_gap_us: u64,
) -> Result<StraceReport, ReplayError> {
    Ok(parse_strace_text(
        &std::fs::read_to_string(path)?,
        map,
        synth_gap_us,
    ))
}

fn parse_decimal_seconds(token: &str) -> Option<f64> {
    let (whole, frac) = token.split_once('.')?;
    if whole.is_empty() || frac.is_empty() {
        return None;
    }
    if !whole.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    token.parse().ok()
}

fn parse_clock(token: &str) -> Option<f64> {
    let mut parts = token.splitn(3, ':');
    let hours: f64 = parse_int_field(parts.next()?)?;
    let minutes: f64 = parse_int_field(parts.next()?)?;
    let seconds_text = parts.next()?;
    let seconds: f64 = match seconds_text.split_once('.') {
        Some((whole, frac)) => {
            if !whole.bytes().all(|b| b.is_ascii_digit())
                || !frac.bytes().all(|b| b.is_ascii_digit())
            {
                return None;
            }
            seconds_text.parse().ok()?
        }
        None => parse_int_field(seconds_text)?,
    };
    Some(hours * 3600.0 + minutes * 60.0 + seconds)
}

fn parse_int_field(text: &str) -> Option<f64> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    text.parse().ok()
}

/// What a timed replay accomplished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplaySummary {
    pub sent: usize,
    pub elapsed: Duration,
}

/// Streams events through `sink`, pacing them so an event recorded at
/// offset `t` is delivered `t / rate` after the start. `rate` must be
/// positive; `f64::INFINITY` sends everything immediately.
pub fn replay_with(
    events: &[ReplayEvent],
    rate: f64,
    mut sink: impl FnMut(&ReplayEvent) -> io::Result<()>,
) -> Result<ReplaySummary, ReplayError> {
    assert!(rate > 0.0, "replay rate must be positive");
    let start = Instant::now();
    for (sent, event) in events.iter().enumerate() {
        if rate.is_finite() {
            let due = Duration::from_micros((event.offset_us as f64 / rate) as u64);
            if let Some(pause) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(pause);
            }
        }
        sink(event).map_err(|source| ReplayError::Transport { sent, source })?;
    }
    Ok(ReplaySummary {
        sent: events.len(),
        elapsed: start.elapsed(),
    })
}

/// Replays a log against a live server, antigen events on an antigen
/// session and signal events on a signal session.
pub fn replay_to_server(
    events: &[ReplayEvent],
    rate: f64,
    addr: &str,
) -> Result<ReplaySummary, ReplayError> {
    let mut antigen = AntigenClient::connect(addr).map_err(|source| ReplayError::Transport {
        sent: 0,
        source,
    })?;
    let mut signal = SignalClient::connect(addr).map_err(|source| ReplayError::Transport {
        sent: 0,
        source,
    })?;
    replay_with(events, rate, |event| match event.kind {
        EventKind::Antigen(value) => antigen.send(value),
        EventKind::Signal { index, level } => signal.send(index, level),
    })
}
