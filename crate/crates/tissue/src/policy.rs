//! Syscall policies: building them from traces or responses, merging,
//! summary statistics, and evaluation against labeled traces.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::engine::ResponseRecord;
use crate::replay::NameMap;

/// How a policy came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Every syscall observed in a trace.
    Naive,
    /// Syscalls flagged by tissue responses.
    Generated,
    /// Union of other policies.
    Merged,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Naive => "naive",
            Provenance::Generated => "generated",
            Provenance::Merged => "merged",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Provenance::Naive),
            "generated" => Ok(Provenance::Generated),
            "merged" => Ok(Provenance::Merged),
            _ => Err(()),
        }
    }
}

/// A set of permitted syscall numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    permitted: BTreeSet<u32>,
    provenance: Provenance,
}

impl Policy {
    pub fn new(permitted: BTreeSet<u32>, provenance: Provenance) -> Self {
        Policy {
            permitted,
            provenance,
        }
    }

    pub fn permits(&self, syscall: u32) -> bool {
        self.permitted.contains(&syscall)
    }

    /// Permitted syscalls in ascending order.
    pub fn permitted(&self) -> &BTreeSet<u32> {
        &self.permitted
    }

    pub fn len(&self) -> usize {
        self.permitted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permitted.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_subset(&self, other: &Policy) -> bool {
        self.permitted.is_subset(&other.permitted)
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot read policy: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("nothing to merge: no policies given")]
    EmptyMerge,
    #[error("trace has no events")]
    EmptyTrace,
}

/// The permit-everything-observed baseline: one policy holding every
/// distinct syscall in the given traces. Empty input yields the empty
/// policy.
pub fn naive_policy(traces: &[Vec<u32>]) -> Policy {
    let permitted = traces.iter().flatten().copied().collect();
    Policy::new(permitted, Provenance::Naive)
}

/// The policy a run's responses imply: permit exactly the distinct
/// responded syscalls.
pub fn policy_from_responses(responses: &[ResponseRecord]) -> Policy {
    let permitted = responses.iter().map(|r| r.value).collect();
    Policy::new(permitted, Provenance::Generated)
}

/// Set union of the inputs. Merging nothing is an error.
pub fn merge_policies(policies: &[Policy]) -> Result<Policy, PolicyError> {
    if policies.is_empty() {
        return Err(PolicyError::EmptyMerge);
    }
    let permitted = policies
        .iter()
        .flat_map(|p| p.permitted.iter().copied())
        .collect();
    Ok(Policy::new(permitted, Provenance::Merged))
}

/// Renders a policy file: a provenance header plus one
/// `permit <number> # <name>` line per syscall, ascending. Names come
/// from the map when known.
pub fn format_policy(policy: &Policy, names: Option<&NameMap>) -> String {
    let mut out = format!("# provenance: {}\n", policy.provenance.as_str());
    for &syscall in &policy.permitted {
        match names.and_then(|m| m.name(syscall)) {
            Some(name) => out.push_str(&format!("permit {syscall} # {name}\n")),
            None => out.push_str(&format!("permit {syscall}\n")),
        }
    }
    out
}

/// Parses a policy file. Comments and blank lines are skipped; an
/// optional `# provenance:` header restores the provenance (defaulting
/// to generated).
pub fn parse_policy_text(text: &str) -> Result<Policy, PolicyError> {
    let mut provenance = Provenance::Generated;
    let mut permitted = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(tag) = comment.trim().strip_prefix("provenance:") {
                if let Ok(p) = tag.trim().parse() {
                    provenance = p;
                }
            }
            continue;
        }
        let stripped = match trimmed.split_once('#') {
            Some((before, _)) => before.trim(),
            None => trimmed,
        };
        if stripped.is_empty() {
            continue;
        }
        let Some(number_text) = stripped.strip_prefix("permit") else {
            return Err(PolicyError::Parse {
                line,
                message: format!("expected a permit line, got {stripped:?}"),
            });
        };
        let number_text = number_text.trim();
        let syscall: u32 = number_text.parse().map_err(|e| PolicyError::Parse {
            line,
            message: format!("bad syscall number {number_text:?}: {e}"),
        })?;
        permitted.insert(syscall);
    }
    Ok(Policy::new(permitted, provenance))
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<Policy, PolicyError> {
    parse_policy_text(&std::fs::read_to_string(path)?)
}

pub fn write_policy(
    policy: &Policy,
    names: Option<&NameMap>,
    path: impl AsRef<Path>,
) -> Result<(), PolicyError> {
    Ok(std::fs::write(path, format_policy(policy, names))?)
}

/// Coefficient of variation as a whole-number percentage,
/// `round(100 * sd / mean)`; undefined when the mean is zero.
pub fn coefficient_of_variation(mean: f64, sd: f64) -> Option<u32> {
    if mean <= 0.0 {
        return None;
    }
    Some((100.0 * sd / mean).round() as u32)
}

/// Per-syscall response statistics across repeated runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyscallStats {
    /// Mean responses per run.
    pub mean: f64,
    /// Sample standard deviation across runs (zero for a single run).
    pub sd: f64,
    /// Coefficient of variation, when defined.
    pub cv: Option<u32>,
}

/// Counts responses per syscall per run; syscalls missing from a run
/// count zero there.
pub fn response_count_matrix(runs: &[Vec<ResponseRecord>]) -> BTreeMap<u32, Vec<u64>> {
    let mut matrix: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for (i, run) in runs.iter().enumerate() {
        for response in run {
            matrix
                .entry(response.value)
                .or_insert_with(|| vec![0; runs.len()])[i] += 1;
        }
    }
    matrix
}

/// Mean, sample standard deviation, and CV per syscall across runs.
pub fn response_stats(runs: &[Vec<ResponseRecord>]) -> BTreeMap<u32, SyscallStats> {
    let matrix = response_count_matrix(runs);
    matrix
        .into_iter()
        .map(|(syscall, counts)| {
            let n = counts.len() as f64;
            let mean = counts.iter().sum::<u64>() as f64 / n;
            let sd = if counts.len() > 1 {
                let ss: f64 = counts
                    .iter()
                    .map(|&c| {
                        let d = c as f64 - mean;
                        d * d
                    })
                    .sum();
                (ss / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (
                syscall,
                SyscallStats {
                    mean,
                    sd,
                    cv: coefficient_of_variation(mean, sd),
                },
            )
        })
        .collect()
}

/// Whether a trace event belongs to background or attack traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Normal,
    Attack,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Normal => "normal",
            Tag::Attack => "attack",
        }
    }
}

impl std::str::FromStr for Tag {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Tag::Normal),
            "attack" => Ok(Tag::Attack),
            _ => Err(()),
        }
    }
}

/// One labeled trace event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledEvent {
    pub offset_us: u64,
    pub syscall: u32,
    pub tag: Tag,
}

/// A syscall trace with ground-truth labels, used to evaluate policies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTrace {
    /// Where the trace came from, e.g. a dataset name.
    pub source: String,
    pub events: Vec<LabeledEvent>,
}

impl LabeledTrace {
    /// Parses label-file text: `<offset_us> <syscall> <tag>` per line,
    /// `#` comments allowed.
    pub fn parse(source: impl Into<String>, text: &str) -> Result<Self, PolicyError> {
        let mut events = Vec::new();
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
            let mut field = |what: &str| {
                fields.next().ok_or_else(|| PolicyError::Parse {
                    line,
                    message: format!("missing {what}"),
                })
            };
            let syscall_text = field("syscall number")?;
            let tag_text = field("tag")?;
            let offset_us: u64 = offset_text.parse().map_err(|e| PolicyError::Parse {
                line,
                message: format!("bad offset {offset_text:?}: {e}"),
            })?;
            let syscall: u32 = syscall_text.parse().map_err(|e| PolicyError::Parse {
                line,
                message: format!("bad syscall number {syscall_text:?}: {e}"),
            })?;
            let tag: Tag = tag_text.parse().map_err(|_| PolicyError::Parse {
                line,
                message: format!("bad tag {tag_text:?} (want normal or attack)"),
            })?;
            events.push(LabeledEvent {
                offset_us,
                syscall,
                tag,
            });
        }
        Ok(LabeledTrace {
            source: source.into(),
            events,
        })
    }

    /// Loads a label file; the source name is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "trace".to_string());
        Self::parse(source, &std::fs::read_to_string(path)?)
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&format!(
                "{} {} {}\n",
                e.offset_us,
                e.syscall,
                e.tag.as_str()
            ));
        }
        out
    }

    /// The trace's syscalls in order, labels dropped.
    pub fn syscalls(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.syscall).collect()
    }
}

/// How a policy fares against one labeled trace. Percentages are whole
/// numbers truncated toward zero, so `permit_pct + deny_pct` can fall
/// just short of 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyReport {
    pub total: u64,
    pub permitted: u64,
    pub denied: u64,
    pub normal_events: u64,
    pub attack_events: u64,
    /// Percent of all events the policy permits.
    pub permit_pct: u32,
    /// Percent of all events the policy denies.
    pub deny_pct: u32,
    /// Percent of all events labeled normal.
    pub normal_pct: u32,
    /// Percent of all events labeled attack.
    pub attack_pct: u32,
}

fn trunc_pct(part: u64, whole: u64) -> u32 {
    (part * 100 / whole) as u32
}

/// Scores a policy against a labeled trace.
pub fn evaluate_policy(policy: &Policy, trace: &LabeledTrace) -> Result<PolicyReport, PolicyError> {
    if trace.events.is_empty() {
        return Err(PolicyError::EmptyTrace);
    }
    let total = trace.events.len() as u64;
    let permitted = trace
        .events
        .iter()
        .filter(|e| policy.permits(e.syscall))
        .count() as u64;
    let denied = total - permitted;
    let normal_events = trace.events.iter().filter(|e| e.tag == Tag::Normal).count() as u64;
    let attack_events = total - normal_events;
    Ok(PolicyReport {
        total,
        permitted,
        denied,
        normal_events,
        attack_events,
        permit_pct: trunc_pct(permitted, total),
        deny_pct: trunc_pct(denied, total),
        normal_pct: trunc_pct(normal_events, total),
        attack_pct: trunc_pct(attack_events, total),
    })
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// the lengths differ, fewer than two points are given, or either side
/// has zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

/// Average ranks (1-based); tied values share the mean of the ranks they
/// would occupy.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("no NaNs in ranks"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
