//! Experiment plumbing: synthetic labeled datasets, the default probe,
//! response logs, rate series, and report formatting.

use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::engine::{ProbeRecorder, ProbeValue, ResponseRecord};
use crate::policy::{LabeledEvent, LabeledTrace, PolicyReport, Tag};
use crate::replay::{EventKind, ReplayEvent};

/// Per-syscall weights of ordinary traffic: a web-server-shaped mix
/// where `close` dominates, `open`/`read` follow, and a long tail of
/// rare calls rounds it out.
pub fn baseline_freq_table() -> &'static [(u32, u32)] {
    &[
        (12, 2),   // chdir
        (11, 2),   // execve
        (136, 2),  // personality
        (66, 2),   // setsid
        (2, 2),    // fork
        (4, 2),    // write
        (309, 2),  // send
        (13, 2),   // time
        (197, 2),  // fstat64
        (19, 2),   // lseek
        (118, 2),  // fsync
        (191, 2),  // getrlimit
        (304, 2),  // listen
        (142, 3),  // select
        (78, 4),   // gettimeofday
        (306, 4),  // getsockname
        (1, 4),    // exit
        (122, 4),  // uname
        (106, 4),  // stat
        (303, 5),  // connect
        (141, 8),  // getdents
        (125, 8),  // mprotect
        (168, 8),  // poll
        (311, 9),  // sendto
        (312, 9),  // recvfrom
        (174, 10), // rt_sigaction
        (20, 10),  // getpid
        (55, 12),  // fcntl
        (302, 12), // bind
        (91, 15),  // munmap
        (45, 16),  // brk
        (108, 23), // fstat
        (54, 24),  // ioctl
        (301, 25), // socket
        (90, 27),  // old_mmap
        (3, 27),   // read
        (5, 30),   // open
        (6, 557),  // close
    ]
}

/// Syscalls that only show up in attack traffic; none of them appear in
/// the baseline table.
pub fn default_attack_syscalls() -> Vec<u32> {
    vec![9, 15, 37, 83, 128]
}

/// The three canned scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioLabel {
    /// Background traffic only.
    Normal,
    /// An attack that takes the service down: a long attack segment and
    /// a CPU collapse after the syscalls stop.
    Success,
    /// An attack that is absorbed: a short attack tail and a modest CPU
    /// bump.
    Failure,
}

impl ScenarioLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioLabel::Normal => "normal",
            ScenarioLabel::Success => "success",
            ScenarioLabel::Failure => "failure",
        }
    }
}

impl std::str::FromStr for ScenarioLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(ScenarioLabel::Normal),
            "success" => Ok(ScenarioLabel::Success),
            "failure" => Ok(ScenarioLabel::Failure),
            _ => Err(()),
        }
    }
}

/// CPU load shape replayed as signal 0: flat `idle` until the attack
/// segment starts, then `active_cycle` levels repeating at 1 Hz while it
/// runs, then `decline` steps (one per second) once the syscall stream
/// ends.
#[derive(Debug, Clone, PartialEq)]
pub struct CpuProfile {
    pub idle: f64,
    pub active_cycle: Vec<f64>,
    pub decline: Vec<f64>,
}

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub label: ScenarioLabel,
    pub seed: u64,
    /// Number of syscall events.
    pub events: usize,
    /// The syscall stream is scaled to span exactly this long.
    pub event_span_us: u64,
    /// Final fraction of events tagged attack.
    pub attack_fraction: f64,
    /// Probability an attack-segment event is drawn from the attack set
    /// instead of the baseline table.
    pub attack_mix: f64,
    pub attack_syscalls: Vec<u32>,
    pub freq_table: Vec<(u32, u32)>,
    pub cpu: CpuProfile,
    /// Alternate fast/slow traffic with this half-period; zero keeps the
    /// stream homogeneous.
    pub burst_period_us: u64,
    /// Fast-to-slow rate ratio while bursting.
    pub burst_ratio: f64,
}

impl ScenarioSpec {
    pub fn for_label(label: ScenarioLabel, seed: u64) -> Self {
        let base = ScenarioSpec {
            label,
            seed,
            events: 1000,
            event_span_us: 60_000_000,
            attack_fraction: 0.0,
            attack_mix: 0.0,
            attack_syscalls: default_attack_syscalls(),
            freq_table: baseline_freq_table().to_vec(),
            cpu: CpuProfile {
                idle: 0.05,
                active_cycle: Vec::new(),
                decline: Vec::new(),
            },
            burst_period_us: 5_000_000,
            burst_ratio: 3.0,
        };
        match label {
            ScenarioLabel::Normal => base,
            ScenarioLabel::Success => ScenarioSpec {
                event_span_us: 54_000_000,
                attack_fraction: 0.76,
                attack_mix: 0.3,
                cpu: CpuProfile {
                    idle: 0.05,
                    active_cycle: vec![0.9, 0.8, 0.7, 0.6, 0.5],
                    decline: vec![0.45, 0.3, 0.2, 0.1, 0.05],
                },
                burst_period_us: 0,
                ..base
            },
            ScenarioLabel::Failure => ScenarioSpec {
                event_span_us: 57_000_000,
                attack_fraction: 0.15,
                attack_mix: 0.3,
                cpu: CpuProfile {
                    idle: 0.05,
                    active_cycle: vec![0.35, 0.3],
                    decline: vec![0.15, 0.08],
                },
                burst_period_us: 0,
                ..base
            },
        }
    }

    fn validated(&self) -> Result<(), HarnessError> {
        if self.events == 0 {
            return Err(HarnessError::InvalidSpec("events must be at least 1".into()));
        }
        if self.event_span_us == 0 {
            return Err(HarnessError::InvalidSpec("event_span must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.attack_fraction) {
            return Err(HarnessError::InvalidSpec(
                "attack_fraction must lie in 0..=1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.attack_mix) {
            return Err(HarnessError::InvalidSpec(
                "attack_mix must lie in 0..=1".into(),
            ));
        }
        if self.attack_fraction > 0.0 && self.attack_mix > 0.0 && self.attack_syscalls.is_empty() {
            return Err(HarnessError::InvalidSpec(
                "attack_mix needs attack_syscalls".into(),
            ));
        }
        if self.freq_table.is_empty() || self.freq_table.iter().all(|&(_, w)| w == 0) {
            return Err(HarnessError::InvalidSpec(
                "freq_table needs at least one positive weight".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read: {0}")]
    Io(#[from] io::Error),
    #[error("bad scenario: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A generated dataset: the replayable events plus ground-truth labels
/// for the syscall events.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub events: Vec<ReplayEvent>,
    pub labels: Vec<LabeledEvent>,
    /// Offset of the first attack-tagged event, when there is one.
    pub attack_start_us: Option<u64>,
}

/// Builds a dataset from a spec, deterministically per seed. Inter-event
/// gaps are exponential (rates optionally alternating to form bursts),
/// scaled so the last syscall lands exactly at `event_span_us`. The CPU
/// profile is sampled once per second as signal-0 events.
pub fn generate_dataset(spec: &ScenarioSpec) -> Result<Dataset, HarnessError> {
    spec.validated()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // raw exponential arrivals, optionally burst-modulated
    let mean_gap = spec.event_span_us as f64 / spec.events as f64;
    let exp = Exp::new(1.0).expect("unit rate is valid");
    let mut raw = Vec::with_capacity(spec.events);
    let mut t = 0.0_f64;
    for _ in 0..spec.events {
        let mut gap = exp.sample(&mut rng) * mean_gap;
        if spec.burst_period_us > 0 && spec.burst_ratio > 1.0 {
            let phase = (t as u64 / spec.burst_period_us) % 2;
            let r = spec.burst_ratio;
            // alternate fast and slow with the overall rate preserved
            let factor = if phase == 0 {
                (1.0 + r) / (2.0 * r)
            } else {
                (1.0 + r) / 2.0
            };
            gap *= factor;
        }
        t += gap;
        raw.push(t);
    }
    let scale = spec.event_span_us as f64 / raw.last().copied().unwrap_or(1.0);
    let offsets: Vec<u64> = raw.iter().map(|&x| (x * scale).round() as u64).collect();

    // values and labels; the attack occupies the final stretch
    let attack_count = (spec.events as f64 * spec.attack_fraction).round() as usize;
    let attack_from = spec.events - attack_count.min(spec.events);
    let weights: Vec<u32> = spec.freq_table.iter().map(|&(_, w)| w).collect();
    let weighted = rand::distr::weighted::WeightedIndex::new(&weights)
        .map_err(|e| HarnessError::InvalidSpec(format!("bad freq table: {e}")))?;
    let mut labels = Vec::with_capacity(spec.events);
    let mut attack_start_us = None;
    for (i, &offset_us) in offsets.iter().enumerate() {
        let in_attack = i >= attack_from && attack_count > 0;
        let syscall = if in_attack && rng.random::<f64>() < spec.attack_mix {
            spec.attack_syscalls[rng.random_range(0..spec.attack_syscalls.len())]
        } else {
            spec.freq_table[weighted.sample(&mut rng)].0
        };
        let tag = if in_attack { Tag::Attack } else { Tag::Normal };
        if in_attack && attack_start_us.is_none() {
            attack_start_us = Some(offset_us);
        }
        labels.push(LabeledEvent {
            offset_us,
            syscall,
            tag,
        });
    }

    // cpu profile sampled at 1 Hz across the whole span
    let event_span_s = spec.event_span_us / 1_000_000;
    let total_span_s = event_span_s + spec.cpu.decline.len() as u64 + 1;
    let attack_start_s = attack_start_us.map(|us| us / 1_000_000);
    let mut signals = Vec::new();
    for s in 0..=total_span_s {
        let level = match attack_start_s {
            Some(_) if s > event_span_s => {
                let step = (s - event_span_s - 1) as usize;
                spec.cpu
                    .decline
                    .get(step)
                    .copied()
                    .unwrap_or(spec.cpu.idle)
            }
            Some(start) if s >= start && !spec.cpu.active_cycle.is_empty() => {
                spec.cpu.active_cycle[((s - start) as usize) % spec.cpu.active_cycle.len()]
            }
            _ => spec.cpu.idle,
        };
        signals.push(ReplayEvent {
            offset_us: s * 1_000_000,
            kind: EventKind::Signal { index: 0, level },
        });
    }

    // interleave, signals first at equal offsets
    let mut events: Vec<ReplayEvent> = labels
        .iter()
        .map(|l| ReplayEvent {
            offset_us: l.offset_us,
            kind: EventKind::Antigen(l.syscall),
        })
        .chain(signals)
        .collect();
    events.sort_by_key(|e| {
        let kind_order = match e.kind {
            EventKind::Signal { .. } => 0u8,
            EventKind::Antigen(_) => 1,
        };
        (e.offset_us, kind_order)
    });

    Ok(Dataset {
        events,
        labels,
        attack_start_us,
    })
}

/// Writes via a sibling temp file plus rename so a failure never leaves
/// a partial file behind.
pub fn atomic_write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> io::Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

/// Writes `<prefix>.log` and `<prefix>.labels`; returns both paths.
pub fn write_dataset(dataset: &Dataset, prefix: impl AsRef<Path>) -> io::Result<(PathBuf, PathBuf)> {
    let prefix = prefix.as_ref();
    let log_path = prefix.with_extension("log");
    let labels_path = prefix.with_extension("labels");
    atomic_write(&log_path, crate::replay::format_replay_log(&dataset.events))?;
    let trace = LabeledTrace {
        source: prefix
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        events: dataset.labels.clone(),
    };
    atomic_write(&labels_path, trace.format())?;
    Ok((log_path, labels_path))
}

/// The probe set the tools record by default: store occupancy, display
/// and response totals, the mean producer action time, and every VR
/// lock (list-valued).
pub fn default_probe() -> ProbeRecorder {
    ProbeRecorder::new(|view| {
        let comp = view.compartment;
        let mut cell_antigen = 0usize;
        let mut displayed = 0usize;
        let mut producers = 0usize;
        let mut action_time_sum = 0u64;
        let mut locks = Vec::new();
        for (_, cell) in comp.cells.iter_live() {
            cell_antigen += cell.stored_count();
            displayed += cell.displayed_antigen().count();
            for p in &cell.antigen_producers {
                producers += 1;
                action_time_sum += p.action_time();
            }
            for vr in &cell.vr_receptors {
                locks.push(vr.lock as f64);
            }
        }
        let mean_action_time = if producers > 0 {
            action_time_sum as f64 / producers as f64
        } else {
            0.0
        };
        Ok(vec![
            (
                "tissue_antigen".into(),
                ProbeValue::Scalar(comp.antigen.occupied() as f64),
            ),
            ("cell_antigen".into(), ProbeValue::Scalar(cell_antigen as f64)),
            ("displayed".into(), ProbeValue::Scalar(displayed as f64)),
            (
                "responses".into(),
                ProbeValue::Scalar(view.responses.len() as f64),
            ),
            (
                "mean_action_time".into(),
                ProbeValue::Scalar(mean_action_time),
            ),
            ("vr_locks".into(), ProbeValue::List(locks)),
        ])
    })
}

/// Renders responses as `tick,cell_id,syscall` CSV.
pub fn format_responses_csv(responses: &[ResponseRecord]) -> String {
    let mut out = String::from("tick,cell_id,syscall\n");
    for r in responses {
        out.push_str(&format!("{},{},{}\n", r.tick, r.cell_id, r.value));
    }
    out
}

/// Parses `tick,cell_id,syscall` CSV (header required).
pub fn parse_responses_csv(text: &str) -> Result<Vec<ResponseRecord>, HarnessError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "tick,cell_id,syscall" => {}
        Some((_, header)) => {
            return Err(HarnessError::Parse {
                line: 1,
                message: format!("unexpected header {header:?}"),
            })
        }
        None => return Ok(Vec::new()),
    }
    let mut responses = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(',');
        let mut field = |what: &str| {
            fields.next().ok_or_else(|| HarnessError::Parse {
                line,
                message: format!("missing {what}"),
            })
        };
        let tick = field("tick")?;
        let cell_id = field("cell_id")?;
        let syscall = field("syscall")?;
        let parse_err = |what: &str, e: &dyn std::fmt::Display| HarnessError::Parse {
            line,
            message: format!("bad {what}: {e}"),
        };
        responses.push(ResponseRecord {
            tick: tick.trim().parse().map_err(|e| parse_err("tick", &e))?,
            cell_id: cell_id
                .trim()
                .parse()
                .map_err(|e| parse_err("cell_id", &e))?,
            value: syscall
                .trim()
                .parse()
                .map_err(|e| parse_err("syscall", &e))?,
        });
    }
    Ok(responses)
}

pub fn load_responses_csv(path: impl AsRef<Path>) -> Result<Vec<ResponseRecord>, HarnessError> {
    parse_responses_csv(&std::fs::read_to_string(path)?)
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub policy: String,
    pub report: PolicyReport,
}

/// Renders evaluation rows as
/// `dataset,policy,permit_pct,deny_pct,normal_pct,attack_pct` CSV.
pub fn format_eval_report(rows: &[EvalRow]) -> String {
    let mut out = String::from("dataset,policy,permit_pct,deny_pct,normal_pct,attack_pct\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.dataset,
            row.policy,
            row.report.permit_pct,
            row.report.deny_pct,
            row.report.normal_pct,
            row.report.attack_pct
        ));
    }
    out
}

/// Events per second in fixed bins starting at time zero.
pub fn rate_series(times_us: &[u64], bin_us: u64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0u64; bins];
    for &t in times_us {
        let bin = (t / bin_us) as usize;
        if bin < bins {
            counts[bin] += 1;
        }
    }
    let bin_seconds = bin_us as f64 / 1e6;
    counts.iter().map(|&c| c as f64 / bin_seconds).collect()
}

/// Lag (in bins) at which the centered cross-correlation of `input`
/// against `output` peaks, scanned over `-max_lag..=max_lag`. A positive
/// lag means the output trails the input. Ties keep the most negative
/// lag. `None` if either series is flat or too short.
pub fn xcorr_peak_lag(input: &[f64], output: &[f64], max_lag: usize) -> Option<i64> {
    let n = input.len().min(output.len());
    if n < 2 + max_lag {
        return None;
    }
    let mean = |xs: &[f64]| xs[..n].iter().sum::<f64>() / n as f64;
    let mi = mean(input);
    let mo = mean(output);
    if input[..n].iter().all(|&x| x == input[0]) || output[..n].iter().all(|&x| x == output[0]) {
        return None;
    }
    let mut best_lag = None;
    let mut best = f64::NEG_INFINITY;
    for lag in -(max_lag as i64)..=(max_lag as i64) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..n {
            let u = t as i64 + lag;
            if u < 0 || u >= n as i64 {
                continue;
            }
            sum += (input[t] - mi) * (output[u as usize] - mo);
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let r = sum / count as f64;
        if r > best {
            best = r;
            best_lag = Some(lag);
        }
    }
    best_lag
}
