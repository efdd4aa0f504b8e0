//! The compartment scheduler.
//!
//! An [`Engine`] owns one compartment, the seeded random stream that
//! drives it, and the behavior callbacks registered per cell type. Each
//! tick it drains the ingest queue, runs every live cell's receptor
//! phase in a fresh random order, runs the cycle callbacks in that same
//! order, then advances producers and applies cytokine outputs.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compartment::{CellStoreFull, Compartment, SignalIndexError};
use crate::dynamics;
use crate::model::{Antigen, CellSpec, Held, new_cell, Cell};
use crate::params::{ParamError, TissueParams};
use crate::replay::{EventKind, ReplayEvent};

/// One queued ingestion operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IngestOp {
    Antigen(Antigen),
    Signal { index: usize, level: f64 },
}

/// Shared handle onto an engine's ingest queue. Clients (network
/// sessions, replay feeds, tests) push; the engine drains at the start
/// of every tick, preserving arrival order.
#[derive(Debug, Clone, Default)]
pub struct IngestHandle {
    queue: Arc<Mutex<VecDeque<IngestOp>>>,
}

impl IngestHandle {
    pub fn push_antigen(&self, antigen: Antigen) {
        self.queue.lock().unwrap().push_back(IngestOp::Antigen(antigen));
    }

    pub fn push_signal(&self, index: usize, level: f64) {
        self.queue
            .lock()
            .unwrap()
            .push_back(IngestOp::Signal { index, level });
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn drain(&self) -> Vec<IngestOp> {
        self.queue.lock().unwrap().drain(..).collect()
    }
}

/// One emitted response: a cell flagged a syscall value at a tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseRecord {
    pub tick: u64,
    pub cell_id: usize,
    pub value: u32,
}

/// Fan-out of response records to any number of subscribers.
#[derive(Debug, Clone, Default)]
pub struct ResponseHub {
    senders: Arc<Mutex<Vec<mpsc::Sender<ResponseRecord>>>>,
}

impl ResponseHub {
    /// Opens a new subscription; every response emitted afterwards is
    /// delivered to the returned receiver.
    pub fn subscribe(&self) -> mpsc::Receiver<ResponseRecord> {
        let (tx, rx) = mpsc::channel();
        self.senders.lock().unwrap().push(tx);
        rx
    }

    fn broadcast(&self, record: ResponseRecord) {
        let mut senders = self.senders.lock().unwrap();
        senders.retain(|s| s.send(record).is_ok());
    }
}

/// Running totals of antigen copies over their whole life cycle. Every
/// copy is created exactly once (ingestion) and destroyed exactly once
/// (overwrite in tissue, overwrite in a cell store, or display expiry),
/// so `ingested - destroyed()` is the live inventory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TurnoverCounters {
    pub ingested: u64,
    pub tissue_overwritten: u64,
    pub transferred: u64,
    pub cell_overwritten: u64,
    pub displayed: u64,
    pub expired: u64,
}

impl TurnoverCounters {
    pub fn destroyed(&self) -> u64 {
        self.tissue_overwritten + self.cell_overwritten + self.expired
    }

    pub fn live(&self) -> u64 {
        self.ingested - self.destroyed()
    }
}

impl fmt::Display for TurnoverCounters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ingested={} tissue_overwritten={} transferred={} cell_overwritten={} displayed={} expired={} live={}",
            self.ingested,
            self.tissue_overwritten,
            self.transferred,
            self.cell_overwritten,
            self.displayed,
            self.expired,
            self.live()
        )
    }
}

/// What happened to one tagged antigen copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEventKind {
    /// Copy created in the tissue store with this value.
    Ingested { value: u32 },
    /// Destroyed by an ingest overwrite in the tissue store.
    TissueOverwrite,
    /// Moved from the tissue store into a cell's store.
    Transferred { cell: usize },
    /// Destroyed by a transfer overwrite inside a cell store.
    CellOverwrite { cell: usize },
    /// Moved from a cell store onto a producer display.
    Displayed { cell: usize },
    /// Destroyed when a producer display timed out.
    Expired { cell: usize },
}

/// One step in a tagged copy's life, stamped with the tick it happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub tag: u64,
    pub tick: u64,
    pub kind: TraceEventKind,
}

/// Turnover accounting shared by the dynamics functions: counters always,
/// plus an optional per-copy event trace.
#[derive(Debug, Default)]
pub struct Turnover {
    pub counters: TurnoverCounters,
    trace: Option<Vec<TraceEvent>>,
    next_tag: u64,
}

impl Turnover {
    fn record(&mut self, tag: u64, tick: u64, kind: TraceEventKind) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEvent { tag, tick, kind });
        }
    }

    pub(crate) fn ingested(&mut self, value: u32, tick: u64) -> u64 {
        let tag = self.next_tag;
        self.next_tag += 1;
        self.counters.ingested += 1;
        self.record(tag, tick, TraceEventKind::Ingested { value });
        tag
    }

    pub(crate) fn tissue_overwrite(&mut self, tag: u64, tick: u64) {
        self.counters.tissue_overwritten += 1;
        self.record(tag, tick, TraceEventKind::TissueOverwrite);
    }

    pub(crate) fn transferred(&mut self, tag: u64, cell: usize, tick: u64) {
        self.counters.transferred += 1;
        self.record(tag, tick, TraceEventKind::Transferred { cell });
    }

    pub(crate) fn cell_overwrite(&mut self, tag: u64, cell: usize, tick: u64) {
        self.counters.cell_overwritten += 1;
        self.record(tag, tick, TraceEventKind::CellOverwrite { cell });
    }

    pub(crate) fn displayed(&mut self, tag: u64, cell: usize, tick: u64) {
        self.counters.displayed += 1;
        self.record(tag, tick, TraceEventKind::Displayed { cell });
    }

    pub(crate) fn expired(&mut self, tag: u64, cell: usize, tick: u64) {
        self.counters.expired += 1;
        self.record(tag, tick, TraceEventKind::Expired { cell });
    }
}

/// A cycle callback failure; the engine aborts the tick and names the
/// cell it came from.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct CycleError(pub String);

impl CycleError {
    pub fn new(message: impl Into<String>) -> Self {
        CycleError(message.into())
    }
}

/// What a cycle callback may do besides mutating its own cell.
pub struct CycleCtx<'a> {
    /// The tick being executed.
    pub tick: u64,
    /// Antigen alphabet bound, for lock randomisation.
    pub alphabet: u32,
    /// The compartment's random stream.
    pub rng: &'a mut ChaCha8Rng,
    responses: &'a mut Vec<ResponseRecord>,
    log_responses: bool,
    hub: &'a ResponseHub,
}

impl CycleCtx<'_> {
    /// Emits a response record through one of the cell's response
    /// producers. Fails if the cell has none.
    pub fn emit_response(&mut self, cell: &Cell, value: u32) -> Result<(), CycleError> {
        if cell.response_producers == 0 {
            return Err(CycleError::new("cell has no response producer"));
        }
        let record = ResponseRecord {
            tick: self.tick,
            cell_id: cell.id,
            value,
        };
        if self.log_responses {
            self.responses.push(record);
        }
        self.hub.broadcast(record);
        Ok(())
    }
}

/// Per-type cell logic, invoked once per live cell per tick after the
/// receptor phase.
pub trait CellBehavior: Send {
    /// The cell's cycle callback. Receptor state (cached signal levels,
    /// bindings, recorded VR matches) is fresh for this tick.
    fn cycle(&mut self, cell: &mut Cell, ctx: &mut CycleCtx<'_>) -> Result<(), CycleError>;

    /// Lock-and-key predicate for this type's VR receptors, if it uses
    /// them.
    fn match_fn(&self) -> Option<dynamics::MatchFn> {
        None
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown cell type tag {0}: no behavior registered")]
    UnknownCellType(u32),
    #[error(transparent)]
    StoreFull(#[from] CellStoreFull),
    #[error(transparent)]
    Signal(#[from] SignalIndexError),
    #[error("invalid cell spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error)]
pub enum TickError {
    #[error("tick {tick}: cycle callback failed for cell {cell_id} (type {cell_type}): {message}")]
    Cycle {
        tick: u64,
        cell_id: usize,
        cell_type: u32,
        message: String,
    },
}

/// A scalar or short list sampled by a probe field.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeValue {
    Scalar(f64),
    List(Vec<f64>),
}

impl fmt::Display for ProbeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeValue::Scalar(v) => write!(f, "{v}"),
            ProbeValue::List(vs) => {
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
        }
    }
}

/// One probe sample: the tick it was taken after, a wall-clock offset in
/// microseconds (virtual time when not running in real time), and the
/// sampled fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub tick: u64,
    pub wall_us: u64,
    pub fields: Vec<(String, ProbeValue)>,
}

/// Read-only view handed to probe callbacks.
pub struct ProbeView<'a> {
    pub tick: u64,
    pub compartment: &'a Compartment,
    pub responses: &'a [ResponseRecord],
    pub counters: &'a TurnoverCounters,
}

type ProbeCallback = Box<dyn FnMut(&ProbeView<'_>) -> Result<Vec<(String, ProbeValue)>, String> + Send>;

/// Collects probe samples at the compartment's probe rate. A failing
/// callback is recorded and sampling continues.
pub struct ProbeRecorder {
    callback: ProbeCallback,
    samples: Vec<ProbeSample>,
    errors: Vec<(u64, String)>,
}

impl ProbeRecorder {
    pub fn new(
        callback: impl FnMut(&ProbeView<'_>) -> Result<Vec<(String, ProbeValue)>, String>
            + Send
            + 'static,
    ) -> Self {
        ProbeRecorder {
            callback: Box::new(callback),
            samples: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[ProbeSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ProbeSample> {
        self.samples
    }

    /// Sampling failures as (tick, message) pairs.
    pub fn errors(&self) -> &[(u64, String)] {
        &self.errors
    }

    /// Renders all samples as CSV with a `tick,wall_us,...` header taken
    /// from the first sample's field names. List-valued fields are
    /// space-joined inside their cell.
    pub fn csv(&self) -> String {
        samples_to_csv(&self.samples)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.csv())
    }
}

/// CSV rendering for probe samples; header field names come from the
/// first sample.
pub fn samples_to_csv(samples: &[ProbeSample]) -> String {
    let mut out = String::from("tick,wall_us");
    if let Some(first) = samples.first() {
        for (name, _) in &first.fields {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for s in samples {
        out.push_str(&format!("{},{}", s.tick, s.wall_us));
        for (_, value) in &s.fields {
            out.push(',');
            out.push_str(&value.to_string());
        }
        out.push('\n');
    }
    out
}

struct Feed {
    events: Vec<ReplayEvent>,
    rate: f64,
    cursor: usize,
}

/// One tissue compartment plus everything that drives it.
pub struct Engine {
    compartment: Compartment,
    rng: ChaCha8Rng,
    behaviors: HashMap<u32, Box<dyn CellBehavior>>,
    ingest: IngestHandle,
    hub: ResponseHub,
    responses: Vec<ResponseRecord>,
    log_responses: bool,
    turnover: Turnover,
    feed: Option<Feed>,
    vtime_us: u64,
    next_probe_us: u64,
    dropped_signals: u64,
    order: Vec<usize>,
}

impl Engine {
    pub fn new(params: TissueParams) -> Result<Self, ParamError> {
        let compartment = Compartment::new(params)?;
        let seed = compartment.params().rng_seed;
        let next_probe_us = compartment.params().probe_rate_us;
        Ok(Engine {
            compartment,
            rng: ChaCha8Rng::seed_from_u64(seed),
            behaviors: HashMap::new(),
            ingest: IngestHandle::default(),
            hub: ResponseHub::default(),
            responses: Vec::new(),
            log_responses: true,
            turnover: Turnover::default(),
            feed: None,
            vtime_us: 0,
            next_probe_us,
            dropped_signals: 0,
            order: Vec::new(),
        })
    }

    /// Registers the cycle callback (and optional VR match rule) for a
    /// cell type tag. Cells of this type may then be added.
    pub fn register_behavior(&mut self, cell_type: u32, behavior: Box<dyn CellBehavior>) {
        self.behaviors.insert(cell_type, behavior);
    }

    /// Builds a cell from `spec` and places it in the first free slot.
    /// The spec's type must have a registered behavior and all its signal
    /// indices must fit the signal store.
    pub fn add_cell(&mut self, spec: &CellSpec) -> Result<usize, EngineError> {
        if !self.behaviors.contains_key(&spec.cell_type) {
            return Err(EngineError::UnknownCellType(spec.cell_type));
        }
        let slots = self.compartment.signals.len();
        for &index in &spec.cytokine_receptors {
            if index >= slots {
                return Err(SignalIndexError { index, slots }.into());
            }
        }
        for &(index, _) in &spec.cytokine_producers {
            if index >= slots {
                return Err(SignalIndexError { index, slots }.into());
            }
        }
        if spec.antigen_producers > 0 && spec.producer_action_time == 0 {
            return Err(EngineError::InvalidSpec(
                "antigen producers need an action time of at least 1 tick".into(),
            ));
        }
        let alphabet = self.compartment.params().antigen_alphabet;
        let cell = new_cell(0, spec, alphabet, &mut self.rng);
        Ok(self.compartment.cells.insert(cell)?)
    }

    pub fn compartment(&self) -> &Compartment {
        &self.compartment
    }

    pub fn compartment_mut(&mut self) -> &mut Compartment {
        &mut self.compartment
    }

    pub fn params(&self) -> &TissueParams {
        self.compartment.params()
    }

    pub fn tick_count(&self) -> u64 {
        self.compartment.tick_count
    }

    /// Virtual time: ticks completed times the tick period.
    pub fn vtime_us(&self) -> u64 {
        self.vtime_us
    }

    /// Queue handle for feeding this engine from other threads.
    pub fn ingest_handle(&self) -> IngestHandle {
        self.ingest.clone()
    }

    /// Response fan-out for network delivery or tests.
    pub fn response_hub(&self) -> ResponseHub {
        self.hub.clone()
    }

    /// All responses emitted so far, in emission order.
    pub fn responses(&self) -> &[ResponseRecord] {
        &self.responses
    }

    pub fn take_responses(&mut self) -> Vec<ResponseRecord> {
        std::mem::take(&mut self.responses)
    }

    /// Disables the in-memory response log (the hub still broadcasts);
    /// long-running servers use this to keep memory flat.
    pub fn set_response_logging(&mut self, on: bool) {
        self.log_responses = on;
    }

    pub fn counters(&self) -> &TurnoverCounters {
        &self.turnover.counters
    }

    /// Signal writes dropped because their index was out of range.
    pub fn dropped_signals(&self) -> u64 {
        self.dropped_signals
    }

    /// Starts recording a per-copy turnover trace.
    pub fn enable_trace(&mut self) {
        if self.turnover.trace.is_none() {
            self.turnover.trace = Some(Vec::new());
        }
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        match &mut self.turnover.trace {
            Some(trace) => std::mem::take(trace),
            None => Vec::new(),
        }
    }

    /// Attaches a timed event feed consumed in virtual time: an event
    /// with offset `t` microseconds is queued at the first tick whose
    /// start time is at or past `t / rate`. This gives replay runs that
    /// are exactly reproducible, unlike the socket path which depends on
    /// wall-clock arrival.
    pub fn set_feed(&mut self, events: Vec<ReplayEvent>, rate: f64) {
        self.feed = Some(Feed {
            events,
            rate,
            cursor: 0,
        });
    }

    /// Ticks needed to consume the whole attached feed.
    pub fn feed_ticks(&self) -> u64 {
        match &self.feed {
            Some(feed) => match feed.events.last() {
                Some(last) => {
                    let scaled = scale_offset(last.offset_us, feed.rate);
                    scaled / self.compartment.params().cell_update_rate_us + 1
                }
                None => 0,
            },
            None => 0,
        }
    }

    /// Ingests one antigen immediately: `antigen_multiplier` tagged
    /// copies are written to uniformly chosen tissue slots, destroying
    /// whatever they overwrite.
    pub fn ingest_antigen(&mut self, antigen: Antigen) {
        let tick = self.compartment.tick_count;
        let copies = self.compartment.params().antigen_multiplier;
        let len = self.compartment.antigen.len();
        for _ in 0..copies {
            let tag = self.turnover.ingested(antigen.value(), tick);
            let slot = self.rng.random_range(0..len);
            let held = Held {
                value: antigen,
                tag,
            };
            if let Some(old) = self.compartment.antigen.put(slot, held) {
                self.turnover.tissue_overwrite(old.tag, tick);
            }
        }
    }

    pub fn set_signal(&mut self, index: usize, level: f64) -> Result<(), SignalIndexError> {
        self.compartment.set_signal(index, level)
    }

    /// Runs one tick.
    pub fn tick(&mut self) -> Result<(), TickError> {
        let tick = self.compartment.tick_count;

        // timed feed events due this tick join the ingest queue
        if let Some(mut feed) = self.feed.take() {
            while feed.cursor < feed.events.len() {
                let event = &feed.events[feed.cursor];
                if scale_offset(event.offset_us, feed.rate) > self.vtime_us {
                    break;
                }
                match event.kind {
                    EventKind::Antigen(value) => {
                        let alphabet = self.compartment.params().antigen_alphabet;
                        if let Ok(antigen) = Antigen::new(value, alphabet) {
                            self.ingest.push_antigen(antigen);
                        }
                    }
                    EventKind::Signal { index, level } => {
                        self.ingest.push_signal(index, level);
                    }
                }
                feed.cursor += 1;
            }
            self.feed = Some(feed);
        }

        // drain the ingest queue in arrival order
        for op in self.ingest.drain() {
            match op {
                IngestOp::Antigen(antigen) => self.ingest_antigen(antigen),
                IngestOp::Signal { index, level } => {
                    if self.compartment.signals.set(index, level).is_err() {
                        self.dropped_signals += 1;
                        log::warn!("dropping signal write to out-of-range index {index}");
                    }
                }
            }
        }

        // fresh random order over live cells for this tick
        let mut order = std::mem::take(&mut self.order);
        order.clear();
        order.extend(self.compartment.cells.live_slots());
        order.shuffle(&mut self.rng);

        // receptor phase for every cell, in order
        for &slot in &order {
            let Some(mut cell) = self.compartment.cells.take_out(slot) else {
                continue;
            };
            dynamics::update_antigen_receptors(
                &mut cell,
                &mut self.compartment.antigen,
                &mut self.rng,
                &mut self.turnover,
                tick,
            );
            dynamics::update_cytokine_receptors(&mut cell, &self.compartment.signals);
            dynamics::update_cell_receptors(&mut cell, &self.compartment.cells, &mut self.rng);
            match self
                .behaviors
                .get(&cell.cell_type)
                .and_then(|b| b.match_fn())
            {
                Some(match_fn) => {
                    dynamics::match_vr_receptors(&mut cell, &self.compartment.cells, match_fn)
                }
                None => cell.tick_matches.clear(),
            }
            self.compartment.cells.put_back(slot, cell);
        }

        // cycle callbacks, same order; a failure aborts the tick
        for &slot in &order {
            let Some(mut cell) = self.compartment.cells.take_out(slot) else {
                continue;
            };
            let result = match self.behaviors.get_mut(&cell.cell_type) {
                Some(behavior) => {
                    let mut ctx = CycleCtx {
                        tick,
                        alphabet: self.compartment.params().antigen_alphabet,
                        rng: &mut self.rng,
                        responses: &mut self.responses,
                        log_responses: self.log_responses,
                        hub: &self.hub,
                    };
                    behavior.cycle(&mut cell, &mut ctx)
                }
                None => Ok(()),
            };
            let cell_type = cell.cell_type;
            self.compartment.cells.put_back(slot, cell);
            if let Err(e) = result {
                self.order = order;
                return Err(TickError::Cycle {
                    tick,
                    cell_id: slot,
                    cell_type,
                    message: e.to_string(),
                });
            }
        }

        // producer countdown, expiry, and reload
        for &slot in &order {
            let Some(mut cell) = self.compartment.cells.take_out(slot) else {
                continue;
            };
            dynamics::update_producers(&mut cell, &mut self.rng, &mut self.turnover, tick);
            self.compartment.cells.put_back(slot, cell);
        }

        // cytokine outputs land after every cell has cycled
        for &slot in &order {
            if let Some(cell) = self.compartment.cells.get(slot) {
                dynamics::apply_cytokine_producers(cell, &mut self.compartment.signals)
                    .expect("cytokine producer index validated at add_cell");
            }
        }

        self.order = order;
        self.compartment.tick_count += 1;
        self.vtime_us += self.compartment.params().cell_update_rate_us;
        Ok(())
    }

    fn maybe_probe(&mut self, recorder: &mut ProbeRecorder, wall_us: u64) {
        if self.vtime_us < self.next_probe_us {
            return;
        }
        let view = ProbeView {
            tick: self.compartment.tick_count,
            compartment: &self.compartment,
            responses: &self.responses,
            counters: &self.turnover.counters,
        };
        match (recorder.callback)(&view) {
            Ok(fields) => recorder.samples.push(ProbeSample {
                tick: self.compartment.tick_count,
                wall_us,
                fields,
            }),
            Err(message) => {
                log::warn!("probe failed at tick {}: {message}", view.tick);
                recorder.errors.push((self.compartment.tick_count, message));
            }
        }
        let rate = self.compartment.params().probe_rate_us;
        while self.next_probe_us <= self.vtime_us {
            self.next_probe_us += rate;
        }
    }

    /// Runs `ticks` ticks back to back in virtual time. The probe, when
    /// given, fires on the same schedule a realtime run would use, with
    /// `wall_us` reported as virtual time.
    pub fn run_virtual(
        &mut self,
        ticks: u64,
        mut probe: Option<&mut ProbeRecorder>,
    ) -> Result<(), TickError> {
        for _ in 0..ticks {
            self.tick()?;
            if let Some(recorder) = probe.as_deref_mut() {
                self.maybe_probe(recorder, self.vtime_us);
            }
        }
        Ok(())
    }

    /// Runs in real time, pacing ticks `cell_update_rate` microseconds
    /// apart, until the duration (when given) elapses or `stop` is set.
    /// Late ticks run immediately; the schedule does not drift.
    pub fn run_realtime(
        &mut self,
        duration: Option<Duration>,
        mut probe: Option<&mut ProbeRecorder>,
        stop: Option<&AtomicBool>,
    ) -> Result<(), TickError> {
        let tick_period = Duration::from_micros(self.compartment.params().cell_update_rate_us);
        let start = Instant::now();
        let mut next_tick_at = Duration::ZERO;
        loop {
            if let Some(limit) = duration {
                if start.elapsed() >= limit {
                    break;
                }
            }
            if stop.map(|s| s.load(Ordering::Relaxed)).unwrap_or(false) {
                break;
            }
            if let Some(pause) = next_tick_at.checked_sub(start.elapsed()) {
                std::thread::sleep(pause);
            }
            self.tick()?;
            next_tick_at += tick_period;
            if let Some(recorder) = probe.as_deref_mut() {
                self.maybe_probe(recorder, start.elapsed().as_micros() as u64);
            }
        }
        Ok(())
    }
}

pub(crate) fn scale_offset(offset_us: u64, rate: f64) -> u64 {
    if rate.is_infinite() {
        return 0;
    }
    (offset_us as f64 / rate) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CellSpec;

    struct Inert;

    impl CellBehavior for Inert {
        fn cycle(&mut self, _cell: &mut Cell, _ctx: &mut CycleCtx<'_>) -> Result<(), CycleError> {
            Ok(())
        }
    }

    struct FailAfter {
        remaining: u32,
    }

    impl CellBehavior for FailAfter {
        fn cycle(&mut self, _cell: &mut Cell, _ctx: &mut CycleCtx<'_>) -> Result<(), CycleError> {
            if self.remaining == 0 {
                return Err(CycleError::new("deliberate failure"));
            }
            self.remaining -= 1;
            Ok(())
        }
    }

    struct EmitOnMatch;

    impl CellBehavior for EmitOnMatch {
        fn cycle(&mut self, cell: &mut Cell, ctx: &mut CycleCtx<'_>) -> Result<(), CycleError> {
            for i in 0..cell.tick_matches().len() {
                let value = cell.tick_matches()[i].value;
                ctx.emit_response(cell, value)?;
            }
            Ok(())
        }

        fn match_fn(&self) -> Option<dynamics::MatchFn> {
            Some(dynamics::exact_match)
        }
    }

    fn params() -> TissueParams {
        TissueParams {
            max_antigen: 50,
            max_cells: 10,
            antigen_multiplier: 10,
            rng_seed: 7,
            ..TissueParams::default()
        }
    }

    #[test]
    fn add_cell_requires_registered_behavior() {
        let mut e = Engine::new(params()).unwrap();
        let err = e.add_cell(&CellSpec::bare(9)).unwrap_err();
        assert!(matches!(err, EngineError::UnknownCellType(9)));
        let msg = err.to_string();
        assert!(msg.contains('9'));
    }

    #[test]
    fn add_cell_checks_signal_indices() {
        let mut e = Engine::new(params()).unwrap();
        e.register_behavior(1, Box::new(Inert));
        let bad_receptor = CellSpec {
            cytokine_receptors: vec![1],
            ..CellSpec::bare(1)
        };
        assert!(matches!(
            e.add_cell(&bad_receptor),
            Err(EngineError::Signal(_))
        ));
        let bad_producer = CellSpec {
            cytokine_producers: vec![(3, 1.0)],
            ..CellSpec::bare(1)
        };
        assert!(matches!(
            e.add_cell(&bad_producer),
            Err(EngineError::Signal(_))
        ));
    }

    #[test]
    fn add_cell_fills_store_then_errors() {
        let mut e = Engine::new(TissueParams {
            max_cells: 2,
            ..params()
        })
        .unwrap();
        e.register_behavior(1, Box::new(Inert));
        e.add_cell(&CellSpec::bare(1)).unwrap();
        e.add_cell(&CellSpec::bare(1)).unwrap();
        assert!(matches!(
            e.add_cell(&CellSpec::bare(1)),
            Err(EngineError::StoreFull(_))
        ));
    }

    #[test]
    fn ingest_writes_multiplier_copies() {
        let mut e = Engine::new(params()).unwrap();
        e.ingest_antigen(Antigen::new(6, 1024).unwrap());
        assert_eq!(e.counters().ingested, 10);
        let live = e.compartment().antigen.occupied() as u64;
        assert_eq!(live + e.counters().tissue_overwritten, 10);
        assert_eq!(e.counters().live(), live);
    }

    #[test]
    fn queued_ingest_applies_on_next_tick() {
        let mut e = Engine::new(params()).unwrap();
        let handle = e.ingest_handle();
        handle.push_antigen(Antigen::new(5, 1024).unwrap());
        handle.push_signal(0, 0.5);
        assert_eq!(e.counters().ingested, 0);
        e.tick().unwrap();
        assert_eq!(e.counters().ingested, 10);
        assert_eq!(e.compartment().signal(0).unwrap(), 0.5);
        assert!(handle.is_empty());
    }

    #[test]
    fn out_of_range_signal_write_is_dropped_not_fatal() {
        let mut e = Engine::new(params()).unwrap();
        e.ingest_handle().push_signal(5, 1.0);
        e.tick().unwrap();
        assert_eq!(e.dropped_signals(), 1);
    }

    #[test]
    fn same_seed_same_run() {
        let run = || {
            let mut e = Engine::new(params()).unwrap();
            e.register_behavior(1, Box::new(Inert));
            for _ in 0..5 {
                e.add_cell(&CellSpec {
                    antigen_slots: 4,
                    antigen_receptors: 2,
                    antigen_producers: 1,
                    producer_action_time: 3,
                    ..CellSpec::bare(1)
                })
                .unwrap();
            }
            for i in 0..20 {
                e.ingest_antigen(Antigen::new(i % 8, 1024).unwrap());
                e.tick().unwrap();
            }
            (
                *e.counters(),
                e.compartment().antigen_inventory(),
                e.tick_count(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn different_seeds_differ() {
        let layout = |seed: u64| {
            let mut e = Engine::new(TissueParams {
                rng_seed: seed,
                ..params()
            })
            .unwrap();
            e.register_behavior(1, Box::new(Inert));
            e.add_cell(&CellSpec {
                vr_receptors: 8,
                ..CellSpec::bare(1)
            })
            .unwrap();
            let locks: Vec<u32> = e
                .compartment()
                .cells
                .get(0)
                .unwrap()
                .vr_receptors
                .iter()
                .map(|r| r.lock)
                .collect();
            locks
        };
        assert_ne!(layout(1), layout(2));
    }

    #[test]
    fn cycle_failure_aborts_tick_and_names_cell() {
        let mut e = Engine::new(params()).unwrap();
        e.register_behavior(1, Box::new(FailAfter { remaining: 2 }));
        let slot = e.add_cell(&CellSpec::bare(1)).unwrap();
        e.tick().unwrap();
        e.tick().unwrap();
        let err = e.tick().unwrap_err();
        let TickError::Cycle {
            tick,
            cell_id,
            cell_type,
            message,
        } = &err;
        assert_eq!(*tick, 2);
        assert_eq!(*cell_id, slot);
        assert_eq!(*cell_type, 1);
        assert!(message.contains("deliberate failure"));
        // the tick did not complete
        assert_eq!(e.tick_count(), 2);
        // the failing cell is still in the store
        assert!(e.compartment().cells.get(slot).is_some());
    }

    #[test]
    fn responses_flow_to_log_and_hub() {
        let mut e = Engine::new(TissueParams {
            max_antigen: 1,
            max_cells: 2,
            antigen_multiplier: 1,
            rng_seed: 3,
            ..TissueParams::default()
        })
        .unwrap();
        e.register_behavior(1, Box::new(Inert));
        e.register_behavior(2, Box::new(EmitOnMatch));
        e.add_cell(&CellSpec {
            antigen_slots: 1,
            antigen_receptors: 1,
            antigen_producers: 1,
            producer_action_time: 1000,
            ..CellSpec::bare(1)
        })
        .unwrap();
        e.add_cell(&CellSpec {
            cell_receptors: vec![1, 1, 1, 1],
            vr_receptors: 1,
            response_producers: 1,
            ..CellSpec::bare(2)
        })
        .unwrap();
        // force the matcher's lock to the value we feed
        e.compartment_mut()
            .cells
            .get_mut(1)
            .unwrap()
            .vr_receptors[0]
            .lock = 42;
        let rx = e.response_hub().subscribe();
        e.ingest_antigen(Antigen::new(42, 1024).unwrap());
        for _ in 0..30 {
            e.tick().unwrap();
        }
        assert!(!e.responses().is_empty(), "expected at least one response");
        let first = e.responses()[0];
        assert_eq!(first.value, 42);
        assert_eq!(first.cell_id, 1);
        let via_hub = rx.try_recv().unwrap();
        assert_eq!(via_hub.value, 42);
    }

    #[test]
    fn probe_fires_at_probe_rate() {
        // ten ticks per probe interval: exactly 10 samples in 100 ticks
        let mut e = Engine::new(TissueParams {
            rng_seed: 1,
            ..TissueParams::default()
        })
        .unwrap();
        let mut probe = ProbeRecorder::new(|view| {
            Ok(vec![(
                "tissue_antigen".into(),
                ProbeValue::Scalar(view.compartment.antigen.occupied() as f64),
            )])
        });
        e.run_virtual(100, Some(&mut probe)).unwrap();
        assert_eq!(probe.samples().len(), 10);
        assert_eq!(probe.samples()[0].tick, 10);
        assert_eq!(probe.samples()[0].wall_us, 1_000_000);
        assert_eq!(probe.samples()[9].tick, 100);
    }

    #[test]
    fn probe_failure_is_recorded_and_sampling_continues() {
        let mut e = Engine::new(TissueParams {
            rng_seed: 1,
            ..TissueParams::default()
        })
        .unwrap();
        let mut calls = 0;
        let mut probe = ProbeRecorder::new(move |_view| {
            calls += 1;
            if calls == 1 {
                Err("flaky".into())
            } else {
                Ok(vec![("x".into(), ProbeValue::Scalar(1.0))])
            }
        });
        e.run_virtual(30, Some(&mut probe)).unwrap();
        assert_eq!(probe.errors().len(), 1);
        assert_eq!(probe.errors()[0].0, 10);
        assert_eq!(probe.samples().len(), 2);
    }

    #[test]
    fn feed_delivers_events_by_virtual_time() {
        let mut e = Engine::new(params()).unwrap();
        e.set_feed(
            vec![
                ReplayEvent {
                    offset_us: 0,
                    kind: EventKind::Antigen(1),
                },
                ReplayEvent {
                    offset_us: 100_000,
                    kind: EventKind::Antigen(2),
                },
                ReplayEvent {
                    offset_us: 1_000_000,
                    kind: EventKind::Signal {
                        index: 0,
                        level: 0.5,
                    },
                },
            ],
            1.0,
        );
        assert_eq!(e.feed_ticks(), 11);
        e.tick().unwrap();
        assert_eq!(e.counters().ingested, 10);
        e.tick().unwrap();
        assert_eq!(e.counters().ingested, 20);
        for _ in 2..11 {
            e.tick().unwrap();
        }
        assert_eq!(e.compartment().signal(0).unwrap(), 0.5);
    }

    #[test]
    fn feed_rate_compresses_offsets() {
        let mut e = Engine::new(params()).unwrap();
        e.set_feed(
            vec![ReplayEvent {
                offset_us: 1_000_000,
                kind: EventKind::Antigen(3),
            }],
            10.0,
        );
        // 1s of log at 10x lands at vtime 100ms, i.e. tick 1
        e.tick().unwrap();
        assert_eq!(e.counters().ingested, 0);
        e.tick().unwrap();
        assert_eq!(e.counters().ingested, 10);
    }

    #[test]
    fn realtime_run_paces_ticks() {
        let mut e = Engine::new(TissueParams {
            cell_update_rate_us: 5_000,
            rng_seed: 2,
            ..params()
        })
        .unwrap();
        let start = Instant::now();
        e.run_realtime(Some(Duration::from_millis(50)), None, None)
            .unwrap();
        let elapsed = start.elapsed();
        // ~10 ticks in 50ms at 5ms per tick
        assert!(e.tick_count() >= 8 && e.tick_count() <= 12, "got {}", e.tick_count());
        assert!(elapsed >= Duration::from_millis(45));
    }
}
