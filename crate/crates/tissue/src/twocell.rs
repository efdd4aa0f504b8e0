//! The two-type reference algorithm.
//!
//! Type 1 cells pull antigen out of the tissue and present it on their
//! producers; when signalling is enabled they also steer their display
//! time by watching signal 0. Type 2 cells bind Type 1 cells, test the
//! presented antigen against their VR locks, and emit a response for
//! every match. A Type 2 cell that has never matched redraws its locks
//! every `cell_lifespan_2` ticks; its first match latches an internal
//! cytokine that stops the redraws for good.

use std::collections::HashMap;
use std::path::Path;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::dynamics::{self, MatchFn};
use crate::engine::{
    scale_offset, CellBehavior, CycleCtx, CycleError, Engine, EngineError, ProbeRecorder,
    ProbeSample, ResponseRecord, TickError, TurnoverCounters,
};
use crate::model::{Antigen, Cell, CellSpec};
use crate::params::{KvError, ParamError, TissueParams};
use crate::policy::{policy_from_responses, Policy};
use crate::replay::{replay_with, EventKind, ReplayEvent};

/// Cell type tag for the antigen-presenting type.
pub const TYPE1: u32 = 1;

/// Cell type tag for the matching/responding type.
pub const TYPE2: u32 = 2;

/// Display time Type 1 producers start from (and reset to) when the
/// signal-controlled rule is active.
pub const SIGNAL_ACTION_TIME_START: u64 = 100;

/// Parameters for one twocell run.
#[derive(Debug, Clone, PartialEq)]
pub struct TwocellConfig {
    pub tissue: TissueParams,
    pub num_cells_1: usize,
    /// Antigen-store slots per Type 1 cell.
    pub num_antigen_1: usize,
    pub num_antigen_receptors_1: usize,
    pub num_antigen_producers_1: usize,
    /// Fixed display time used while the signal rule is off.
    pub antigen_producer_action_time: u64,
    pub num_cells_2: usize,
    pub cell_lifespan_2: u64,
    pub num_cell_receptors_2: usize,
    pub num_vr_receptors_2: usize,
    pub num_response_producers_2: usize,
    /// Enables the signal-controlled action time rule on Type 1 cells.
    pub signal_enabled: bool,
}

impl Default for TwocellConfig {
    fn default() -> Self {
        TwocellConfig {
            tissue: TissueParams::default(),
            num_cells_1: 50,
            num_antigen_1: 100,
            num_antigen_receptors_1: 10,
            num_antigen_producers_1: 10,
            antigen_producer_action_time: 10,
            num_cells_2: 50,
            cell_lifespan_2: 100,
            num_cell_receptors_2: 2,
            num_vr_receptors_2: 20,
            num_response_producers_2: 1,
            signal_enabled: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TwocellConfigError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("{total} cells configured but max_cells is {max}")]
    TooManyCells { total: usize, max: usize },
}

impl TwocellConfig {
    pub fn validated(self) -> Result<Self, TwocellConfigError> {
        self.tissue.validated()?;
        let counts: [(&'static str, usize); 9] = [
            ("num_cells_1", self.num_cells_1),
            ("num_antigen_1", self.num_antigen_1),
            ("num_antigen_receptors_1", self.num_antigen_receptors_1),
            ("num_antigen_producers_1", self.num_antigen_producers_1),
            ("num_cells_2", self.num_cells_2),
            ("num_cell_receptors_2", self.num_cell_receptors_2),
            ("num_vr_receptors_2", self.num_vr_receptors_2),
            ("num_response_producers_2", self.num_response_producers_2),
            ("cell_lifespan_2", self.cell_lifespan_2 as usize),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(TwocellConfigError::ZeroCount(name));
            }
        }
        if self.antigen_producer_action_time == 0 {
            return Err(TwocellConfigError::ZeroCount("antigen_producer_action_time"));
        }
        let total = self.num_cells_1 + self.num_cells_2;
        if total > self.tissue.max_cells {
            return Err(TwocellConfigError::TooManyCells {
                total,
                max: self.tissue.max_cells,
            });
        }
        Ok(self)
    }

    /// Reads a twocell config (tissue params plus the keys above) from a
    /// key=value file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TwocellFileError> {
        let mut kv = crate::params::KvFile::load(path)?;
        let config = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(config)
    }

    pub fn from_kv(kv: &mut crate::params::KvFile) -> Result<Self, TwocellFileError> {
        let tissue = TissueParams::from_kv(kv)?;
        let mut config = TwocellConfig {
            tissue,
            ..TwocellConfig::default()
        };
        if let Some(v) = kv.take_usize("num_cells_1")? {
            config.num_cells_1 = v;
        }
        if let Some(v) = kv.take_usize("num_antigen_1")? {
            config.num_antigen_1 = v;
        }
        if let Some(v) = kv.take_usize("num_antigen_receptors_1")? {
            config.num_antigen_receptors_1 = v;
        }
        if let Some(v) = kv.take_usize("num_antigen_producers_1")? {
            config.num_antigen_producers_1 = v;
        }
        if let Some(v) = kv.take_u64("antigen_producer_action_time")? {
            config.antigen_producer_action_time = v;
        }
        if let Some(v) = kv.take_usize("num_cells_2")? {
            config.num_cells_2 = v;
        }
        if let Some(v) = kv.take_u64("cell_lifespan_2")? {
            config.cell_lifespan_2 = v;
        }
        if let Some(v) = kv.take_usize("num_cell_receptors_2")? {
            config.num_cell_receptors_2 = v;
        }
        if let Some(v) = kv.take_usize("num_vr_receptors_2")? {
            config.num_vr_receptors_2 = v;
        }
        if let Some(v) = kv.take_usize("num_response_producers_2")? {
            config.num_response_producers_2 = v;
        }
        if let Some(v) = kv.take_bool("signal_enabled")? {
            config.signal_enabled = v;
        }
        Ok(config.validated()?)
    }

    /// The display time freshly built Type 1 producers start with.
    pub fn initial_action_time(&self) -> u64 {
        if self.signal_enabled {
            SIGNAL_ACTION_TIME_START
        } else {
            self.antigen_producer_action_time
        }
    }

    pub fn type1_spec(&self) -> CellSpec {
        CellSpec {
            cell_type: TYPE1,
            antigen_slots: self.num_antigen_1,
            antigen_receptors: self.num_antigen_receptors_1,
            cytokine_receptors: vec![0],
            cell_receptors: Vec::new(),
            vr_receptors: 0,
            antigen_producers: self.num_antigen_producers_1,
            producer_action_time: self.initial_action_time(),
            cytokine_producers: Vec::new(),
            response_producers: 0,
            internal_cytokines: 0,
        }
    }

    pub fn type2_spec(&self) -> CellSpec {
        CellSpec {
            cell_type: TYPE2,
            antigen_slots: 0,
            antigen_receptors: 0,
            cytokine_receptors: Vec::new(),
            cell_receptors: vec![TYPE1; self.num_cell_receptors_2],
            vr_receptors: self.num_vr_receptors_2,
            antigen_producers: 0,
            producer_action_time: 1,
            cytokine_producers: Vec::new(),
            response_producers: self.num_response_producers_2,
            internal_cytokines: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum TwocellFileError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Config(#[from] TwocellConfigError),
}

/// Signal-controlled action time for one Type 1 cell.
///
/// The display time starts at 100 ticks. While the watched signal holds
/// steady nothing changes; each drop halves the display time (never below
/// one tick); any rise resets it to 100.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionTimeState {
    pub current: u64,
    pub previous_signal: f64,
}

impl Default for ActionTimeState {
    fn default() -> Self {
        ActionTimeState {
            current: SIGNAL_ACTION_TIME_START,
            previous_signal: 0.0,
        }
    }
}

/// Applies one signal sample to the action-time state.
pub fn update_action_time(state: &mut ActionTimeState, signal: f64) {
    if signal < state.previous_signal {
        state.current = (state.current / 2).max(1);
    } else if signal > state.previous_signal {
        state.current = SIGNAL_ACTION_TIME_START;
    }
    state.previous_signal = signal;
}

/// Behavior of the antigen-presenting type. Antigen intake and display
/// run in the engine's receptor and producer phases; the cycle callback
/// only maintains the signal-controlled action time.
pub struct Type1Behavior {
    signal_enabled: bool,
    states: HashMap<usize, ActionTimeState>,
}

impl Type1Behavior {
    pub fn new(signal_enabled: bool) -> Self {
        Type1Behavior {
            signal_enabled,
            states: HashMap::new(),
        }
    }
}

impl CellBehavior for Type1Behavior {
    fn cycle(&mut self, cell: &mut Cell, _ctx: &mut CycleCtx<'_>) -> Result<(), CycleError> {
        if !self.signal_enabled {
            return Ok(());
        }
        let signal = cell
            .cytokine_receptors
            .first()
            .map(|r| r.level)
            .unwrap_or(0.0);
        let state = self.states.entry(cell.id).or_default();
        update_action_time(state, signal);
        for producer in &mut cell.antigen_producers {
            producer.set_action_time(state.current);
        }
        Ok(())
    }
}

/// Behavior of the matching type: respond to every VR match recorded in
/// the receptor phase, latch the internal cytokine, and redraw locks on
/// schedule while unmatched.
pub struct Type2Behavior {
    lifespan: u64,
}

impl Type2Behavior {
    pub fn new(lifespan: u64) -> Self {
        Type2Behavior { lifespan }
    }
}

impl CellBehavior for Type2Behavior {
    fn cycle(&mut self, cell: &mut Cell, ctx: &mut CycleCtx<'_>) -> Result<(), CycleError> {
        for i in 0..cell.tick_matches().len() {
            let value = cell.tick_matches()[i].value;
            ctx.emit_response(cell, value)?;
            cell.internal_cytokines[0] += 1;
        }
        cell.age_since_randomise += 1;
        if cell.internal_cytokines[0] == 0 && cell.age_since_randomise >= self.lifespan {
            cell.randomise_vr_locks(ctx.alphabet, ctx.rng);
        }
        Ok(())
    }

    fn match_fn(&self) -> Option<MatchFn> {
        Some(dynamics::exact_match)
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] TwocellConfigError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Builds an engine populated with the configured Type 1 and Type 2
/// cells. Type 1 cells occupy the low slots, Type 2 the next ones.
pub fn build_engine(config: &TwocellConfig) -> Result<Engine, BuildError> {
    let total = config.num_cells_1 + config.num_cells_2;
    if total > config.tissue.max_cells {
        return Err(TwocellConfigError::TooManyCells {
            total,
            max: config.tissue.max_cells,
        }
        .into());
    }
    let mut engine = Engine::new(config.tissue)?;
    engine.register_behavior(TYPE1, Box::new(Type1Behavior::new(config.signal_enabled)));
    engine.register_behavior(TYPE2, Box::new(Type2Behavior::new(config.cell_lifespan_2)));
    let type1 = config.type1_spec();
    for _ in 0..config.num_cells_1 {
        engine.add_cell(&type1)?;
    }
    let type2 = config.type2_spec();
    for _ in 0..config.num_cells_2 {
        engine.add_cell(&type2)?;
    }
    Ok(engine)
}

/// A repeated-run experiment: the same event feed replayed into fresh
/// engines seeded `base_seed`, `base_seed + 1`, ...
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub config: TwocellConfig,
    pub events: Vec<ReplayEvent>,
    pub repeats: u32,
    /// Feed time compression; 1.0 replays at recorded speed and
    /// `f64::INFINITY` front-loads everything.
    pub rate: f64,
    /// Ticks to keep running after the feed is exhausted.
    pub tail_ticks: u64,
    pub base_seed: u64,
    pub with_probe: bool,
    /// Runs on the wall clock instead of virtual time: the engine ticks
    /// at `cell_update_rate` and the feed arrives through the client
    /// queue after `lead_in_ticks` of idle running.
    pub realtime: bool,
    pub lead_in_ticks: u64,
}

impl ExperimentPlan {
    pub fn new(config: TwocellConfig, events: Vec<ReplayEvent>) -> Self {
        ExperimentPlan {
            config,
            events,
            repeats: 1,
            rate: 1.0,
            tail_ticks: 600,
            base_seed: 1,
            with_probe: true,
            realtime: false,
            lead_in_ticks: 100,
        }
    }
}

/// Everything one run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub ticks: u64,
    pub responses: Vec<ResponseRecord>,
    pub probe: Vec<ProbeSample>,
    pub probe_errors: Vec<(u64, String)>,
    pub policy: Policy,
    pub counters: TurnoverCounters,
    /// A run that died keeps its partial outputs and records why here.
    pub error: Option<String>,
}

/// Runs the plan in virtual time. A failed run is reported in its
/// output's `error` field; remaining runs still execute.
pub fn run_experiment(plan: &ExperimentPlan) -> Vec<RunOutput> {
    let mut outputs = Vec::with_capacity(plan.repeats as usize);
    for i in 0..plan.repeats {
        let seed = plan.base_seed + u64::from(i);
        outputs.push(run_once(plan, seed));
    }
    outputs
}

fn run_once(plan: &ExperimentPlan, seed: u64) -> RunOutput {
    let mut config = plan.config.clone();
    config.tissue.rng_seed = seed;
    let mut engine = match build_engine(&config) {
        Ok(e) => e,
        Err(e) => {
            return RunOutput {
                seed,
                ticks: 0,
                responses: Vec::new(),
                probe: Vec::new(),
                probe_errors: Vec::new(),
                policy: policy_from_responses(&[]),
                counters: TurnoverCounters::default(),
                error: Some(e.to_string()),
            }
        }
    };
    let mut probe = plan.with_probe.then(|| {
        let recorder: ProbeRecorder = crate::harness::default_probe();
        recorder
    });
    let result = if plan.realtime {
        run_wall_clock(&mut engine, plan, probe.as_mut())
    } else {
        engine.set_feed(plan.events.clone(), plan.rate);
        let ticks = engine.feed_ticks() + plan.tail_ticks;
        engine.run_virtual(ticks, probe.as_mut())
    };
    let responses = engine.take_responses();
    let policy = policy_from_responses(&responses);
    RunOutput {
        seed,
        ticks: engine.tick_count(),
        responses,
        probe: probe
            .as_ref()
            .map(|p| p.samples().to_vec())
            .unwrap_or_default(),
        probe_errors: probe
            .as_ref()
            .map(|p| p.errors().to_vec())
            .unwrap_or_default(),
        policy,
        counters: *engine.counters(),
        error: result.err().map(|e| e.to_string()),
    }
}

/// Lead in idle, replay the feed through the client queue at wall-clock
/// pace, then keep ticking through the tail.
fn run_wall_clock(
    engine: &mut Engine,
    plan: &ExperimentPlan,
    probe: Option<&mut ProbeRecorder>,
) -> Result<(), TickError> {
    let tick_us = engine.params().cell_update_rate_us;
    let lead_in = Duration::from_micros(plan.lead_in_ticks.saturating_mul(tick_us));
    let feed_span = plan
        .events
        .last()
        .map(|e| Duration::from_micros(scale_offset(e.offset_us, plan.rate)))
        .unwrap_or(Duration::ZERO);
    let tail = Duration::from_micros(plan.tail_ticks.saturating_mul(tick_us));
    let duration = lead_in + feed_span + tail;

    let handle = engine.ingest_handle();
    let events = plan.events.clone();
    let rate = plan.rate;
    let alphabet = engine.params().antigen_alphabet;
    let feeder = thread::spawn(move || {
        thread::sleep(lead_in);
        let _ = replay_with(&events, rate, |event| {
            match event.kind {
                EventKind::Antigen(value) => {
                    // out-of-alphabet values are skipped, as in the virtual feed
                    if let Ok(antigen) = Antigen::new(value, alphabet) {
                        handle.push_antigen(antigen);
                    }
                }
                EventKind::Signal { index, level } => handle.push_signal(index, level),
            }
            Ok(())
        });
    });
    let result = engine.run_realtime(Some(duration), probe, None);
    let _ = feeder.join();
    result
}
