//! Domain types: antigen, receptors, producers, and cells.
//!
//! Everything here is plain data. The per-tick rules that move antigen
//! through these structures live in [`crate::dynamics`]; scheduling lives
//! in [`crate::engine`].

use rand::Rng;
use thiserror::Error;

/// A syscall token. Values are validated against the compartment's
/// antigen alphabet before one of these exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Antigen(u32);

impl Antigen {
    /// Wraps a raw value, rejecting anything outside `0..alphabet`.
    pub fn new(value: u32, alphabet: u32) -> Result<Self, InvalidAntigen> {
        if value < alphabet {
            Ok(Antigen(value))
        } else {
            Err(InvalidAntigen { value, alphabet })
        }
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("antigen value {value} is outside the alphabet 0..{alphabet}")]
pub struct InvalidAntigen {
    pub value: u32,
    pub alphabet: u32,
}

/// One stored antigen copy. The tag identifies this copy across every
/// store it moves through so turnover can be audited copy by copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Held {
    pub value: Antigen,
    pub tag: u64,
}

/// Caches one signal level out of the tissue signal store each tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CytokineReceptor {
    pub signal_index: usize,
    pub level: f64,
}

/// Binds to a uniformly drawn cell-store slot each tick when the slot
/// holds a cell of the target type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellReceptor {
    pub target_type: u32,
    /// Cell-store index bound this tick, if any.
    pub bound: Option<usize>,
}

/// A variable-region receptor: a lock value tested against antigen
/// displayed by cells this cell is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrReceptor {
    pub lock: u32,
    /// Set once this receptor ever matched; cleared on lock randomisation.
    pub matched: bool,
}

/// Displays one antigen from the cell store for `action_time` ticks,
/// then destroys it and reloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AntigenProducer {
    displayed: Option<Held>,
    action_time: u64,
    remaining: u64,
}

impl AntigenProducer {
    pub fn new(action_time: u64) -> Self {
        AntigenProducer {
            displayed: None,
            action_time,
            remaining: 0,
        }
    }

    /// The antigen currently on display, if any.
    pub fn displayed(&self) -> Option<Antigen> {
        self.displayed.map(|h| h.value)
    }

    pub fn is_displaying(&self) -> bool {
        self.displayed.is_some()
    }

    pub fn action_time(&self) -> u64 {
        self.action_time
    }

    /// Ticks left before the current display expires.
    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    /// Changes the display duration. A display already in progress keeps
    /// its countdown, clamped so `remaining <= action_time` stays true.
    pub fn set_action_time(&mut self, ticks: u64) {
        self.action_time = ticks;
        if self.displayed.is_some() {
            self.remaining = self.remaining.min(ticks);
        }
    }

    /// Starts displaying `held` for a full action time.
    pub(crate) fn load(&mut self, held: Held) {
        debug_assert!(self.displayed.is_none());
        self.displayed = Some(held);
        self.remaining = self.action_time;
    }

    /// Counts the current display down one tick; returns the held copy
    /// when the display just expired.
    pub(crate) fn countdown(&mut self) -> Option<Held> {
        if self.displayed.is_none() {
            return None;
        }
        self.remaining = self.remaining.saturating_sub(1);
        if self.remaining == 0 {
            self.displayed.take()
        } else {
            None
        }
    }
}

/// Writes a fixed output level to one signal-store slot each tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CytokineProducer {
    pub signal_index: usize,
    pub output: f64,
}

/// A record of one VR receptor match observed this tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrMatch {
    /// Index into the cell's VR receptor list.
    pub receptor: usize,
    /// The antigen value that matched.
    pub value: u32,
}

/// A cell: a typed bundle of receptors, producers, and internal state
/// living in one cell-store slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Slot index in the tissue cell store.
    pub id: usize,
    /// Behavior tag; the engine dispatches callbacks on this.
    pub cell_type: u32,
    pub(crate) antigen_store: Vec<Option<Held>>,
    /// Number of antigen receptors pulling from the tissue store.
    pub antigen_receptors: usize,
    pub cytokine_receptors: Vec<CytokineReceptor>,
    pub cell_receptors: Vec<CellReceptor>,
    pub vr_receptors: Vec<VrReceptor>,
    pub antigen_producers: Vec<AntigenProducer>,
    pub cytokine_producers: Vec<CytokineProducer>,
    /// Response producers available to the cycle callback.
    pub response_producers: usize,
    /// Cell-internal signal levels, invisible to other cells.
    pub internal_cytokines: Vec<i64>,
    /// Ticks since the VR locks were last randomised (or since birth).
    pub age_since_randomise: u64,
    /// How many times the VR locks have been randomised.
    pub randomise_count: u64,
    /// Matches recorded by the receptor phase of the current tick.
    pub(crate) tick_matches: Vec<VrMatch>,
}

impl Cell {
    /// Capacity of this cell's antigen store.
    pub fn antigen_slots(&self) -> usize {
        self.antigen_store.len()
    }

    /// Occupied slots in this cell's antigen store.
    pub fn stored_count(&self) -> usize {
        self.antigen_store.iter().filter(|s| s.is_some()).count()
    }

    /// The antigen currently held in the cell store.
    pub fn stored_antigen(&self) -> impl Iterator<Item = Antigen> + '_ {
        self.antigen_store.iter().filter_map(|s| s.map(|h| h.value))
    }

    /// Antigen displayed on this cell's producers right now.
    pub fn displayed_antigen(&self) -> impl Iterator<Item = Antigen> + '_ {
        self.antigen_producers.iter().filter_map(|p| p.displayed())
    }

    /// VR matches recorded during the current tick's receptor phase.
    pub fn tick_matches(&self) -> &[VrMatch] {
        &self.tick_matches
    }

    /// Draws a fresh lock value for every VR receptor, clears their match
    /// flags, and resets the randomisation age.
    pub fn randomise_vr_locks(&mut self, alphabet: u32, rng: &mut impl Rng) {
        for vr in &mut self.vr_receptors {
            vr.lock = rng.random_range(0..alphabet);
            vr.matched = false;
        }
        self.age_since_randomise = 0;
        self.randomise_count += 1;
    }

    pub(crate) fn put_store(&mut self, slot: usize, held: Held) -> Option<Held> {
        self.antigen_store[slot].replace(held)
    }

    pub(crate) fn take_store_random(&mut self, rng: &mut impl Rng) -> Option<Held> {
        let occupied: Vec<usize> = self
            .antigen_store
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.is_some().then_some(i))
            .collect();
        if occupied.is_empty() {
            return None;
        }
        let slot = occupied[rng.random_range(0..occupied.len())];
        self.antigen_store[slot].take()
    }
}

/// A recipe for building cells of one type.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub cell_type: u32,
    /// Capacity of the per-cell antigen store.
    pub antigen_slots: usize,
    pub antigen_receptors: usize,
    /// Signal-store index watched by each cytokine receptor.
    pub cytokine_receptors: Vec<usize>,
    /// Target cell type for each cell receptor.
    pub cell_receptors: Vec<u32>,
    /// Number of VR receptors; locks are drawn at construction.
    pub vr_receptors: usize,
    pub antigen_producers: usize,
    /// Display duration for each antigen producer.
    pub producer_action_time: u64,
    /// Signal-store index written by each cytokine producer, with output.
    pub cytokine_producers: Vec<(usize, f64)>,
    pub response_producers: usize,
    /// Number of cell-internal signal slots.
    pub internal_cytokines: usize,
}

impl CellSpec {
    /// A spec with nothing but a type tag; tests and callers fill in the
    /// parts they need.
    pub fn bare(cell_type: u32) -> Self {
        CellSpec {
            cell_type,
            antigen_slots: 0,
            antigen_receptors: 0,
            cytokine_receptors: Vec::new(),
            cell_receptors: Vec::new(),
            vr_receptors: 0,
            antigen_producers: 0,
            producer_action_time: 1,
            cytokine_producers: Vec::new(),
            response_producers: 0,
            internal_cytokines: 0,
        }
    }
}

/// Builds a cell from a spec. VR locks are drawn from `rng`, so two cells
/// built from identical RNG states carry identical locks.
pub fn new_cell(id: usize, spec: &CellSpec, alphabet: u32, rng: &mut impl Rng) -> Cell {
    let vr_receptors = (0..spec.vr_receptors)
        .map(|_| VrReceptor {
            lock: rng.random_range(0..alphabet),
            matched: false,
        })
        .collect();
    Cell {
        id,
        cell_type: spec.cell_type,
        antigen_store: vec![None; spec.antigen_slots],
        antigen_receptors: spec.antigen_receptors,
        cytokine_receptors: spec
            .cytokine_receptors
            .iter()
            .map(|&signal_index| CytokineReceptor {
                signal_index,
                level: 0.0,
            })
            .collect(),
        cell_receptors: spec
            .cell_receptors
            .iter()
            .map(|&target_type| CellReceptor {
                target_type,
                bound: None,
            })
            .collect(),
        vr_receptors,
        antigen_producers: (0..spec.antigen_producers)
            .map(|_| AntigenProducer::new(spec.producer_action_time))
            .collect(),
        cytokine_producers: spec
            .cytokine_producers
            .iter()
            .map(|&(signal_index, output)| CytokineProducer {
                signal_index,
                output,
            })
            .collect(),
        response_producers: spec.response_producers,
        internal_cytokines: vec![0; spec.internal_cytokines],
        age_since_randomise: 0,
        randomise_count: 0,
        tick_matches: Vec::new(),
    }
}
