//! The tissue compartment: bounded antigen, signal, and cell stores.

use thiserror::Error;

use crate::model::{Cell, Held};
use crate::params::{ParamError, TissueParams};

/// Fixed-capacity store of antigen copies indexed by slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AntigenStore {
    slots: Vec<Option<Held>>,
}

impl AntigenStore {
    fn new(capacity: usize) -> Self {
        AntigenStore {
            slots: vec![None; capacity],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Occupied slot count.
    pub fn occupied(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Every antigen copy currently stored.
    pub fn held(&self) -> impl Iterator<Item = Held> + '_ {
        self.slots.iter().filter_map(|s| *s)
    }

    pub(crate) fn take(&mut self, slot: usize) -> Option<Held> {
        self.slots[slot].take()
    }

    /// Writes into a slot, returning whatever copy was destroyed by the
    /// overwrite.
    pub(crate) fn put(&mut self, slot: usize, held: Held) -> Option<Held> {
        self.slots[slot].replace(held)
    }
}

/// The tissue's shared cytokine levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalStore {
    levels: Vec<f64>,
}

impl SignalStore {
    fn new(slots: usize) -> Self {
        SignalStore {
            levels: vec![0.0; slots],
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn get(&self, index: usize) -> Result<f64, SignalIndexError> {
        self.levels
            .get(index)
            .copied()
            .ok_or(SignalIndexError {
                index,
                slots: self.levels.len(),
            })
    }

    pub fn set(&mut self, index: usize, level: f64) -> Result<(), SignalIndexError> {
        let slots = self.levels.len();
        match self.levels.get_mut(index) {
            Some(slot) => {
                *slot = level;
                Ok(())
            }
            None => Err(SignalIndexError { index, slots }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("signal index {index} is outside the signal store (0..{slots})")]
pub struct SignalIndexError {
    pub index: usize,
    pub slots: usize,
}

/// Fixed-capacity store of cells indexed by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStore {
    slots: Vec<Option<Cell>>,
}

impl CellStore {
    fn new(capacity: usize) -> Self {
        let mut slots = Vec::with_capacity(capacity);
        slots.resize_with(capacity, || None);
        CellStore { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn live_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn get(&self, slot: usize) -> Option<&Cell> {
        self.slots.get(slot).and_then(|s| s.as_ref())
    }

    pub fn get_mut(&mut self, slot: usize) -> Option<&mut Cell> {
        self.slots.get_mut(slot).and_then(|s| s.as_mut())
    }

    /// Slot indices currently holding a live cell, in slot order.
    pub fn live_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.is_some().then_some(i))
    }

    pub fn iter_live(&self) -> impl Iterator<Item = (usize, &Cell)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|c| (i, c)))
    }

    /// Places a cell in the first free slot and returns that slot.
    pub fn insert(&mut self, mut cell: Cell) -> Result<usize, CellStoreFull> {
        match self.slots.iter().position(|s| s.is_none()) {
            Some(slot) => {
                cell.id = slot;
                self.slots[slot] = Some(cell);
                Ok(slot)
            }
            None => Err(CellStoreFull {
                capacity: self.slots.len(),
            }),
        }
    }

    pub fn remove(&mut self, slot: usize) -> Option<Cell> {
        self.slots.get_mut(slot).and_then(|s| s.take())
    }

    /// Takes a cell out of its slot so it can be updated while the rest of
    /// the store stays borrowable; pair with [`CellStore::put_back`].
    pub(crate) fn take_out(&mut self, slot: usize) -> Option<Cell> {
        self.slots.get_mut(slot).and_then(|s| s.take())
    }

    pub(crate) fn put_back(&mut self, slot: usize, cell: Cell) {
        debug_assert!(self.slots[slot].is_none());
        self.slots[slot] = Some(cell);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("cell store is full (capacity {capacity})")]
pub struct CellStoreFull {
    pub capacity: usize,
}

/// One tissue compartment: the three stores plus a tick counter.
///
/// The compartment is passive data. Ingestion, scheduling, and the RNG
/// that drives slot selection all live in [`crate::engine::Engine`].
#[derive(Debug, Clone)]
pub struct Compartment {
    pub antigen: AntigenStore,
    pub signals: SignalStore,
    pub cells: CellStore,
    /// Completed ticks since construction.
    pub tick_count: u64,
    params: TissueParams,
}

impl Compartment {
    /// Builds an empty compartment after validating the params.
    pub fn new(params: TissueParams) -> Result<Self, ParamError> {
        let params = params.validated()?;
        Ok(Compartment {
            antigen: AntigenStore::new(params.max_antigen),
            signals: SignalStore::new(params.signal_slots()),
            cells: CellStore::new(params.max_cells),
            tick_count: 0,
            params,
        })
    }

    pub fn params(&self) -> &TissueParams {
        &self.params
    }

    /// Writes one signal level, bounds-checked against the signal store.
    pub fn set_signal(&mut self, index: usize, level: f64) -> Result<(), SignalIndexError> {
        self.signals.set(index, level)
    }

    pub fn signal(&self, index: usize) -> Result<f64, SignalIndexError> {
        self.signals.get(index)
    }

    /// Antigen copies currently in cells (their stores plus displays).
    pub fn antigen_in_cells(&self) -> usize {
        self.cells
            .iter_live()
            .map(|(_, c)| c.stored_count() + c.displayed_antigen().count())
            .sum()
    }

    /// Total live antigen copies anywhere in the compartment.
    pub fn antigen_inventory(&self) -> usize {
        self.antigen.occupied() + self.antigen_in_cells()
    }
}
