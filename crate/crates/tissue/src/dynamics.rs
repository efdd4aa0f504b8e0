//! Per-tick receptor and producer rules.
//!
//! Each function updates one cell against the compartment stores. The
//! engine decides the order cells run in; these functions only implement
//! the local rules.

use rand::Rng;

use crate::compartment::{AntigenStore, CellStore, SignalIndexError, SignalStore};
use crate::engine::Turnover;
use crate::model::{Cell, VrMatch};

/// Lock-and-key predicate for VR receptors: `(lock, key) -> matched`.
pub type MatchFn = fn(u32, u32) -> bool;

/// Runs the cell's antigen receptors. Each receptor draws one uniform
/// tissue-store slot; if that slot holds antigen, the copy moves into a
/// uniform slot of the cell's store, destroying whatever was there.
/// Returns the number of copies transferred.
///
/// Cells without antigen-store slots skip the draw entirely.
pub fn update_antigen_receptors(
    cell: &mut Cell,
    tissue: &mut AntigenStore,
    rng: &mut impl Rng,
    turnover: &mut Turnover,
    tick: u64,
) -> usize {
    if cell.antigen_slots() == 0 || tissue.is_empty() {
        return 0;
    }
    let mut transferred = 0;
    for _ in 0..cell.antigen_receptors {
        let slot = rng.random_range(0..tissue.len());
        if let Some(held) = tissue.take(slot) {
            let dest = rng.random_range(0..cell.antigen_slots());
            turnover.transferred(held.tag, cell.id, tick);
            if let Some(displaced) = cell.put_store(dest, held) {
                turnover.cell_overwrite(displaced.tag, cell.id, tick);
            }
            transferred += 1;
        }
    }
    transferred
}

/// Caches the watched signal level on every cytokine receptor.
///
/// Signal indices are validated when the cell is added, so a dangling
/// index here is a bug in the caller.
pub fn update_cytokine_receptors(cell: &mut Cell, signals: &SignalStore) {
    for r in &mut cell.cytokine_receptors {
        r.level = signals
            .get(r.signal_index)
            .expect("cytokine receptor index validated at cell construction");
    }
}

/// Rebinds every cell receptor. Each receptor draws one uniform
/// cell-store slot and binds when the slot holds a cell of the target
/// type; otherwise it is unbound this tick. Returns how many bound.
pub fn update_cell_receptors(cell: &mut Cell, cells: &CellStore, rng: &mut impl Rng) -> usize {
    let mut bound = 0;
    for r in &mut cell.cell_receptors {
        let slot = rng.random_range(0..cells.len());
        r.bound = match cells.get(slot) {
            Some(other) if other.cell_type == r.target_type => {
                bound += 1;
                Some(slot)
            }
            _ => None,
        };
    }
    bound
}

/// Tests the cell's VR receptors against antigen displayed by the cells
/// it is currently bound to, recording every matching (receptor, antigen)
/// pair in `cell.tick_matches` and latching the receptors' match flags.
///
/// With no bound cell receptor nothing is tested: binding gates matching.
pub fn match_vr_receptors(cell: &mut Cell, cells: &CellStore, match_fn: MatchFn) {
    cell.tick_matches.clear();
    if cell.vr_receptors.is_empty() {
        return;
    }
    let mut targets: Vec<usize> = Vec::new();
    for r in &cell.cell_receptors {
        if let Some(slot) = r.bound {
            if !targets.contains(&slot) {
                targets.push(slot);
            }
        }
    }
    for slot in targets {
        let Some(other) = cells.get(slot) else {
            continue;
        };
        for key in other.displayed_antigen() {
            for (idx, vr) in cell.vr_receptors.iter_mut().enumerate() {
                if match_fn(vr.lock, key.value()) {
                    vr.matched = true;
                    cell.tick_matches.push(VrMatch {
                        receptor: idx,
                        value: key.value(),
                    });
                }
            }
        }
    }
}

/// Advances the cell's antigen producers one tick: running displays count
/// down and expire (destroying the copy), then idle producers reload one
/// uniformly chosen copy from the cell's store. A producer whose display
/// expires can reload in the same tick.
pub fn update_producers(cell: &mut Cell, rng: &mut impl Rng, turnover: &mut Turnover, tick: u64) {
    let cell_id = cell.id;
    for i in 0..cell.antigen_producers.len() {
        if let Some(expired) = cell.antigen_producers[i].countdown() {
            turnover.expired(expired.tag, cell_id, tick);
        }
        if !cell.antigen_producers[i].is_displaying() {
            if let Some(held) = cell.take_store_random(rng) {
                turnover.displayed(held.tag, cell_id, tick);
                cell.antigen_producers[i].load(held);
            }
        }
    }
}

/// Writes every cytokine producer's output to the tissue signal store.
/// When several producers target one slot, the last write wins.
pub fn apply_cytokine_producers(
    cell: &Cell,
    signals: &mut SignalStore,
) -> Result<(), SignalIndexError> {
    for p in &cell.cytokine_producers {
        signals.set(p.signal_index, p.output)?;
    }
    Ok(())
}

/// Exact lock-and-key equality, the match rule used by the reference
/// algorithm.
pub fn exact_match(lock: u32, key: u32) -> bool {
    lock == key
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compartment::Compartment;
    use crate::model::{new_cell, Antigen, CellSpec, Held};
    use crate::params::TissueParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn held(value: u32, tag: u64) -> Held {
        Held {
            value: Antigen::new(value, 1024).unwrap(),
            tag,
        }
    }

    fn small_compartment(max_antigen: usize, max_cells: usize) -> Compartment {
        Compartment::new(TissueParams {
            max_antigen,
            max_cells,
            ..TissueParams::default()
        })
        .unwrap()
    }

    #[test]
    fn receptor_transfers_from_tissue_to_cell_store() {
        let mut c = small_compartment(1, 1);
        c.antigen.put(0, held(6, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = CellSpec {
            antigen_slots: 2,
            antigen_receptors: 1,
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, &mut rng);
        let mut turnover = Turnover::default();
        let n = update_antigen_receptors(&mut cell, &mut c.antigen, &mut rng, &mut turnover, 0);
        assert_eq!(n, 1);
        assert_eq!(c.antigen.occupied(), 0);
        assert_eq!(cell.stored_count(), 1);
        assert_eq!(turnover.counters.transferred, 1);
        assert_eq!(turnover.counters.cell_overwritten, 0);
    }

    #[test]
    fn transfer_into_occupied_slot_destroys_old_copy() {
        let mut c = small_compartment(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = CellSpec {
            antigen_slots: 1,
            antigen_receptors: 1,
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, &mut rng);
        let mut turnover = Turnover::default();
        c.antigen.put(0, held(5, 1));
        update_antigen_receptors(&mut cell, &mut c.antigen, &mut rng, &mut turnover, 0);
        c.antigen.put(0, held(6, 2));
        update_antigen_receptors(&mut cell, &mut c.antigen, &mut rng, &mut turnover, 1);
        assert_eq!(cell.stored_count(), 1);
        assert_eq!(cell.stored_antigen().next().unwrap().value(), 6);
        assert_eq!(turnover.counters.transferred, 2);
        assert_eq!(turnover.counters.cell_overwritten, 1);
    }

    #[test]
    fn empty_tissue_slot_is_a_miss() {
        let mut c = small_compartment(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = CellSpec {
            antigen_slots: 1,
            antigen_receptors: 5,
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, &mut rng);
        let mut turnover = Turnover::default();
        let n = update_antigen_receptors(&mut cell, &mut c.antigen, &mut rng, &mut turnover, 0);
        assert_eq!(n, 0);
        assert_eq!(cell.stored_count(), 0);
    }

    #[test]
    fn cell_without_store_slots_skips_the_draw() {
        let mut c = small_compartment(1, 1);
        c.antigen.put(0, held(6, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = CellSpec {
            antigen_slots: 0,
            antigen_receptors: 3,
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, &mut rng);
        let mut turnover = Turnover::default();
        let n = update_antigen_receptors(&mut cell, &mut c.antigen, &mut rng, &mut turnover, 0);
        assert_eq!(n, 0);
        assert_eq!(c.antigen.occupied(), 1);
    }

    #[test]
    fn cytokine_receptors_cache_levels() {
        let mut c = Compartment::new(TissueParams {
            max_cytokines: 2,
            ..TissueParams::default()
        })
        .unwrap();
        c.set_signal(0, 0.25).unwrap();
        c.set_signal(1, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = CellSpec {
            cytokine_receptors: vec![1, 0],
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, &mut rng);
        update_cytokine_receptors(&mut cell, &c.signals);
        assert_eq!(cell.cytokine_receptors[0].level, 0.75);
        assert_eq!(cell.cytokine_receptors[1].level, 0.25);
    }

    #[test]
    fn cell_receptors_bind_only_their_target_type() {
        let mut c = small_compartment(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        c.cells
            .insert(new_cell(0, &CellSpec::bare(1), 1024, &mut rng))
            .unwrap();
        c.cells
            .insert(new_cell(0, &CellSpec::bare(2), 1024, &mut rng))
            .unwrap();
        let spec = CellSpec {
            cell_receptors: vec![2],
            ..CellSpec::bare(3)
        };
        let mut watcher = new_cell(0, &spec, 1024, &mut rng);
        let mut ever_bound = false;
        let mut ever_unbound = false;
        for _ in 0..200 {
            update_cell_receptors(&mut watcher, &c.cells, &mut rng);
            match watcher.cell_receptors[0].bound {
                Some(slot) => {
                    assert_eq!(c.cells.get(slot).unwrap().cell_type, 2);
                    ever_bound = true;
                }
                None => ever_unbound = true,
            }
        }
        assert!(ever_bound && ever_unbound);
    }

    fn displaying_cell(rng: &mut ChaCha8Rng, values: &[u32]) -> Cell {
        let spec = CellSpec {
            antigen_slots: values.len().max(1),
            antigen_producers: values.len(),
            producer_action_time: 10,
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, rng);
        for (i, &v) in values.iter().enumerate() {
            cell.put_store(i, held(v, i as u64 + 1));
        }
        let mut turnover = Turnover::default();
        update_producers(&mut cell, rng, &mut turnover, 0);
        assert_eq!(cell.displayed_antigen().count(), values.len());
        cell
    }

    #[test]
    fn unbound_cells_never_match() {
        let mut c = small_compartment(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let presenter = displaying_cell(&mut rng, &[42]);
        c.cells.insert(presenter).unwrap();
        let spec = CellSpec {
            cell_receptors: vec![1],
            vr_receptors: 1,
            ..CellSpec::bare(2)
        };
        let mut matcher = new_cell(0, &spec, 1024, &mut rng);
        matcher.vr_receptors[0].lock = 42;
        matcher.cell_receptors[0].bound = None;
        match_vr_receptors(&mut matcher, &c.cells, exact_match);
        assert!(matcher.tick_matches().is_empty());
        assert!(!matcher.vr_receptors[0].matched);
    }

    #[test]
    fn bound_matching_reports_every_pair() {
        let mut c = small_compartment(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let presenter = displaying_cell(&mut rng, &[42, 42, 7]);
        let slot = c.cells.insert(presenter).unwrap();
        let spec = CellSpec {
            cell_receptors: vec![1, 1],
            vr_receptors: 3,
            ..CellSpec::bare(2)
        };
        let mut matcher = new_cell(0, &spec, 1024, &mut rng);
        matcher.vr_receptors[0].lock = 42;
        matcher.vr_receptors[1].lock = 42;
        matcher.vr_receptors[2].lock = 9999 % 1024;
        matcher.cell_receptors[0].bound = Some(slot);
        matcher.cell_receptors[1].bound = Some(slot);
        match_vr_receptors(&mut matcher, &c.cells, exact_match);
        // two displayed 42s x two matching receptors; the duplicate bound
        // receptor must not double the count
        assert_eq!(matcher.tick_matches().len(), 4);
        assert!(matcher.tick_matches().iter().all(|m| m.value == 42));
        assert!(matcher.vr_receptors[0].matched);
        assert!(matcher.vr_receptors[1].matched);
        assert!(!matcher.vr_receptors[2].matched);
    }

    #[test]
    fn producer_lifecycle_counts_display_and_expiry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = CellSpec {
            antigen_slots: 1,
            antigen_producers: 1,
            producer_action_time: 3,
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, &mut rng);
        cell.put_store(0, held(6, 1));
        let mut turnover = Turnover::default();
        update_producers(&mut cell, &mut rng, &mut turnover, 0);
        assert_eq!(turnover.counters.displayed, 1);
        assert!(cell.antigen_producers[0].is_displaying());
        for tick in 1..=3 {
            update_producers(&mut cell, &mut rng, &mut turnover, tick);
        }
        assert_eq!(turnover.counters.expired, 1);
        assert!(!cell.antigen_producers[0].is_displaying());
        assert_eq!(cell.stored_count(), 0);
    }

    #[test]
    fn producer_reloads_same_tick_it_expires() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = CellSpec {
            antigen_slots: 2,
            antigen_producers: 1,
            producer_action_time: 1,
            ..CellSpec::bare(1)
        };
        let mut cell = new_cell(0, &spec, 1024, &mut rng);
        cell.put_store(0, held(5, 1));
        cell.put_store(1, held(6, 2));
        let mut turnover = Turnover::default();
        update_producers(&mut cell, &mut rng, &mut turnover, 0);
        update_producers(&mut cell, &mut rng, &mut turnover, 1);
        // first copy expired after one tick and the second loaded at once
        assert_eq!(turnover.counters.expired, 1);
        assert_eq!(turnover.counters.displayed, 2);
        assert!(cell.antigen_producers[0].is_displaying());
    }

    #[test]
    fn cytokine_producers_write_last_value() {
        let mut c = Compartment::new(TissueParams {
            max_cytokines: 1,
            ..TissueParams::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = CellSpec {
            cytokine_producers: vec![(0, 0.3), (0, 0.9)],
            ..CellSpec::bare(1)
        };
        let cell = new_cell(0, &spec, 1024, &mut rng);
        apply_cytokine_producers(&cell, &mut c.signals).unwrap();
        assert_eq!(c.signal(0).unwrap(), 0.9);
    }
}
