//! Acceptance gate: one test per criterion. Each prints a single
//! `criterion NN <name>: PASS|FAIL` line and fails the build on FAIL.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read as _, Write as _};
use std::net::TcpStream;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tissue::engine::{CellBehavior, CycleCtx, CycleError, Engine, ProbeValue, TraceEventKind};
use tissue::harness::{generate_dataset, rate_series, xcorr_peak_lag, Dataset, ScenarioLabel, ScenarioSpec};
use tissue::model::{Antigen, Cell, CellSpec};
use tissue::net::{decode_message, encode_message, serve, Role, ServerHandles, WireMessage};
use tissue::params::TissueParams;
use tissue::policy::{coefficient_of_variation, naive_policy, response_stats, spearman};
use tissue::replay::{replay_to_server, EventKind, ReplayEvent};
use tissue::twocell::{
    build_engine, run_experiment, update_action_time, ActionTimeState, ExperimentPlan,
    RunOutput, TwocellConfig, TYPE2,
};

fn criterion(number: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number:02} {name}: {verdict}");
    assert!(pass, "criterion {number:02} {name}: {detail}");
}

#[test]
fn criterion_01_cv_formula() {
    let start = Instant::now();
    let close = coefficient_of_variation(19.43, 27.03);
    let open = coefficient_of_variation(5.95, 7.75);
    let in_time = start.elapsed() < Duration::from_secs(1);
    criterion(
        1,
        "cv formula",
        close == Some(139) && open == Some(130) && in_time,
        &format!("close {close:?}, open {open:?}, elapsed {:?}", start.elapsed()),
    );
}

#[test]
fn criterion_02_action_time_rule() {
    let start = Instant::now();
    let mut s = ActionTimeState::default();
    let mut ok = s.current == 100;

    // equal signal leaves the value alone
    update_action_time(&mut s, 0.0);
    ok &= s.current == 100;
    // a rise resets to the start value, a drop halves
    update_action_time(&mut s, 0.8);
    ok &= s.current == 100;
    update_action_time(&mut s, 0.7);
    ok &= s.current == 50;
    update_action_time(&mut s, 0.7);
    ok &= s.current == 50;
    // any state, increase: back to the start value
    update_action_time(&mut s, 0.71);
    ok &= s.current == 100;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ActionTimeState::default();
    let mut bounded = true;
    for _ in 0..10_000 {
        update_action_time(&mut s, rng.random::<f64>());
        bounded &= (1..=100).contains(&s.current);
    }
    let in_time = start.elapsed() < Duration::from_secs(1);
    criterion(
        2,
        "action-time rule",
        ok && bounded && in_time,
        &format!("examples ok {ok}, bounded {bounded}, elapsed {:?}", start.elapsed()),
    );
}

#[test]
fn criterion_03_antigen_turnover() {
    let start = Instant::now();
    let spec = ScenarioSpec::for_label(ScenarioLabel::Normal, 31);
    let dataset = generate_dataset(&spec).expect("spec is valid");
    let mut config = TwocellConfig::default();
    config.tissue.rng_seed = 3003;
    let mut engine = build_engine(&config).expect("reference configuration builds");
    engine.enable_trace();
    // the feed ends around tick 600; the rest of the 2000 ticks drain
    engine.set_feed(dataset.events.clone(), 1.0);
    engine.run_virtual(2000, None).expect("run completes");
    let counters = *engine.counters();
    let trace = engine.take_trace();

    #[derive(Clone, Copy, PartialEq)]
    enum Place {
        Tissue,
        InCell,
        Displayed(u64),
        Dead,
    }
    let mut place: HashMap<u64, Place> = HashMap::new();
    let mut legal = true;
    let mut expiry_exact = true;
    let action_time = config.antigen_producer_action_time;
    for event in &trace {
        let current = place.get(&event.tag).copied();
        let next = match (current, event.kind) {
            (None, TraceEventKind::Ingested { .. }) => Place::Tissue,
            (Some(Place::Tissue), TraceEventKind::TissueOverwrite) => Place::Dead,
            (Some(Place::Tissue), TraceEventKind::Transferred { .. }) => Place::InCell,
            (Some(Place::InCell), TraceEventKind::CellOverwrite { .. }) => Place::Dead,
            (Some(Place::InCell), TraceEventKind::Displayed { .. }) => Place::Displayed(event.tick),
            (Some(Place::Displayed(since)), TraceEventKind::Expired { .. }) => {
                expiry_exact &= event.tick - since == action_time;
                Place::Dead
            }
            _ => {
                legal = false;
                break;
            }
        };
        place.insert(event.tag, next);
    }
    let survivors = place.values().filter(|&&p| p != Place::Dead).count();
    let every_copy_traced = place.len() as u64 == counters.ingested;
    let conserved = counters.ingested == counters.destroyed() && counters.live() == 0;
    let in_time = start.elapsed() < Duration::from_secs(10);
    criterion(
        3,
        "antigen turnover",
        legal && expiry_exact && survivors == 0 && every_copy_traced && conserved && in_time,
        &format!(
            "legal {legal}, expiry exact {expiry_exact}, survivors {survivors}, {counters}, elapsed {:?}",
            start.elapsed()
        ),
    );
}

struct Inert;

impl CellBehavior for Inert {
    fn cycle(&mut self, _cell: &mut Cell, _ctx: &mut CycleCtx<'_>) -> Result<(), CycleError> {
        Ok(())
    }
}

#[test]
fn criterion_04_transfer_probability() {
    let start = Instant::now();
    let params = TissueParams {
        antigen_multiplier: 1,
        max_cells: 1,
        rng_seed: 40_004,
        ..TissueParams::default()
    };
    let slots = params.max_antigen as f64;
    let mut engine = Engine::new(params).expect("params are valid");
    engine.register_behavior(7, Box::new(Inert));
    let spec = CellSpec {
        antigen_slots: 1,
        antigen_receptors: 1,
        ..CellSpec::bare(7)
    };
    engine.add_cell(&spec).expect("one cell fits");
    let antigen = Antigen::new(6, engine.params().antigen_alphabet).expect("in alphabet");
    engine.ingest_antigen(antigen);

    // one receptor, one occupied slot of 1000: each tick is one
    // transfer trial with hit probability 1/1000
    let trials: u64 = 1_000_000;
    let mut hits = 0u64;
    let mut seen = 0u64;
    for _ in 0..trials {
        engine.tick().expect("tick succeeds");
        let transferred = engine.counters().transferred;
        if transferred > seen {
            hits += transferred - seen;
            seen = transferred;
            engine.ingest_antigen(antigen);
        }
    }
    let p = 1.0 / slots;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    let expected = trials as f64 * p;
    let low = (expected - 3.0 * sigma).floor() as u64;
    let high = (expected + 3.0 * sigma).ceil() as u64;
    let in_band = (low..=high).contains(&hits);
    let in_time = start.elapsed() < Duration::from_secs(30);
    criterion(
        4,
        "transfer probability",
        in_band && in_time,
        &format!(
            "{hits} hits outside [{low}, {high}] or elapsed {:?} over budget",
            start.elapsed()
        ),
    );
}

struct Corpus {
    dataset: Dataset,
    outputs: Vec<RunOutput>,
}

/// Twenty seeded runs over one normal dataset, shared by the criteria
/// that analyse repeated runs.
fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let spec = ScenarioSpec::for_label(ScenarioLabel::Normal, 1001);
        let dataset = generate_dataset(&spec).expect("spec is valid");
        let mut plan = ExperimentPlan::new(TwocellConfig::default(), dataset.events.clone());
        plan.repeats = 20;
        plan.base_seed = 101;
        plan.with_probe = false;
        let outputs = run_experiment(&plan);
        Corpus { dataset, outputs }
    })
}

fn input_frequencies(dataset: &Dataset) -> BTreeMap<u32, u64> {
    let mut freq = BTreeMap::new();
    for label in &dataset.labels {
        *freq.entry(label.syscall).or_insert(0) += 1;
    }
    freq
}

#[test]
fn criterion_05_frequency_selectivity() {
    let start = Instant::now();
    let c = corpus();
    let all_ran = c.outputs.iter().all(|o| o.error.is_none());
    let naive = naive_policy(&[c.dataset.labels.iter().map(|l| l.syscall).collect()]);
    let all_subsets = c.outputs.iter().all(|o| o.policy.is_subset(&naive));

    let freq = input_frequencies(&c.dataset);
    let runs = c.outputs.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = freq
        .iter()
        .map(|(&syscall, &count)| {
            let included = c
                .outputs
                .iter()
                .filter(|o| o.policy.permits(syscall))
                .count();
            (count as f64, included as f64 / runs)
        })
        .unzip();
    let rho = spearman(&xs, &ys);
    let selective = rho.map(|r| r > 0.5).unwrap_or(false);
    let in_time = start.elapsed() < Duration::from_secs(120);
    criterion(
        5,
        "frequency selectivity",
        all_ran && all_subsets && selective && in_time,
        &format!(
            "runs ok {all_ran}, subsets {all_subsets}, rho {rho:?}, elapsed {:?}",
            start.elapsed()
        ),
    );
}

/// Not a numbered criterion: the stats invariant that rarer syscalls
/// respond with more relative variation.
#[test]
fn cv_inversion_on_the_normal_corpus() {
    let c = corpus();
    let runs: Vec<_> = c.outputs.iter().map(|o| o.responses.clone()).collect();
    let stats = response_stats(&runs);
    let freq = input_frequencies(&c.dataset);
    let (xs, ys): (Vec<f64>, Vec<f64>) = stats
        .iter()
        .filter_map(|(syscall, s)| {
            let count = freq.get(syscall).copied()?;
            let cv = s.cv?;
            Some((count as f64, cv as f64))
        })
        .unzip();
    let rho = spearman(&xs, &ys).expect("enough syscalls for a rank correlation");
    assert!(rho < 0.0, "input frequency vs cv should invert, rho {rho}");
}

#[test]
fn criterion_06_lock_dynamics() {
    let start = Instant::now();
    let spec = ScenarioSpec::for_label(ScenarioLabel::Normal, 66);
    let dataset = generate_dataset(&spec).expect("spec is valid");
    let mut config = TwocellConfig::default();
    config.tissue.rng_seed = 606;
    let lifespan = config.cell_lifespan_2;
    let mut engine = build_engine(&config).expect("reference configuration builds");
    engine.set_feed(dataset.events.clone(), 1.0);
    let total = engine.feed_ticks() + 600;

    let locks_of = |cell: &Cell| -> Vec<u32> { cell.vr_receptors.iter().map(|r| r.lock).collect() };
    let mut first_response: HashMap<usize, u64> = HashMap::new();
    let mut responder_locks: HashMap<usize, Vec<u32>> = HashMap::new();
    let mut locks_constant = true;
    let mut redraws: HashMap<usize, Vec<u64>> = HashMap::new();
    let mut redraw_counts: HashMap<usize, u64> = HashMap::new();
    let mut seen_responses = 0usize;
    for _ in 0..total {
        engine.tick().expect("tick succeeds");
        let tick = engine.tick_count();
        let responses = engine.responses();
        for r in &responses[seen_responses..] {
            first_response.entry(r.cell_id).or_insert(r.tick);
        }
        seen_responses = responses.len();
        for (slot, cell) in engine.compartment().cells.iter_live() {
            if cell.cell_type != TYPE2 {
                continue;
            }
            let count = redraw_counts.entry(slot).or_insert(0);
            if cell.randomise_count > *count {
                redraws.entry(slot).or_default().push(tick);
                *count = cell.randomise_count;
            }
            if first_response.contains_key(&slot) {
                match responder_locks.get(&slot) {
                    Some(reference) => locks_constant &= *reference == locks_of(cell),
                    None => {
                        responder_locks.insert(slot, locks_of(cell));
                    }
                }
            }
        }
    }

    let some_responders = !first_response.is_empty();
    let expected: Vec<u64> = (1..=total / lifespan).map(|k| k * lifespan).collect();
    let mut never_matchers = 0;
    let mut schedule_exact = true;
    for (slot, cell) in engine.compartment().cells.iter_live() {
        if cell.cell_type != TYPE2 || first_response.contains_key(&slot) {
            continue;
        }
        never_matchers += 1;
        let empty = Vec::new();
        let got = redraws.get(&slot).unwrap_or(&empty);
        schedule_exact &= *got == expected;
    }
    let in_time = start.elapsed() < Duration::from_secs(30);
    criterion(
        6,
        "lock dynamics",
        some_responders && locks_constant && never_matchers > 0 && schedule_exact && in_time,
        &format!(
            "responders {}, locks constant {locks_constant}, never-matchers {never_matchers}, \
             schedule exact {schedule_exact}, elapsed {:?}",
            first_response.len(),
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_07_burst_coupling() {
    let start = Instant::now();
    let c = corpus();
    let tick_us = 100_000u64;
    let bin_ticks = 10u64;
    let bin_us = bin_ticks * tick_us;
    let input_times: Vec<u64> = c.dataset.labels.iter().map(|l| l.offset_us).collect();
    let output = &c.outputs[0];
    let response_times: Vec<u64> = output.responses.iter().map(|r| r.tick * tick_us).collect();
    let last = input_times
        .iter()
        .chain(&response_times)
        .max()
        .copied()
        .unwrap_or(0);
    let bins = (last / bin_us + 1) as usize;
    let input_rate = rate_series(&input_times, bin_us, bins);
    let response_rate = rate_series(&response_times, bin_us, bins);
    let lag = xcorr_peak_lag(&input_rate, &response_rate, 20);
    let in_time = start.elapsed() < Duration::from_secs(30);
    criterion(
        7,
        "burst coupling",
        lag.map(|l| l >= 0).unwrap_or(false) && in_time,
        &format!("peak lag {lag:?}, elapsed {:?}", start.elapsed()),
    );
}

fn response_span(output: &RunOutput) -> Option<u64> {
    let first = output.responses.first()?.tick;
    let last = output.responses.last()?.tick;
    Some(last - first)
}

#[test]
fn criterion_08_signal_vs_fixed() {
    let start = Instant::now();
    let spec = ScenarioSpec::for_label(ScenarioLabel::Success, 2002);
    let dataset = generate_dataset(&spec).expect("spec is valid");
    let feed_ticks = dataset
        .events
        .iter()
        .map(|e| e.offset_us)
        .max()
        .unwrap_or(0)
        / 100_000
        + 1;

    let mut signal_config = TwocellConfig::default();
    signal_config.signal_enabled = true;
    let mut plan = ExperimentPlan::new(signal_config, dataset.events.clone());
    plan.repeats = 20;
    plan.base_seed = 501;
    let signal_arm = run_experiment(&plan);

    // fixed arm runs at the rounded mean action time observed while the
    // feed was live in the signal arm
    let mut sum = 0.0;
    let mut samples = 0usize;
    for output in &signal_arm {
        for sample in &output.probe {
            if sample.tick > feed_ticks {
                continue;
            }
            if let Some((_, ProbeValue::Scalar(v))) = sample
                .fields
                .iter()
                .find(|(name, _)| name == "mean_action_time")
            {
                sum += v;
                samples += 1;
            }
        }
    }
    let observed_mean = sum / samples.max(1) as f64;
    let fixed_action_time = (observed_mean.round() as u64).max(1);

    let mut fixed_config = TwocellConfig::default();
    fixed_config.antigen_producer_action_time = fixed_action_time;
    let mut plan = ExperimentPlan::new(fixed_config, dataset.events.clone());
    plan.repeats = 20;
    plan.base_seed = 501;
    plan.with_probe = false;
    let fixed_arm = run_experiment(&plan);

    let arm_ok = |arm: &[RunOutput]| arm.iter().all(|o| o.error.is_none() && !o.responses.is_empty());
    let mean_span = |arm: &[RunOutput]| {
        let spans: Vec<u64> = arm.iter().filter_map(response_span).collect();
        spans.iter().sum::<u64>() as f64 / spans.len().max(1) as f64
    };
    let signal_span = mean_span(&signal_arm);
    let fixed_span = mean_span(&fixed_arm);
    let shorter = signal_span < fixed_span;
    let in_time = start.elapsed() < Duration::from_secs(300);
    criterion(
        8,
        "signal vs fixed action time",
        arm_ok(&signal_arm) && arm_ok(&fixed_arm) && shorter && in_time,
        &format!(
            "fixed action time {fixed_action_time} (mean {observed_mean:.2}), \
             signal span {signal_span:.1} ticks vs fixed span {fixed_span:.1}, elapsed {:?}",
            start.elapsed()
        ),
    );
}

fn message_strategy() -> impl Strategy<Value = WireMessage> {
    let role = prop_oneof![
        Just(Role::Antigen),
        Just(Role::Signal),
        Just(Role::Response)
    ];
    let error_text = prop_oneof![
        Just(String::new()),
        "[!-~]([ -~]{0,150}[!-~])?".prop_map(|s: String| s),
    ];
    prop_oneof![
        role.prop_map(WireMessage::Hello),
        any::<u32>().prop_map(WireMessage::Antigen),
        (any::<usize>(), any::<f64>().prop_filter("finite", |l| l.is_finite()))
            .prop_map(|(index, level)| WireMessage::Signal { index, level }),
        (any::<u64>(), any::<u32>())
            .prop_map(|(tick, value)| WireMessage::Response { tick, value }),
        error_text.prop_map(WireMessage::Error),
    ]
}

#[test]
fn criterion_09_protocol_round_trip() {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let round_trip = runner.run(&message_strategy(), |message| {
        let line = encode_message(&message);
        prop_assert!(line.ends_with('\n'));
        prop_assert!(!line[..line.len() - 1].contains('\n'));
        let decoded = decode_message(&line);
        prop_assert_eq!(decoded, Ok(message));
        Ok(())
    });

    // fuzz lines never bring down a session or the server
    let mut config = TwocellConfig::default();
    config.tissue.rng_seed = 909;
    let engine = build_engine(&config).expect("reference configuration builds");
    let handles = ServerHandles::from_engine(&engine);
    let ingest = handles.ingest.clone();
    let server = serve("127.0.0.1:0", handles).expect("loopback bind");
    let addr = server.local_addr();

    // garbage before the hello earns an E and a closed session
    let mut pre = TcpStream::connect(addr).expect("connect");
    pre.write_all(b"\x00\xffnonsense first line\n").expect("write");
    pre.set_read_timeout(Some(Duration::from_secs(2))).expect("timeout");
    let mut reply = Vec::new();
    let pre_hello_closed = pre.read_to_end(&mut reply).is_ok();
    let pre_hello_error = reply.starts_with(b"E ");

    // a proper session survives heavy garbage
    let mut fuzz = TcpStream::connect(addr).expect("connect");
    fuzz.write_all(b"H antigen\n").expect("hello");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..300 {
        let len = rng.random_range(0..120);
        let mut line: Vec<u8> = (0..len)
            .map(|_| {
                let b: u8 = rng.random();
                if b == b'\n' {
                    b' '
                } else {
                    b
                }
            })
            .collect();
        line.push(b'\n');
        fuzz.write_all(&line).expect("fuzz line");
    }
    fuzz.write_all(&vec![b'x'; 9000]).expect("oversized line");
    fuzz.write_all(b"\n").expect("newline");
    let before = ingest.len();
    fuzz.write_all(b"A 6\n").expect("valid antigen");
    let mut survived = false;
    for _ in 0..100 {
        if ingest.len() > before {
            survived = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    drop(fuzz);

    // and the server still takes fresh clients afterwards
    let mut fresh = TcpStream::connect(addr).expect("connect");
    fresh.write_all(b"H antigen\nA 5\n").expect("write");
    let mut fresh_ok = false;
    let target = ingest.len();
    for _ in 0..100 {
        if ingest.len() > target {
            fresh_ok = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    drop(fresh);
    server.shutdown();

    let in_time = start.elapsed() < Duration::from_secs(30);
    criterion(
        9,
        "protocol round-trip",
        round_trip.is_ok()
            && pre_hello_closed
            && pre_hello_error
            && survived
            && fresh_ok
            && in_time,
        &format!(
            "round trip {round_trip:?}, pre-hello closed {pre_hello_closed} error {pre_hello_error}, \
             fuzz survived {survived}, fresh client {fresh_ok}, elapsed {:?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_10_replay_fidelity() {
    let start = Instant::now();
    let values: Vec<u32> = (0..=30).map(|i| (i * 7) % 38).collect();
    let events: Vec<ReplayEvent> = values
        .iter()
        .enumerate()
        .map(|(i, &value)| ReplayEvent {
            offset_us: i as u64 * 100_000,
            kind: EventKind::Antigen(value),
        })
        .collect();
    let span_us = events.last().unwrap().offset_us;
    let rate = 10.0;

    let params = TissueParams {
        antigen_multiplier: 1,
        rng_seed: 1010,
        ..TissueParams::default()
    };
    let mut engine = Engine::new(params).expect("params are valid");
    engine.enable_trace();
    let handles = ServerHandles::from_engine(&engine);
    let ingest = handles.ingest.clone();
    let server = serve("127.0.0.1:0", handles).expect("loopback bind");
    let addr = server.local_addr().to_string();

    let summary = replay_to_server(&events, rate, &addr).expect("replay succeeds");
    let mut queued = false;
    for _ in 0..200 {
        if ingest.len() == events.len() {
            queued = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    server.shutdown();
    engine.tick().expect("tick succeeds");
    let got: Vec<u32> = engine
        .take_trace()
        .iter()
        .filter_map(|e| match e.kind {
            TraceEventKind::Ingested { value } => Some(value),
            _ => None,
        })
        .collect();
    let order_ok = got == values;

    let expected = Duration::from_micros((span_us as f64 / rate) as u64);
    let tolerance = expected.mul_f64(0.1);
    let duration_ok = summary.elapsed >= expected.saturating_sub(tolerance)
        && summary.elapsed <= expected + tolerance;
    let in_time = start.elapsed() < Duration::from_secs(60);
    criterion(
        10,
        "replay fidelity",
        summary.sent == events.len() && queued && order_ok && duration_ok && in_time,
        &format!(
            "sent {}, queued {queued}, order ok {order_ok}, elapsed {:?} vs expected {:?} (±10%), \
             test elapsed {:?}",
            summary.sent,
            summary.elapsed,
            expected,
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_tissue");
    let run_pipeline = |dir: &std::path::Path| {
        let run = |args: &[&str]| {
            let output = Command::new(bin)
                .args(args)
                .current_dir(dir)
                .output()
                .expect("binary runs");
            assert!(
                output.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&output.stderr)
            );
        };
        run(&["gen-data", "--label", "normal", "--seed", "7", "--events", "500", "--out", "normal"]);
        run(&[
            "run-twocell",
            "--log",
            "normal.log",
            "--repeats",
            "3",
            "--seed",
            "5",
            "--out",
            "runs",
        ]);
        run(&["naive-policy", "--log", "normal.log", "--out", "naive.policy"]);
        run(&[
            "merge-policy",
            "--policy",
            "runs/run_00.policy",
            "runs/run_01.policy",
            "runs/run_02.policy",
            "--out",
            "merged.policy",
        ]);
    };
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    run_pipeline(a.path());
    run_pipeline(b.path());

    let artifacts = [
        "normal.log",
        "normal.labels",
        "runs/run_00.responses.csv",
        "runs/run_01.responses.csv",
        "runs/run_02.responses.csv",
        "runs/run_00.probe.csv",
        "runs/run_01.probe.csv",
        "runs/run_02.probe.csv",
        "runs/run_00.policy",
        "runs/run_01.policy",
        "runs/run_02.policy",
        "naive.policy",
        "merged.policy",
    ];
    let mut identical = true;
    let mut first_diff = String::new();
    for artifact in artifacts {
        let left = std::fs::read(a.path().join(artifact)).expect("artifact exists");
        let right = std::fs::read(b.path().join(artifact)).expect("artifact exists");
        if left != right {
            identical = false;
            first_diff = artifact.to_string();
            break;
        }
    }
    let in_time = start.elapsed() < Duration::from_secs(120);
    criterion(
        11,
        "end-to-end determinism",
        identical && in_time,
        &format!("first differing artifact {first_diff:?}, elapsed {:?}", start.elapsed()),
    );
}
