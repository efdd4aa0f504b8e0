//! The experiment tool: serve a compartment, generate and replay
//! datasets, run repeated experiments, and turn the outputs into
//! policies, statistics, and plot series.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tissue::engine::samples_to_csv;
use tissue::harness::{
    self, atomic_write, default_probe, format_eval_report, format_responses_csv, rate_series,
    EvalRow, ScenarioLabel, ScenarioSpec,
};
use tissue::net::{resolve_addr, serve, ServerHandles};
use tissue::policy::{
    evaluate_policy, format_policy, load_policy, merge_policies, naive_policy, response_stats,
    LabeledTrace, Policy,
};
use tissue::replay::{load_replay_log, load_strace_log, replay_to_server, EventKind, NameMap};
use tissue::twocell::{build_engine, run_experiment, ExperimentPlan, TwocellConfig};

#[derive(Parser)]
#[command(name = "tissue", version, about = "Tissue simulation experiment tool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a tissue server running the twocell algorithm in real time
    Serve(ServeArgs),
    /// Replay a recorded log (or strace output) to a server
    Replay(ReplayArgs),
    /// Generate a synthetic labeled dataset
    GenData(GenDataArgs),
    /// Run repeated twocell experiments over a replay log (virtual time
    /// unless --realtime)
    RunTwocell(RunTwocellArgs),
    /// Build the permit-everything-observed policy from replay logs
    NaivePolicy(NaivePolicyArgs),
    /// Union several policy files into one
    MergePolicy(MergePolicyArgs),
    /// Per-syscall response statistics across runs
    Stats(StatsArgs),
    /// Score policies against labeled traces
    EvalPolicy(EvalPolicyArgs),
    /// Emit plot-ready CSV series from run outputs
    Plotdata(PlotdataArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address; falls back to $TISSUE_ADDR, then 127.0.0.1:7878
    #[arg(long)]
    addr: Option<String>,
    /// Parameter file; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drive producer action times from signal 0
    #[arg(long)]
    signal: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Stop after this many seconds; runs until killed when omitted
    #[arg(long)]
    duration: Option<f64>,
    /// Print turnover counters on exit
    #[arg(long)]
    debug_counters: bool,
    /// Write a response CSV here on exit
    #[arg(long)]
    responses_out: Option<PathBuf>,
    /// Write a probe CSV here on exit
    #[arg(long)]
    probe_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Replay log, or strace output with --strace
    #[arg(long)]
    log: PathBuf,
    /// Treat the log as strace output
    #[arg(long)]
    strace: bool,
    /// Time compression; 2 replays twice as fast, inf sends immediately
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Server address; falls back to $TISSUE_ADDR, then 127.0.0.1:7878
    #[arg(long)]
    addr: Option<String>,
    /// Syscall name map; built-in table when omitted
    #[arg(long)]
    map: Option<PathBuf>,
    /// Gap in microseconds synthesized between untimestamped strace lines
    #[arg(long, default_value_t = 10_000)]
    synth_gap: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LabelArg {
    Normal,
    Success,
    Failure,
}

impl From<LabelArg> for ScenarioLabel {
    fn from(label: LabelArg) -> ScenarioLabel {
        match label {
            LabelArg::Normal => ScenarioLabel::Normal,
            LabelArg::Success => ScenarioLabel::Success,
            LabelArg::Failure => ScenarioLabel::Failure,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value_t = LabelArg::Normal)]
    label: LabelArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of syscall events; scenario default when omitted
    #[arg(long)]
    events: Option<usize>,
    /// Span of the syscall stream in seconds; scenario default when omitted
    #[arg(long)]
    span_s: Option<u64>,
    /// Output prefix; writes <prefix>.log and <prefix>.labels
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunTwocellArgs {
    /// Replay log to feed
    #[arg(long)]
    log: PathBuf,
    /// Parameter file; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drive producer action times from signal 0
    #[arg(long)]
    signal: bool,
    /// Seed of the first run; run i uses seed + i
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    /// Feed time compression applied to log offsets
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Ticks to keep running after the feed is exhausted
    #[arg(long, default_value_t = 600)]
    tail_ticks: u64,
    /// Skip probe sampling
    #[arg(long)]
    no_probe: bool,
    /// Run on the wall clock: 10 s idle lead-in, then the feed arrives
    /// through the client queue at recorded pace
    #[arg(long)]
    realtime: bool,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NaivePolicyArgs {
    /// Replay logs of observed traffic
    #[arg(long = "log", required = true, num_args = 1..)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergePolicyArgs {
    /// Policy files to union
    #[arg(long = "policy", required = true, num_args = 1..)]
    policies: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Response CSVs, one per run
    #[arg(long = "responses", required = true, num_args = 1..)]
    responses: Vec<PathBuf>,
    /// Replay log supplying the input-frequency column
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPolicyArgs {
    /// Policy files to score
    #[arg(long = "policy", required = true, num_args = 1..)]
    policies: Vec<PathBuf>,
    /// Label files defining the datasets
    #[arg(long = "labels", required = true, num_args = 1..)]
    labels: Vec<PathBuf>,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlotKind {
    /// Input rate and response rate over time (needs --log and --responses)
    ResponseRate,
    /// Every VR lock sample as one row (needs --probe)
    VrLocks,
    /// Response rate averaged across runs (needs --responses, repeatable)
    MeanResponseRate,
}

#[derive(Args)]
struct PlotdataArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Replay log the run was fed
    #[arg(long)]
    log: Option<PathBuf>,
    /// Response CSVs
    #[arg(long = "responses", num_args = 1..)]
    responses: Vec<PathBuf>,
    /// Probe CSV
    #[arg(long)]
    probe: Option<PathBuf>,
    /// Feed rate the run used; log offsets are compressed by this factor
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Bin width in ticks
    #[arg(long, default_value_t = 10)]
    bin_ticks: u64,
    /// Tick duration in microseconds
    #[arg(long, default_value_t = 100_000)]
    tick_us: u64,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(cli.command) {
        eprintln!("tissue: {}", e.message());
        std::process::exit(e.code());
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Serve(args) => cmd_serve(args),
        Command::Replay(args) => cmd_replay(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::RunTwocell(args) => cmd_run_twocell(args),
        Command::NaivePolicy(args) => cmd_naive_policy(args),
        Command::MergePolicy(args) => cmd_merge_policy(args),
        Command::Stats(args) => cmd_stats(args),
        Command::EvalPolicy(args) => cmd_eval_policy(args),
        Command::Plotdata(args) => cmd_plotdata(args),
    }
}

fn load_config(path: Option<&Path>, signal: bool, seed: u64) -> Result<TwocellConfig, CliError> {
    let mut config = match path {
        Some(p) => TwocellConfig::from_file(p).map_err(data)?,
        None => TwocellConfig::default(),
    };
    if signal {
        config.signal_enabled = true;
    }
    config.tissue.rng_seed = seed;
    Ok(config)
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let config = load_config(args.config.as_deref(), args.signal, args.seed)?;
    let mut engine = build_engine(&config).map_err(data)?;
    engine.set_response_logging(true);
    let addr = resolve_addr(args.addr.as_deref());
    let server = serve(addr.as_str(), ServerHandles::from_engine(&engine)).map_err(runtime)?;
    println!("listening on {}", server.local_addr());
    let duration = args.duration.map(Duration::from_secs_f64);
    let mut probe = args.probe_out.is_some().then(default_probe);
    let result = engine.run_realtime(duration, probe.as_mut(), None);
    server.shutdown();
    if args.debug_counters {
        println!("{}", engine.counters());
        println!("dropped signals: {}", engine.dropped_signals());
    }
    if let Some(path) = &args.responses_out {
        atomic_write(path, format_responses_csv(engine.responses())).map_err(runtime)?;
    }
    if let (Some(path), Some(probe)) = (&args.probe_out, &probe) {
        atomic_write(path, probe.csv()).map_err(runtime)?;
    }
    println!(
        "ran {} ticks, {} responses",
        engine.tick_count(),
        engine.responses().len()
    );
    result.map_err(runtime)
}

fn load_events(
    log: &Path,
    strace: bool,
    map: Option<&Path>,
    synth_gap: u64,
) -> Result<Vec<tissue::replay::ReplayEvent>, CliError> {
    if strace {
        let owned;
        let map = match map {
            Some(p) => {
                owned = NameMap::load(p).map_err(data)?;
                &owned
            }
            None => NameMap::builtin(),
        };
        let report = load_strace_log(log, map, synth_gap).map_err(data)?;
        if report.skipped_lines > 0 {
            eprintln!("skipped {} non-syscall lines", report.skipped_lines);
        }
        for (name, count) in &report.skipped_names {
            eprintln!("skipped unmapped syscall {name} ({count} calls)");
        }
        Ok(report.events)
    } else {
        load_replay_log(log).map_err(data)
    }
}

fn cmd_replay(args: ReplayArgs) -> Result<(), CliError> {
    if !(args.rate > 0.0) {
        return Err(usage("--rate must be positive"));
    }
    let events = load_events(&args.log, args.strace, args.map.as_deref(), args.synth_gap)?;
    let addr = resolve_addr(args.addr.as_deref());
    let summary = replay_to_server(&events, args.rate, &addr).map_err(runtime)?;
    println!(
        "sent {} events in {:.3}s",
        summary.sent,
        summary.elapsed.as_secs_f64()
    );
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut spec = ScenarioSpec::for_label(args.label.into(), args.seed);
    if let Some(events) = args.events {
        spec.events = events;
    }
    if let Some(span_s) = args.span_s {
        spec.event_span_us = span_s * 1_000_000;
    }
    let dataset = harness::generate_dataset(&spec).map_err(data)?;
    let (log, labels) = harness::write_dataset(&dataset, &args.out).map_err(runtime)?;
    println!("wrote {} ({} events)", log.display(), dataset.events.len());
    println!("wrote {} ({} labels)", labels.display(), dataset.labels.len());
    Ok(())
}

fn cmd_run_twocell(args: RunTwocellArgs) -> Result<(), CliError> {
    if !(args.rate > 0.0) {
        return Err(usage("--rate must be positive"));
    }
    if args.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let config = load_config(args.config.as_deref(), args.signal, args.seed)?;
    let events = load_replay_log(&args.log).map_err(data)?;
    let mut plan = ExperimentPlan::new(config, events);
    plan.repeats = args.repeats;
    plan.rate = args.rate;
    plan.tail_ticks = args.tail_ticks;
    plan.base_seed = args.seed;
    plan.with_probe = !args.no_probe;
    plan.realtime = args.realtime;
    let outputs = run_experiment(&plan);
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let names = NameMap::builtin();
    let mut failures = Vec::new();
    for (i, output) in outputs.iter().enumerate() {
        if let Some(message) = &output.error {
            eprintln!("run {i:02} (seed {}): {message}", output.seed);
            failures.push(i);
            continue;
        }
        let base = args.out.join(format!("run_{i:02}"));
        atomic_write(
            base.with_extension("responses.csv"),
            format_responses_csv(&output.responses),
        )
        .map_err(runtime)?;
        if plan.with_probe {
            atomic_write(base.with_extension("probe.csv"), samples_to_csv(&output.probe))
                .map_err(runtime)?;
        }
        atomic_write(
            base.with_extension("policy"),
            format_policy(&output.policy, Some(names)),
        )
        .map_err(runtime)?;
        println!(
            "run {i:02} (seed {}): {} ticks, {} responses, {} permitted syscalls",
            output.seed,
            output.ticks,
            output.responses.len(),
            output.policy.len()
        );
        for (tick, message) in &output.probe_errors {
            eprintln!("run {i:02}: probe failed at tick {tick}: {message}");
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("{} of {} runs failed", failures.len(), outputs.len())))
    }
}

fn cmd_naive_policy(args: NaivePolicyArgs) -> Result<(), CliError> {
    let mut traces = Vec::new();
    for log in &args.logs {
        let events = load_replay_log(log).map_err(data)?;
        traces.push(
            events
                .iter()
                .filter_map(|e| match e.kind {
                    EventKind::Antigen(value) => Some(value),
                    EventKind::Signal { .. } => None,
                })
                .collect::<Vec<u32>>(),
        );
    }
    let policy = naive_policy(&traces);
    atomic_write(&args.out, format_policy(&policy, Some(NameMap::builtin())))
        .map_err(runtime)?;
    println!(
        "wrote {} ({} permitted syscalls)",
        args.out.display(),
        policy.len()
    );
    Ok(())
}

fn cmd_merge_policy(args: MergePolicyArgs) -> Result<(), CliError> {
    let mut policies = Vec::new();
    for path in &args.policies {
        policies.push(load_policy(path).map_err(data)?);
    }
    let merged = merge_policies(&policies).map_err(data)?;
    atomic_write(&args.out, format_policy(&merged, Some(NameMap::builtin())))
        .map_err(runtime)?;
    println!(
        "wrote {} ({} permitted syscalls)",
        args.out.display(),
        merged.len()
    );
    Ok(())
}

fn antigen_counts(log: &Path) -> Result<std::collections::BTreeMap<u32, u64>, CliError> {
    let events = load_replay_log(log).map_err(data)?;
    let mut counts = std::collections::BTreeMap::new();
    for e in &events {
        if let EventKind::Antigen(value) = e.kind {
            *counts.entry(value).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let mut runs = Vec::new();
    for path in &args.responses {
        runs.push(harness::load_responses_csv(path).map_err(data)?);
    }
    let freqs = match &args.log {
        Some(log) => antigen_counts(log)?,
        None => Default::default(),
    };
    let stats = response_stats(&runs);
    let names = NameMap::builtin();
    let mut rows: Vec<(u32, u64, tissue::policy::SyscallStats)> = stats
        .into_iter()
        .map(|(syscall, s)| (syscall, freqs.get(&syscall).copied().unwrap_or(0), s))
        .collect();
    rows.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| b.2.mean.total_cmp(&a.2.mean))
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut out = String::from("syscall,name,freq,mean,sd,cv\n");
    for (syscall, freq, s) in &rows {
        let name = names.name(*syscall).unwrap_or("");
        let cv = s.cv.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{syscall},{name},{freq},{:.2},{:.2},{cv}\n",
            s.mean, s.sd
        ));
    }
    write_out(args.out.as_deref(), &out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_eval_policy(args: EvalPolicyArgs) -> Result<(), CliError> {
    let mut policies: Vec<(String, Policy)> = Vec::new();
    for path in &args.policies {
        policies.push((file_stem(path), load_policy(path).map_err(data)?));
    }
    let mut rows = Vec::new();
    for labels in &args.labels {
        let trace = LabeledTrace::load(labels).map_err(data)?;
        for (name, policy) in &policies {
            let report = evaluate_policy(policy, &trace).map_err(data)?;
            rows.push(EvalRow {
                dataset: trace.source.clone(),
                policy: name.clone(),
                report,
            });
        }
    }
    write_out(args.out.as_deref(), &format_eval_report(&rows))
}

fn cmd_plotdata(args: PlotdataArgs) -> Result<(), CliError> {
    if args.bin_ticks == 0 || args.tick_us == 0 {
        return Err(usage("--bin-ticks and --tick-us must be positive"));
    }
    let text = match args.kind {
        PlotKind::ResponseRate => plot_response_rate(&args)?,
        PlotKind::VrLocks => plot_vr_locks(&args)?,
        PlotKind::MeanResponseRate => plot_mean_response_rate(&args)?,
    };
    write_out(args.out.as_deref(), &text)
}

fn plot_response_rate(args: &PlotdataArgs) -> Result<String, CliError> {
    if !(args.rate > 0.0) {
        return Err(usage("--rate must be positive"));
    }
    let log = args
        .log
        .as_deref()
        .ok_or_else(|| usage("response-rate needs --log"))?;
    let [responses_path] = args.responses.as_slice() else {
        return Err(usage("response-rate needs exactly one --responses file"));
    };
    let events = load_replay_log(log).map_err(data)?;
    let input_times: Vec<u64> = events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::Antigen(_) => Some((e.offset_us as f64 / args.rate) as u64),
            EventKind::Signal { .. } => None,
        })
        .collect();
    let responses = harness::load_responses_csv(responses_path).map_err(data)?;
    let response_times: Vec<u64> = responses.iter().map(|r| r.tick * args.tick_us).collect();
    let bin_us = args.bin_ticks * args.tick_us;
    let last = input_times
        .iter()
        .chain(&response_times)
        .max()
        .copied()
        .unwrap_or(0);
    let bins = (last / bin_us + 1) as usize;
    let input_rate = rate_series(&input_times, bin_us, bins);
    let response_rate = rate_series(&response_times, bin_us, bins);
    let mut out = String::from("bin_start_tick,input_rate,response_rate\n");
    for (i, (ir, rr)) in input_rate.iter().zip(&response_rate).enumerate() {
        out.push_str(&format!("{},{ir},{rr}\n", i as u64 * args.bin_ticks));
    }
    Ok(out)
}

fn plot_vr_locks(args: &PlotdataArgs) -> Result<String, CliError> {
    let probe = args
        .probe
        .as_deref()
        .ok_or_else(|| usage("vr-locks needs --probe"))?;
    let text = std::fs::read_to_string(probe).map_err(data)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| data("empty probe file"))?;
    let column = header
        .split(',')
        .position(|name| name == "vr_locks")
        .ok_or_else(|| data("probe file has no vr_locks column"))?;
    let mut out = String::from("tick,wall_us,receptor,lock\n");
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= column || fields.len() < 2 {
            return Err(data(format!("probe line {} is short", idx + 2)));
        }
        let (tick, wall_us) = (fields[0], fields[1]);
        for (receptor, lock) in fields[column].split_whitespace().enumerate() {
            out.push_str(&format!("{tick},{wall_us},{receptor},{lock}\n"));
        }
    }
    Ok(out)
}

fn plot_mean_response_rate(args: &PlotdataArgs) -> Result<String, CliError> {
    if args.responses.is_empty() {
        return Err(usage("mean-response-rate needs --responses"));
    }
    let bin_us = args.bin_ticks * args.tick_us;
    let mut per_run_times = Vec::new();
    let mut last = 0u64;
    for path in &args.responses {
        let responses = harness::load_responses_csv(path).map_err(data)?;
        let times: Vec<u64> = responses.iter().map(|r| r.tick * args.tick_us).collect();
        last = last.max(times.iter().max().copied().unwrap_or(0));
        per_run_times.push(times);
    }
    let bins = (last / bin_us + 1) as usize;
    let mut mean = vec![0.0f64; bins];
    for times in &per_run_times {
        for (bin, rate) in rate_series(times, bin_us, bins).iter().enumerate() {
            mean[bin] += rate;
        }
    }
    let runs = per_run_times.len() as f64;
    let mut out = String::from("bin_start_tick,mean_rate\n");
    for (i, total) in mean.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i as u64 * args.bin_ticks, total / runs));
    }
    Ok(out)
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            atomic_write(path, text).map_err(runtime)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
