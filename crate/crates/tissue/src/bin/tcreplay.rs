//! Replay client: feeds a recorded antigen/signal log (or strace
//! output) to a tissue server at a configurable rate.

use std::path::PathBuf;

use clap::Parser;

use tissue::net::resolve_addr;
use tissue::replay::{load_replay_log, load_strace_log, replay_to_server, NameMap};

#[derive(Parser)]
#[command(name = "tcreplay", version, about = "Replay a recorded log to a tissue server")]
struct Cli {
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

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err((code, message)) = run(cli) {
        eprintln!("tcreplay: {message}");
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<(), (i32, String)> {
    if !(cli.rate > 0.0) {
        return Err((1, "--rate must be positive".into()));
    }
    let events = if cli.strace {
        let owned;
        let map = match &cli.map {
            Some(path) => {
                owned = NameMap::load(path).map_err(|e| (2, e.to_string()))?;
                &owned
            }
            None => NameMap::builtin(),
        };
        let report =
            load_strace_log(&cli.log, map, cli.synth_gap).map_err(|e| (2, e.to_string()))?;
        if report.skipped_lines > 0 {
            eprintln!("skipped {} non-syscall lines", report.skipped_lines);
        }
        for (name, count) in &report.skipped_names {
            eprintln!("skipped unmapped syscall {name} ({count} calls)");
        }
        report.events
    } else {
        load_replay_log(&cli.log).map_err(|e| (2, e.to_string()))?
    };
    let addr = resolve_addr(cli.addr.as_deref());
    let summary = replay_to_server(&events, cli.rate, &addr).map_err(|e| (3, e.to_string()))?;
    println!(
        "sent {} events in {:.3}s",
        summary.sent,
        summary.elapsed.as_secs_f64()
    );
    Ok(())
}
