//! Headless runs and log replay.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::SimConfig;
use super::kernel::Kernel;
use super::log::{read_lines, write_records, EventRecord};
use super::protocol::Command;
use super::scenario::Scenario;
use super::GatewayError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GatewayError + '_ {
    move |source| GatewayError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads and validates a scenario file; returns the raw document too.
pub fn load_scenario(path: &Path) -> Result<(Value, Scenario), GatewayError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let scenario = Scenario::parse(&text)?;
    let doc: Value = serde_json::from_str(&text).expect("parsed above");
    Ok((doc, scenario))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: PathBuf,
    /// Overrides the scenario's own seed.
    pub seed: Option<u64>,
    pub ticks: u64,
    pub log: PathBuf,
    /// Override file; `None` consults `CISRU_SIM_CONFIG`.
    pub config_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub ticks: u64,
    pub records: usize,
    pub all_goals_terminal: bool,
}

/// Builds a kernel for `ticks` ticks of a scenario file.
pub fn kernel_for(opts: &RunOptions) -> Result<Kernel, GatewayError> {
    let (doc, scenario) = load_scenario(&opts.scenario)?;
    let config = match &opts.config_file {
        Some(p) => SimConfig::resolve(&scenario.config, Some(p))?,
        None => SimConfig::from_env(&scenario.config)?,
    };
    let seed = opts.seed.unwrap_or(scenario.seed);
    let meta = json!({
        "scenario_path": opts.scenario.display().to_string(),
        "ticks": opts.ticks,
    });
    Kernel::new(doc, config, seed, meta)
}

/// Runs exactly `ticks` ticks and writes the log. With zero ticks the log
/// holds only the header.
pub fn run_headless(opts: &RunOptions) -> Result<RunSummary, GatewayError> {
    let mut kernel = kernel_for(opts)?;
    let file = File::create(&opts.log).map_err(io_err(&opts.log))?;
    let mut w = BufWriter::new(file);
    let mut records = 0;
    let mut flush = |k: &mut Kernel, w: &mut BufWriter<File>| -> Result<(), GatewayError> {
        let batch = k.take_events();
        records += batch.len();
        write_records(w, &batch).map_err(io_err(&opts.log))
    };
    flush(&mut kernel, &mut w)?;
    if opts.ticks > 0 {
        for _ in 0..opts.ticks {
            kernel.step()?;
            flush(&mut kernel, &mut w)?;
        }
        kernel.finish();
        flush(&mut kernel, &mut w)?;
    }
    w.flush().map_err(io_err(&opts.log))?;
    Ok(RunSummary {
        ticks: opts.ticks,
        records,
        all_goals_terminal: kernel.external_goals_terminal(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayReport {
    Identical {
        records: usize,
    },
    /// First differing line (1-based). `None` means that side ended.
    Diverged {
        line: usize,
        expected: Option<String>,
        actual: Option<String>,
    },
}

/// Rebuilds the kernel described by a log header.
pub fn kernel_from_header(header: &str) -> Result<(Kernel, Value), GatewayError> {
    let corrupt = |m: &str| GatewayError::LogCorrupt(m.to_string());
    let rec: EventRecord =
        serde_json::from_str(header).map_err(|e| corrupt(&format!("header: {e}")))?;
    if rec.tick != 0 || rec.seq != 0 || rec.kind != "ScenarioLoaded" {
        return Err(corrupt("first record is not ScenarioLoaded"));
    }
    let p = &rec.payload;
    let doc = p
        .get("scenario")
        .cloned()
        .ok_or_else(|| corrupt("header lacks the scenario"))?;
    let seed = p
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| corrupt("header lacks the seed"))?;
    let config = p
        .get("config")
        .ok_or_else(|| corrupt("header lacks the config"))?;
    let config = SimConfig::layered(&[config]).map_err(|e| corrupt(&e.to_string()))?;
    let meta = p.get("meta").cloned().unwrap_or(Value::Null);
    let kernel =
        Kernel::new(doc, config, seed, meta.clone()).map_err(|e| corrupt(&e.to_string()))?;
    Ok((kernel, meta))
}

/// Operator commands recorded in a log, by tick, in log order.
fn console_commands(lines: &[String]) -> Vec<(u64, Command)> {
    lines
        .iter()
        .filter_map(|l| serde_json::from_str::<EventRecord>(l).ok())
        .filter(|r| {
            r.source == "console" && matches!(r.kind.as_str(), "CommandApplied" | "CommandRejected")
        })
        .filter_map(|r| {
            let c = serde_json::from_value(r.payload.get("command")?.clone()).ok()?;
            Some((r.tick, c))
        })
        .collect()
}

/// Regenerates the records of a logged run and compares them line by line
/// with the file. Operator commands found in the log are fed back at the
/// tick they were applied.
pub fn replay_lines(lines: &[String]) -> Result<ReplayReport, GatewayError> {
    let header = lines
        .first()
        .ok_or_else(|| GatewayError::LogCorrupt("empty log".into()))?;
    let (mut kernel, meta) = kernel_from_header(header)?;
    let commands = console_commands(lines);
    let run_end = lines.iter().rev().find_map(|l| {
        let r: EventRecord = serde_json::from_str(l).ok()?;
        (r.kind == "RunEnd").then(|| r.payload.get("ticks").and_then(Value::as_u64))?
    });
    let ticks = run_end
        .or_else(|| meta.get("ticks").and_then(Value::as_u64))
        .unwrap_or_else(|| {
            // A session that was stopped: everything up to its last tick.
            lines
                .iter()
                .filter_map(|l| serde_json::from_str::<EventRecord>(l).ok())
                .map(|r| r.tick + 1)
                .max()
                .unwrap_or(0)
        });
    let mut produced: Vec<String> = Vec::new();
    let mut drain =
        |k: &mut Kernel| produced.extend(k.take_events().iter().map(EventRecord::to_line));
    drain(&mut kernel);
    let mut pending = commands.into_iter().peekable();
    for t in 0..ticks {
        while let Some((_, c)) = pending.next_if(|(tick, _)| *tick == t) {
            let _ = kernel.apply_command(&c, "console");
        }
        kernel.step()?;
        drain(&mut kernel);
    }
    // Commands that arrived after the last step of a session.
    for (_, c) in pending {
        let _ = kernel.apply_command(&c, "console");
    }
    drain(&mut kernel);
    if ticks > 0 && (run_end.is_some() || meta.get("ticks").and_then(Value::as_u64).is_some()) {
        kernel.finish();
        drain(&mut kernel);
    }
    let n = lines.len().max(produced.len());
    for i in 0..n {
        let (e, a) = (lines.get(i), produced.get(i));
        if e != a {
            return Ok(ReplayReport::Diverged {
                line: i + 1,
                expected: e.cloned(),
                actual: a.cloned(),
            });
        }
    }
    Ok(ReplayReport::Identical {
        records: lines.len(),
    })
}

pub fn replay(log: &Path) -> Result<ReplayReport, GatewayError> {
    let file = File::open(log).map_err(io_err(log))?;
    let lines = read_lines(BufReader::new(file)).map_err(io_err(log))?;
    replay_lines(&lines)
}
