//! Timed scenario files.
//!
//! ```text
//! # comment
//! set payload_bytes 512
//! @0 build_circuits 4 3
//! @1 send 1048576
//! @4.5 snapshot after-send
//! @5 destroy_all
//! ```
//!
//! `send` streams the given number of bytes through every live circuit.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::nodes::{Role, MAX_HOPS};
use crate::profiler::ClockKind;
use crate::transport::TransportKind;

use super::{DropCounters, HarnessError, RoleProfile, ScenarioConfig, Testbed};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    BuildCircuits { count: usize, hops: usize },
    Send { bytes: u64 },
    DestroyAll,
    Snapshot { label: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    pub offset_seconds: f64,
    pub line: usize,
    #[serde(flatten)]
    pub command: Command,
}

/// Whitespace-separated tokens with their 1-based columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out.into_iter()
        .map(|(byte, t)| (line[..byte].chars().count() + 1, t))
        .collect()
}

pub fn parse_scenario(text: &str) -> Result<(ScenarioConfig, Vec<TimedCommand>), ScenarioParseError> {
    let mut config = ScenarioConfig::default();
    let mut commands = Vec::new();
    let mut last_offset = 0.0f64;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks = tokens(content);
        let Some(&(col, head)) = toks.first() else {
            continue;
        };
        let err = |column: usize, message: String| ScenarioParseError { line, column, message };
        let end_col = raw.chars().count() + 1;
        let arg = |i: usize, what: &str| -> Result<(usize, &str), ScenarioParseError> {
            toks.get(i)
                .copied()
                .ok_or_else(|| err(end_col, format!("missing {what}")))
        };
        let expect_len = |n: usize| -> Result<(), ScenarioParseError> {
            match toks.get(n) {
                Some(&(c, t)) => Err(err(c, format!("unexpected argument `{t}`"))),
                None => Ok(()),
            }
        };

        if head == "set" {
            let (kc, key) = arg(1, "setting name")?;
            let (vc, value) = arg(2, "setting value")?;
            expect_len(3)?;
            apply_setting(&mut config, key, value).map_err(|m| {
                let column = if m.starts_with("unknown setting") { kc } else { vc };
                err(column, m)
            })?;
            continue;
        }

        let Some(offset_text) = head.strip_prefix('@') else {
            return Err(err(col, format!("expected `@<offset>` or `set`, found `{head}`")));
        };
        let offset: f64 = offset_text
            .parse()
            .ok()
            .filter(|o: &f64| o.is_finite() && *o >= 0.0)
            .ok_or_else(|| err(col, format!("malformed offset `{head}`")))?;
        if offset < last_offset {
            return Err(err(col, format!("offset {offset} is earlier than the previous command")));
        }
        last_offset = offset;

        let (cc, name) = arg(1, "command")?;
        let number = |i: usize, what: &str| -> Result<u64, ScenarioParseError> {
            let (c, t) = arg(i, what)?;
            t.parse().map_err(|_| err(c, format!("malformed {what} `{t}`")))
        };
        let command = match name {
            "build_circuits" => {
                let count = number(2, "circuit count")? as usize;
                let hops = number(3, "hop count")? as usize;
                expect_len(4)?;
                if count == 0 {
                    return Err(err(arg(2, "")?.0, "circuit count must be at least 1".into()));
                }
                if hops > MAX_HOPS {
                    return Err(err(arg(3, "")?.0, format!("hop count must be at most {MAX_HOPS}")));
                }
                Command::BuildCircuits { count, hops }
            }
            "send" => {
                let bytes = number(2, "byte count")?;
                expect_len(3)?;
                Command::Send { bytes }
            }
            "destroy_all" => {
                expect_len(2)?;
                Command::DestroyAll
            }
            "snapshot" => {
                let (_, label) = arg(2, "snapshot label")?;
                expect_len(3)?;
                Command::Snapshot { label: label.to_string() }
            }
            other => return Err(err(cc, format!("unknown command `{other}`"))),
        };
        commands.push(TimedCommand {
            offset_seconds: offset,
            line,
            command,
        });
    }
    config.hop_counts = {
        let mut hops: Vec<usize> = commands
            .iter()
            .filter_map(|c| match c.command {
                Command::BuildCircuits { hops, .. } => Some(hops),
                _ => None,
            })
            .collect();
        hops.sort_unstable();
        hops.dedup();
        if hops.is_empty() {
            ScenarioConfig::default().hop_counts
        } else {
            hops
        }
    };
    Ok((config, commands))
}

fn apply_setting(config: &mut ScenarioConfig, key: &str, value: &str) -> Result<(), String> {
    fn parse<T: std::str::FromStr>(value: &str) -> Result<T, String> {
        value.parse().map_err(|_| format!("malformed value `{value}`"))
    }
    match key {
        "payload_bytes" => config.payload_bytes = parse(value)?,
        "queue_capacity" => config.queue_capacity = parse(value)?,
        "seed" => config.rng_seed = parse(value)?,
        "latency_ms" => config.link_latency = Duration::from_millis(parse(value)?),
        "pipelined" => config.pipelined = parse(value)?,
        "deterministic_keys" => config.deterministic_keys = parse(value)?,
        "cached_codec" => config.cached_codec = parse(value)?,
        "threaded" => config.threaded = parse(value)?,
        "clock" => config.clock = value.parse::<ClockKind>().map_err(|e| e.to_string())?,
        "transport" => config.transport = value.parse::<TransportKind>()?,
        other => return Err(format!("unknown setting `{other}`")),
    }
    Ok(())
}

pub fn parse_scenario_file(
    path: impl AsRef<Path>,
) -> Result<(ScenarioConfig, Vec<TimedCommand>), HarnessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_scenario(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSnapshot {
    pub label: String,
    pub offset_seconds: f64,
    pub roles: BTreeMap<Role, RoleProfile>,
    pub bytes_delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub commands: Vec<TimedCommand>,
    /// Taken at each `snapshot` command and once more at the end, as `final`.
    pub snapshots: Vec<ScenarioSnapshot>,
    pub circuits_built: usize,
    pub bytes_sent: u64,
    pub bytes_delivered: u64,
    pub drops: DropCounters,
    pub leftover_table_entries: usize,
    pub wall_seconds: f64,
}

/// Executes `commands` on a fresh network. Offsets are multiplied by
/// `time_scale`; 0 runs everything back to back.
pub fn run_commands(
    config: &ScenarioConfig,
    commands: &[TimedCommand],
    time_scale: f64,
) -> Result<ScenarioRun, HarnessError> {
    let mut check = config.clone();
    check.hop_counts = vec![0];
    check.validate()?;
    let taxonomy = config.taxonomy();
    let started = Instant::now();
    let mut bed = Testbed::new(config)?;
    bed.start_profiling(config.clock);
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed);
    let mut buf = vec![0u8; config.payload_bytes];
    let mut live: Vec<(u32, usize)> = Vec::new();
    let mut snapshots = Vec::new();
    let mut built = 0;
    let mut sent = 0u64;

    let delivered = |bed: &Testbed| {
        let (sink, local) = bed.delivered();
        sink.bytes_received + local.bytes_received
    };
    let fail = |hops: usize, source| HarnessError::Run { hops, source };

    for tc in commands {
        let due = started + Duration::from_secs_f64(tc.offset_seconds * time_scale.max(0.0));
        while Instant::now() < due {
            bed.pump();
            std::thread::sleep(due.saturating_duration_since(Instant::now()).min(Duration::from_millis(1)));
        }
        match &tc.command {
            Command::BuildCircuits { count, hops } => {
                for _ in 0..*count {
                    let id = bed.build_circuit(*hops).map_err(|e| fail(*hops, e))?;
                    live.push((id, *hops));
                    built += 1;
                }
            }
            Command::Send { bytes } => {
                for &(id, hops) in &live {
                    let mut remaining = *bytes;
                    while remaining > 0 {
                        let len = remaining.min(config.payload_bytes as u64) as usize;
                        rng.fill_bytes(&mut buf[..len]);
                        bed.seed.send(id, &buf[..len]).map_err(|e| fail(hops, e))?;
                        remaining -= len as u64;
                        sent += len as u64;
                        bed.pump();
                    }
                }
                bed.settle().map_err(|e| fail(0, e))?;
            }
            Command::DestroyAll => {
                for (id, hops) in live.drain(..) {
                    bed.seed.destroy_circuit(id).map_err(|e| fail(hops, e))?;
                }
                bed.settle().map_err(|e| fail(0, e))?;
            }
            Command::Snapshot { label } => {
                bed.settle().map_err(|e| fail(0, e))?;
                snapshots.push(ScenarioSnapshot {
                    label: label.clone(),
                    offset_seconds: started.elapsed().as_secs_f64(),
                    roles: bed.role_profiles(&Role::ALL, &taxonomy),
                    bytes_delivered: delivered(&bed),
                });
            }
        }
    }
    bed.settle().map_err(|e| fail(0, e))?;
    bed.stop_profiling();
    snapshots.push(ScenarioSnapshot {
        label: "final".into(),
        offset_seconds: started.elapsed().as_secs_f64(),
        roles: bed.role_profiles(&Role::ALL, &taxonomy),
        bytes_delivered: delivered(&bed),
    });
    let bytes_delivered = delivered(&bed);
    let teardown = bed.finish();
    let relay = teardown.relay_counters();
    Ok(ScenarioRun {
        config: config.clone(),
        commands: commands.to_vec(),
        snapshots,
        circuits_built: built,
        bytes_sent: sent,
        bytes_delivered,
        drops: DropCounters {
            transport: teardown.transport_dropped,
            unknown_circuit: relay.unknown_circuit,
            auth_failures: relay.auth_failures,
            malformed: relay.malformed,
            pipeline: teardown.seed.pipeline_send_errors(),
        },
        leftover_table_entries: teardown.table_entries(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_commands() {
        let (_, cmds) = parse_scenario("@0 build_circuits 4 3\n@1 send 1048576\n@5 destroy_all").unwrap();
        let offsets: Vec<f64> = cmds.iter().map(|c| c.offset_seconds).collect();
        assert_eq!(offsets, [0.0, 1.0, 5.0]);
        assert_eq!(cmds[0].command, Command::BuildCircuits { count: 4, hops: 3 });
        assert_eq!(cmds[1].command, Command::Send { bytes: 1_048_576 });
        assert_eq!(cmds[2].command, Command::DestroyAll);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let (config, cmds) = parse_scenario("").unwrap();
        assert!(cmds.is_empty());
        assert_eq!(config, ScenarioConfig::default());
    }

    #[test]
    fn bad_offset_reports_position() {
        let e = parse_scenario("@x send 10").unwrap_err();
        assert_eq!((e.line, e.column), (1, 1));
        let e = parse_scenario("# header\n\n  @1 send 10\n  @2 teleport").unwrap_err();
        assert_eq!((e.line, e.column), (4, 6));
        assert!(e.message.contains("teleport"));
        let e = parse_scenario("@1 send ten").unwrap_err();
        assert_eq!((e.line, e.column), (1, 9));
        let e = parse_scenario("@1 send").unwrap_err();
        assert_eq!((e.line, e.column), (1, 8));
        let e = parse_scenario("@2 send 1\n@1 send 1").unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_scenario("@0 build_circuits 1 4").unwrap_err();
        assert_eq!((e.line, e.column), (1, 21));
        let e = parse_scenario("@0 destroy_all now").unwrap_err();
        assert_eq!((e.line, e.column), (1, 16));
    }

    #[test]
    fn settings_and_comments() {
        let (config, cmds) = parse_scenario(
            "set payload_bytes 512 # smaller cells\nset clock wall\nset pipelined true\n@0.5 snapshot start\n",
        )
        .unwrap();
        assert_eq!(config.payload_bytes, 512);
        assert_eq!(config.clock, ClockKind::Wall);
        assert!(config.pipelined);
        assert_eq!(cmds[0].command, Command::Snapshot { label: "start".into() });
        let e = parse_scenario("set colour blue").unwrap_err();
        assert_eq!(e.column, 5);
        let e = parse_scenario("set clock sundial").unwrap_err();
        assert_eq!(e.column, 11);
    }

    #[test]
    fn executes_back_to_back() {
        let text = "set deterministic_keys true\n@0 build_circuits 2 2\n@0 build_circuits 1 0\n@1 send 10000\n@2 snapshot mid\n@3 destroy_all\n";
        let (config, cmds) = parse_scenario(text).unwrap();
        assert_eq!(config.hop_counts, [0, 2]);
        let run = run_commands(&config, &cmds, 0.0).unwrap();
        assert_eq!(run.circuits_built, 3);
        assert_eq!(run.bytes_sent, 30_000);
        assert_eq!(run.bytes_delivered, 30_000);
        assert_eq!(run.drops.total(), 0);
        assert_eq!(run.leftover_table_entries, 0);
        let labels: Vec<&str> = run.snapshots.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["mid", "final"]);
        assert!(run.snapshots[0].roles[&Role::Exit].ncalls("relay_packet") > 0);
    }
}
