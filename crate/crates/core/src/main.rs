use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use tunnelprof::harness::{self, HarnessError, ScenarioConfig, ScenarioRun};
use tunnelprof::nodes::Role;
use tunnelprof::profiler::{write_stats_csv, ClockKind};
use tunnelprof::report::{self, emit_goodput_table, emit_relative_table};
use tunnelprof::transport::TransportKind;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;

#[derive(Parser)]
#[command(name = "tunnelprof", version, about = "Profile an onion-routing tunnel across hop counts")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep hop counts and write profiles, tables and goodput.
    Run(RunArgs),
    /// Execute a timed scenario file.
    Scenario {
        file: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Multiplier for command offsets; 0 runs commands back to back.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    hops: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    circuits: usize,
    #[arg(long, default_value_t = 1024)]
    payload_bytes: usize,
    /// Bytes streamed through each circuit.
    #[arg(long, default_value_t = harness::DEFAULT_TOTAL_BYTES)]
    total_bytes: u64,
    #[arg(long, default_value = "inproc")]
    transport: TransportKind,
    #[arg(long, default_value = "cpu")]
    clock: ClockKind,
    #[arg(long)]
    pipelined: bool,
    #[arg(long, default_value_t = tunnelprof::nodes::DEFAULT_QUEUE_CAPACITY)]
    queue_capacity: usize,
    #[arg(long)]
    deterministic_keys: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    #[arg(long)]
    cached_codec: bool,
    /// Interleave packets across circuits.
    #[arg(long)]
    concurrent: bool,
    /// Run every node on its own thread.
    #[arg(long)]
    threaded: bool,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> ScenarioConfig {
        ScenarioConfig {
            hop_counts: self.hops.clone(),
            circuits: self.circuits,
            payload_bytes: self.payload_bytes,
            total_bytes_per_run: self.total_bytes,
            transport: self.transport,
            clock: self.clock,
            pipelined: self.pipelined,
            queue_capacity: self.queue_capacity,
            deterministic_keys: self.deterministic_keys,
            rng_seed: self.seed,
            link_latency: Duration::from_millis(self.latency_ms),
            cached_codec: self.cached_codec,
            concurrent_circuits: self.concurrent,
            threaded: self.threaded,
            synthetic: None,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Cmd::Run(args) => run(&args),
        Cmd::Scenario { file, out, time_scale } => scenario(&file, &out, time_scale),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("tunnelprof: {e}");
            ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUN })
        }
    }
}

fn run(args: &RunArgs) -> Result<u8, HarnessError> {
    let config = args.config();
    let result = harness::run_scenario(&config)?;
    let files = report::write_report(&result, &args.out).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;

    println!("{}", emit_goodput_table(&result));
    for role in [Role::Seed, Role::Relay, Role::Exit] {
        let cols: Vec<usize> = result
            .hops
            .iter()
            .filter(|h| h.roles.contains_key(&role) && h.error.is_none())
            .map(|h| h.hops)
            .collect();
        if let Ok(table) = emit_relative_table(&result, role, &cols) {
            println!("{table}");
        }
    }
    for hop in &result.hops {
        if let Some(e) = &hop.error {
            eprintln!("tunnelprof: {} hops: {e}", hop.hops);
        }
    }
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(if result.failed() { EXIT_RUN } else { 0 })
}

fn scenario(file: &Path, out: &Path, time_scale: f64) -> Result<u8, HarnessError> {
    let (config, commands) = harness::parse_scenario_file(file).map_err(|e| match e {
        HarnessError::Scenario(p) => HarnessError::Config(format!("{}:{}:{}: {}", file.display(), p.line, p.column, p.message)),
        other => other,
    })?;
    let run = harness::run_commands(&config, &commands, time_scale)?;
    write_scenario(&run, out)?;
    println!(
        "{} commands, {} circuits, {} of {} bytes delivered, {} drops",
        run.commands.len(),
        run.circuits_built,
        run.bytes_delivered,
        run.bytes_sent,
        run.drops.total()
    );
    println!("wrote results to {}", out.display());
    Ok(0)
}

fn write_scenario(run: &ScenarioRun, out: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(run).map_err(std::io::Error::other)?;
    std::fs::write(out.join("scenario.json"), json + "\n")?;
    let taxonomy = run.config.taxonomy();
    for snap in &run.snapshots {
        for (role, profile) in &snap.roles {
            let mut buf = Vec::new();
            write_stats_csv(&mut buf, &profile.stats, &taxonomy).map_err(std::io::Error::other)?;
            std::fs::write(out.join(format!("stats_{}_{}.csv", snap.label, role)), buf)?;
        }
    }
    Ok(())
}
