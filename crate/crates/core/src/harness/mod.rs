//! Experiment orchestration: hop sweeps, workload generation and goodput.

mod driver;
mod scenario;
mod testbed;

pub use driver::{DeterministicDriver, Driver, Nodes, ThreadedDriver};
pub use scenario::{
    parse_scenario, parse_scenario_file, run_commands, Command, ScenarioParseError, ScenarioRun,
    ScenarioSnapshot, TimedCommand,
};
pub use testbed::{Teardown, Testbed, EXIT_POOL, RELAY_POOL};

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nodes::{max_payload_len, CircuitError, Role, SyntheticCosts, DEFAULT_QUEUE_CAPACITY, MAX_HOPS};
use crate::profiler::{labels, CategoryBreakdown, ClockKind, FunctionStats, Taxonomy};
use crate::transport::{TransportError, TransportKind};

pub const DEFAULT_TOTAL_BYTES: u64 = 5 * 1024 * 1024;

/// Data packets sent between two passes of the deterministic scheduler.
const PUMP_EVERY: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub hop_counts: Vec<usize>,
    pub circuits: usize,
    pub payload_bytes: usize,
    /// Bytes streamed through each circuit.
    pub total_bytes_per_run: u64,
    pub transport: TransportKind,
    pub clock: ClockKind,
    pub pipelined: bool,
    pub queue_capacity: usize,
    pub deterministic_keys: bool,
    pub rng_seed: u64,
    #[serde(with = "millis")]
    pub link_latency: Duration,
    pub cached_codec: bool,
    /// Interleave packets across circuits instead of filling one at a time.
    pub concurrent_circuits: bool,
    /// One thread per node instead of a single round-robin scheduler.
    pub threaded: bool,
    pub synthetic: Option<SyntheticCosts>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            hop_counts: vec![0, 1, 2, 3],
            circuits: 4,
            payload_bytes: 1024,
            total_bytes_per_run: DEFAULT_TOTAL_BYTES,
            transport: TransportKind::Inproc,
            clock: ClockKind::Cpu,
            pipelined: false,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            deterministic_keys: false,
            rng_seed: 0,
            link_latency: Duration::ZERO,
            cached_codec: false,
            concurrent_circuits: false,
            threaded: false,
            synthetic: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.hop_counts.is_empty() {
            return bad("at least one hop count is required".into());
        }
        let mut seen = [false; MAX_HOPS + 1];
        for &h in &self.hop_counts {
            if h > MAX_HOPS {
                return bad(format!("hop count {h} is outside 0..={MAX_HOPS}"));
            }
            if std::mem::replace(&mut seen[h], true) {
                return bad(format!("hop count {h} is listed twice"));
            }
        }
        if self.circuits == 0 {
            return bad("circuits must be at least 1".into());
        }
        if self.payload_bytes == 0 {
            return bad("payload size must be at least 1 byte".into());
        }
        let max = max_payload_len(MAX_HOPS);
        if self.payload_bytes > max {
            return bad(format!("payload of {} bytes exceeds the {max}-byte cell limit", self.payload_bytes));
        }
        if self.total_bytes_per_run < self.payload_bytes as u64 {
            return bad("total bytes per run must be at least one payload".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue capacity must be at least 1".into());
        }
        if self.transport == TransportKind::Udp && !self.link_latency.is_zero() {
            return bad("link latency can only be injected on the in-process transport".into());
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Taxonomy {
        if self.synthetic.is_some() {
            Taxonomy::with_synthetic_stages()
        } else {
            Taxonomy::default()
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("transport setup failed: {0}")]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Scenario(#[from] ScenarioParseError),
    #[error("{hops}-hop run failed: {source}")]
    Run { hops: usize, source: CircuitError },
    #[error("goodput is undefined for a zero-length transfer")]
    UndefinedGoodput,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Errors caused by the input rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Transport(_) | HarnessError::Scenario(_)
        )
    }
}

/// Merged profile of every node playing one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub nodes: usize,
    pub stats: Vec<FunctionStats>,
    pub breakdown: CategoryBreakdown,
}

impl RoleProfile {
    pub fn get(&self, label: &str) -> Option<&FunctionStats> {
        self.stats.iter().find(|s| s.label == label)
    }

    pub fn ncalls(&self, label: &str) -> u64 {
        self.get(label).map_or(0, |s| s.ncalls)
    }

    pub fn exclusive_ns(&self, label: &str) -> u64 {
        self.get(label).map_or(0, |s| s.exclusive_ns)
    }

    pub fn inclusive_ns(&self, label: &str) -> u64 {
        self.get(label).map_or(0, |s| s.inclusive_ns)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounters {
    /// Datagrams the transport could not deliver.
    pub transport: u64,
    pub unknown_circuit: u64,
    pub auth_failures: u64,
    pub malformed: u64,
    /// Cells the seed's network thread failed to hand over.
    pub pipeline: u64,
}

impl DropCounters {
    pub fn total(&self) -> u64 {
        self.transport + self.unknown_circuit + self.auth_failures + self.malformed + self.pipeline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopResult {
    pub hops: usize,
    pub roles: BTreeMap<Role, RoleProfile>,
    pub circuits_built: usize,
    pub packets_sent: u64,
    pub bytes_sent: u64,
    pub packets_delivered: u64,
    pub bytes_delivered: u64,
    /// SHA-256 over the delivered payloads in arrival order.
    pub digest: String,
    /// From the first data packet to the last receipt.
    pub transfer_seconds: f64,
    pub goodput_bytes_per_second: Option<f64>,
    pub drops: DropCounters,
    /// Relay and exit table entries left after teardown.
    pub leftover_table_entries: usize,
    /// Calls of the seven tunnel functions each role should have made,
    /// derived from the packets and circuits the harness itself counted.
    pub expected_calls: BTreeMap<Role, BTreeMap<String, u64>>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

impl HopResult {
    pub fn role(&self, role: Role) -> Option<&RoleProfile> {
        self.roles.get(&role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub hops: Vec<HopResult>,
    pub wall_seconds: f64,
}

impl ScenarioResult {
    pub fn hop(&self, hops: usize) -> Option<&HopResult> {
        self.hops.iter().find(|h| h.hops == hops)
    }

    pub fn role(&self, hops: usize, role: Role) -> Option<&RoleProfile> {
        self.hop(hops)?.role(role)
    }

    pub fn failed(&self) -> bool {
        self.hops.iter().any(|h| h.error.is_some())
    }

    /// Goodput per hop count, skipping runs where it is undefined.
    pub fn goodput(&self) -> Vec<(usize, f64)> {
        self.hops
            .iter()
            .filter_map(|h| Some((h.hops, h.goodput_bytes_per_second?)))
            .collect()
    }
}

/// Roles that take part in a run with `hops` hops.
pub fn roles_for_hops(hops: usize) -> &'static [Role] {
    match hops {
        0 => &[Role::Seed],
        1 => &[Role::Seed, Role::Exit, Role::Sink],
        _ => &[Role::Seed, Role::Relay, Role::Exit, Role::Sink],
    }
}

/// Calls of the seven tunnel functions a role makes when `circuits`
/// circuits of `hops` hops carry `packets` data packets in total.
pub fn expected_tunnel_calls(role: Role, hops: usize, packets: u64, circuits: u64) -> BTreeMap<String, u64> {
    let h = hops as u64;
    let extends = circuits * h.saturating_sub(1);
    let zero_hop = u64::from(hops == 0);
    let (enc, dec, enc_addr, dec_addr, cout, send, relay) = match role {
        Role::Seed => (
            packets * h.max(1),
            packets * zero_hop,
            packets + extends,
            packets * zero_hop,
            packets,
            packets,
            0,
        ),
        Role::Relay => {
            let relayed = packets * h.saturating_sub(1);
            (0, relayed, 0, extends, 0, relayed, relayed)
        }
        Role::Exit if hops > 0 => (0, packets, 0, packets, 0, packets, packets),
        Role::Exit | Role::Sink => (0, 0, 0, 0, 0, 0, 0),
    };
    [
        (labels::ENCRYPT_STR, enc),
        (labels::DECRYPT_STR, dec),
        (labels::ENCODE_ADDRESS, enc_addr),
        (labels::DECODE_ADDRESS, dec_addr),
        (labels::CRYPTO_OUT, cout),
        (labels::SEND_PACKET, send),
        (labels::RELAY_PACKET, relay),
    ]
    .into_iter()
    .map(|(l, n)| (l.to_string(), n))
    .collect()
}

/// Bytes per second over `elapsed`.
pub fn goodput(bytes: u64, elapsed: Duration) -> Result<f64, HarnessError> {
    let secs = elapsed.as_secs_f64();
    if secs <= 0.0 {
        return Err(HarnessError::UndefinedGoodput);
    }
    Ok(bytes as f64 / secs)
}

pub fn measure_goodput(hop: &HopResult) -> Result<f64, HarnessError> {
    goodput(hop.bytes_delivered, Duration::from_secs_f64(hop.transfer_seconds.max(0.0)))
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let mut hops = Vec::with_capacity(config.hop_counts.len());
    for &h in &config.hop_counts {
        log::info!("running {h}-hop experiment");
        hops.push(run_hop(config, h)?);
    }
    Ok(ScenarioResult {
        config: config.clone(),
        hops,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Builds `config.circuits` circuits of `hops` hops on a fresh network,
/// streams the payload through them, tears them down and collects profiles.
pub fn run_hop(config: &ScenarioConfig, hops: usize) -> Result<HopResult, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let mut bed = Testbed::new(config)?;
    bed.start_profiling(config.clock);

    let mut error = None;
    let mut ids = Vec::with_capacity(config.circuits);
    for _ in 0..config.circuits {
        match bed.build_circuit(hops) {
            Ok(id) => ids.push(id),
            Err(e) => {
                error = Some(HarnessError::Run { hops, source: e });
                break;
            }
        }
    }

    let mut packets = 0u64;
    let mut bytes = 0u64;
    let data_start = Instant::now();
    if error.is_none() {
        if let Err(e) = stream(config, &mut bed, &ids, &mut packets, &mut bytes) {
            error = Some(HarnessError::Run { hops, source: e });
        }
    }
    if let Err(e) = bed.settle() {
        error.get_or_insert(HarnessError::Run { hops, source: e });
    }
    for &id in &ids {
        let _ = bed.seed.destroy_circuit(id);
    }
    let _ = bed.settle();
    bed.stop_profiling();

    let taxonomy = config.taxonomy();
    let roles = bed.role_profiles(roles_for_hops(hops), &taxonomy);
    let (sink, local) = bed.delivered();
    let received = if hops == 0 { local } else { sink };
    let transfer = received
        .last_receipt
        .map_or(Duration::ZERO, |t| t.saturating_duration_since(data_start));
    let teardown = bed.finish();
    let relay = teardown.relay_counters();
    let drops = DropCounters {
        transport: teardown.transport_dropped,
        unknown_circuit: relay.unknown_circuit,
        auth_failures: relay.auth_failures,
        malformed: relay.malformed,
        pipeline: teardown.seed.pipeline_send_errors(),
    };
    let expected_calls = roles_for_hops(hops)
        .iter()
        .map(|&r| (r, expected_tunnel_calls(r, hops, packets, ids.len() as u64)))
        .collect();

    if let Some(e) = &error {
        log::warn!("{e}");
    }
    Ok(HopResult {
        hops,
        roles,
        circuits_built: ids.len(),
        packets_sent: packets,
        bytes_sent: bytes,
        packets_delivered: received.packets_received,
        bytes_delivered: received.bytes_received,
        digest: received.digest,
        transfer_seconds: transfer.as_secs_f64(),
        goodput_bytes_per_second: goodput(received.bytes_received, transfer).ok(),
        drops,
        leftover_table_entries: teardown.table_entries(),
        expected_calls,
        wall_seconds: started.elapsed().as_secs_f64(),
        error: error.map(|e| e.to_string()),
    })
}

/// Sends `total_bytes_per_run` of seeded random data through every circuit.
fn stream(
    config: &ScenarioConfig,
    bed: &mut Testbed,
    ids: &[u32],
    packets: &mut u64,
    bytes: &mut u64,
) -> Result<(), CircuitError> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed);
    let mut buf = vec![0u8; config.payload_bytes];
    let mut remaining = vec![config.total_bytes_per_run; ids.len()];
    let mut send = |bed: &mut Testbed, i: usize, remaining: &mut u64| -> Result<(), CircuitError> {
        let len = (*remaining).min(config.payload_bytes as u64) as usize;
        rng.fill_bytes(&mut buf[..len]);
        bed.seed.send(ids[i], &buf[..len])?;
        *remaining -= len as u64;
        *packets += 1;
        *bytes += len as u64;
        if packets.is_multiple_of(PUMP_EVERY) {
            bed.pump();
        }
        Ok(())
    };
    if config.concurrent_circuits {
        while remaining.iter().any(|&r| r > 0) {
            for (i, r) in remaining.iter_mut().enumerate() {
                if *r > 0 {
                    send(bed, i, r)?;
                }
            }
        }
    } else {
        for (i, r) in remaining.iter_mut().enumerate() {
            while *r > 0 {
                send(bed, i, r)?;
            }
            // Let this circuit drain so arrival order at the sink is fixed.
            bed.settle()?;
        }
    }
    Ok(())
}
