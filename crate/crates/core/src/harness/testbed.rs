//! One process-local network: a seed, four relays, two exits and a sink.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::nodes::{
    CircuitError, KeyAgreement, RelayCounters, RelayNode, Role, SeedNode, SinkCounters, SinkNode,
    SinkTally,
};
use crate::onion::{Address, AddressCodec};
use crate::profiler::{categorize, merge_stats, ClockKind, Profiler, Taxonomy};
use crate::transport::{InProcNetwork, Transport, TransportKind, UdpTransport};

use super::driver::{DeterministicDriver, Driver, Nodes, ThreadedDriver};
use super::{HarnessError, RoleProfile, ScenarioConfig};

pub const RELAY_POOL: usize = 4;
pub const EXIT_POOL: usize = 2;

pub struct Testbed {
    pub seed: SeedNode,
    driver: Driver,
    transport: Arc<dyn Transport>,
    relay_addrs: Vec<Address>,
    exit_addrs: Vec<Address>,
    sink_addr: Address,
    sink_tally: SinkTally,
    profilers: Vec<(Role, Profiler)>,
    circuits_built: usize,
}

/// State left after the node threads have stopped.
pub struct Teardown {
    pub seed: SeedNode,
    pub nodes: Nodes,
    pub transport_dropped: u64,
}

impl Testbed {
    pub fn new(config: &ScenarioConfig) -> Result<Self, HarnessError> {
        let (transport, inproc): (Arc<dyn Transport>, Option<InProcNetwork>) = match config.transport {
            TransportKind::Inproc => {
                let net = InProcNetwork::with_latency(config.link_latency);
                (Arc::new(net.clone()), Some(net))
            }
            TransportKind::Udp => (Arc::new(UdpTransport::new()), None),
        };
        let agreement = if config.deterministic_keys {
            KeyAgreement::pre_shared_from_seed(config.rng_seed)
        } else {
            KeyAgreement::X25519
        };
        let mut seeds: Box<dyn RngCore> = if config.deterministic_keys {
            Box::new(ChaCha20Rng::seed_from_u64(config.rng_seed ^ 0x5eed_5eed))
        } else {
            Box::new(ChaCha20Rng::from_os_rng())
        };
        let codec = || {
            if config.cached_codec {
                AddressCodec::cached()
            } else {
                AddressCodec::Plain
            }
        };
        let host = Address::localhost(0);
        let mut profilers = Vec::new();

        let seed_profiler = Profiler::new("seed");
        profilers.push((Role::Seed, seed_profiler.clone()));
        let mut seed = SeedNode::new(
            transport.bind(host)?,
            seed_profiler,
            agreement.clone(),
            codec(),
            seeds.next_u64(),
        );
        seed.set_synthetic_costs(config.synthetic);
        if config.pipelined {
            seed.enable_pipeline(config.queue_capacity);
        }

        let mut relays = Vec::new();
        for (role, count) in [(Role::Relay, RELAY_POOL), (Role::Exit, EXIT_POOL)] {
            for i in 0..count {
                let profiler = Profiler::new(format!("{role}-{i}"));
                profilers.push((role, profiler.clone()));
                relays.push(RelayNode::new(
                    role,
                    transport.bind(host)?,
                    profiler,
                    agreement.clone(),
                    codec(),
                    seeds.next_u64(),
                ));
            }
        }
        let sink_profiler = Profiler::new("sink");
        profilers.push((Role::Sink, sink_profiler.clone()));
        let sink = SinkNode::new(transport.bind(host)?, sink_profiler);

        let relay_addrs = addresses(&relays, Role::Relay);
        let exit_addrs = addresses(&relays, Role::Exit);
        let sink_addr = sink.endpoint().local_address();
        let sink_tally = sink.tally();
        let nodes = Nodes { relays, sink };
        let driver = if config.threaded {
            Driver::Threaded(ThreadedDriver::spawn(nodes, transport.clone()))
        } else {
            Driver::Deterministic(DeterministicDriver::new(nodes, inproc))
        };
        Ok(Testbed {
            seed,
            driver,
            transport,
            relay_addrs,
            exit_addrs,
            sink_addr,
            sink_tally,
            profilers,
            circuits_built: 0,
        })
    }

    pub fn start_profiling(&self, clock: ClockKind) {
        for (_, p) in &self.profilers {
            if !p.is_running() {
                let _ = p.start(clock);
            }
        }
    }

    pub fn stop_profiling(&self) {
        for (_, p) in &self.profilers {
            let _ = p.stop();
        }
    }

    pub fn sink_address(&self) -> Address {
        self.sink_addr
    }

    /// Hops for the `index`-th circuit: distinct relays taken round-robin
    /// from the pool, then an exit.
    pub fn path_for(&self, index: usize, hops: usize) -> Vec<Address> {
        if hops == 0 {
            return Vec::new();
        }
        let mut path: Vec<Address> = (0..hops - 1)
            .map(|j| self.relay_addrs[(index + j) % self.relay_addrs.len()])
            .collect();
        path.push(self.exit_addrs[index % self.exit_addrs.len()]);
        path
    }

    pub fn build_circuit(&mut self, hops: usize) -> Result<u32, CircuitError> {
        let path = self.path_for(self.circuits_built, hops);
        self.build_circuit_through(&path)
    }

    pub fn build_circuit_through(&mut self, path: &[Address]) -> Result<u32, CircuitError> {
        let id = self.seed.create_circuit(path, self.sink_addr, &mut self.driver)?;
        self.circuits_built += 1;
        Ok(id)
    }

    pub fn pump(&mut self) {
        self.driver.pump();
    }

    /// Flushes the seed's queue and waits until the network is quiet.
    pub fn settle(&mut self) -> Result<(), CircuitError> {
        self.seed.flush()?;
        self.driver.settle(&mut self.seed);
        Ok(())
    }

    /// Bytes received by the sink, or by the seed's local loop for 0-hop
    /// circuits.
    pub fn delivered(&self) -> (SinkCounters, SinkCounters) {
        (self.sink_tally.counters(), self.seed.local_tally().counters())
    }

    pub fn role_profile(&self, role: Role, taxonomy: &Taxonomy) -> RoleProfile {
        let snaps: Vec<_> = self
            .profilers
            .iter()
            .filter(|(r, _)| *r == role)
            .map(|(_, p)| p.snapshot())
            .collect();
        let stats = merge_stats(snaps.iter().map(Vec::as_slice));
        let breakdown = categorize(&stats, taxonomy);
        RoleProfile {
            nodes: snaps.len(),
            stats,
            breakdown,
        }
    }

    pub fn role_profiles(&self, roles: &[Role], taxonomy: &Taxonomy) -> BTreeMap<Role, RoleProfile> {
        roles.iter().map(|&r| (r, self.role_profile(r, taxonomy))).collect()
    }

    /// Stops node threads and the seed's pipeline.
    pub fn finish(mut self) -> Teardown {
        self.seed.disable_pipeline();
        let nodes = self.driver.into_nodes();
        Teardown {
            seed: self.seed,
            nodes,
            transport_dropped: self.transport.dropped(),
        }
    }
}

impl Teardown {
    pub fn relay_counters(&self) -> RelayCounters {
        self.nodes.relays.iter().fold(RelayCounters::default(), |mut acc, r| {
            let c = r.counters();
            acc.relayed += c.relayed;
            acc.exited += c.exited;
            acc.unknown_circuit += c.unknown_circuit;
            acc.auth_failures += c.auth_failures;
            acc.malformed += c.malformed;
            acc.control_cells += c.control_cells;
            acc
        })
    }

    /// Table entries still held by relays and exits.
    pub fn table_entries(&self) -> usize {
        self.nodes.relays.iter().map(RelayNode::table_len).sum()
    }
}

fn addresses(nodes: &[RelayNode], role: Role) -> Vec<Address> {
    nodes
        .iter()
        .filter(|n| n.role() == role)
        .map(RelayNode::address)
        .collect()
}
