//! The traffic origin: builds circuits and applies every onion layer.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::onion::{
    crypto_out, onion_encrypt, parse_header, peel_layer, serialize_cell, split_exit_payload,
    Address, AddressCodec, Cell, CellType, KeySide, LayerKey, OnionError, OnionPayload,
    ADDRESS_LEN, CELL_HEADER_LEN, KEY_LEN, LAYER_OVERHEAD,
};
use crate::profiler::{labels, scope, Profiler};
use crate::transport::{Datagram, Endpoint, MAX_DATAGRAM};

use super::circuit::{Circuit, CircuitError, CircuitState, LocalLoop};
use super::handshake::{KeyAgreement, PendingHandshake, Share};
use super::pipeline::{Job, NetworkStage, Pipeline};
use super::sink::SinkTally;
use super::{Progress, Role, Settle, MAX_HOPS};

/// Largest application payload one data cell can carry over `hops` hops.
pub fn max_payload_len(hops: usize) -> usize {
    let layers = hops.max(1);
    MAX_DATAGRAM - CELL_HEADER_LEN - 1 - LAYER_OVERHEAD * layers - ADDRESS_LEN
}

/// Fixed per-packet delays standing in for stage work in pipeline experiments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCosts {
    pub crypto: Duration,
    pub send: Duration,
    pub other: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCounters {
    pub data_cells: u64,
    /// Application bytes handed to circuits.
    pub data_bytes: u64,
    pub control_cells: u64,
    pub unexpected_cells: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DestroyAck {
    Destroyed,
    AlreadyDestroyed,
}

pub struct SeedNode {
    endpoint: Arc<dyn Endpoint>,
    profiler: Profiler,
    codec: AddressCodec,
    agreement: KeyAgreement,
    rng: ChaCha20Rng,
    circuits: BTreeMap<u32, Circuit>,
    pending: HashMap<u32, PendingHandshake>,
    local: SinkTally,
    pipeline: Option<Pipeline>,
    synthetic: Option<SyntheticCosts>,
    counters: SeedCounters,
    handshake_timeout: Duration,
}

impl SeedNode {
    pub fn new(
        endpoint: Arc<dyn Endpoint>,
        profiler: Profiler,
        agreement: KeyAgreement,
        codec: AddressCodec,
        rng_seed: u64,
    ) -> Self {
        SeedNode {
            endpoint,
            profiler,
            codec,
            agreement,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            circuits: BTreeMap::new(),
            pending: HashMap::new(),
            local: SinkTally::default(),
            pipeline: None,
            synthetic: None,
            counters: SeedCounters::default(),
            handshake_timeout: Duration::from_secs(5),
        }
    }

    pub fn role(&self) -> Role {
        Role::Seed
    }

    pub fn address(&self) -> Address {
        self.endpoint.local_address()
    }

    pub fn endpoint(&self) -> &Arc<dyn Endpoint> {
        &self.endpoint
    }

    pub fn profiler(&self) -> &Profiler {
        &self.profiler
    }

    pub fn counters(&self) -> SeedCounters {
        self.counters
    }

    /// Receiver of 0-hop traffic.
    pub fn local_tally(&self) -> SinkTally {
        self.local.clone()
    }

    pub fn circuit(&self, id: u32) -> Option<&Circuit> {
        self.circuits.get(&id)
    }

    pub fn circuits(&self) -> impl Iterator<Item = &Circuit> {
        self.circuits.values()
    }

    pub fn set_handshake_timeout(&mut self, timeout: Duration) {
        self.handshake_timeout = timeout;
    }

    pub fn set_synthetic_costs(&mut self, costs: Option<SyntheticCosts>) {
        self.synthetic = costs;
    }

    /// Switches [`send`](Self::send) to the pipelined path.
    pub fn enable_pipeline(&mut self, capacity: usize) {
        self.disable_pipeline();
        let stage = NetworkStage {
            endpoint: self.endpoint.clone(),
            profiler: self.profiler.clone(),
            local: self.local.clone(),
            send_cost: self.synthetic.map(|s| s.send),
        };
        self.pipeline = Some(Pipeline::spawn(capacity, stage));
    }

    /// Drains and stops the pipeline, if any.
    pub fn disable_pipeline(&mut self) {
        if let Some(p) = self.pipeline.take() {
            p.shutdown();
        }
    }

    pub fn is_pipelined(&self) -> bool {
        self.pipeline.is_some()
    }

    pub fn pipeline_send_errors(&self) -> u64 {
        self.pipeline.as_ref().map_or(0, Pipeline::send_errors)
    }

    pub fn flush(&self) -> Result<(), CircuitError> {
        match &self.pipeline {
            Some(p) => p.flush(),
            None => Ok(()),
        }
    }

    /// Builds a circuit through `path` towards `destination`, driving
    /// `network` until every hop has answered. An empty path gives a local
    /// 0-hop circuit without sending anything.
    pub fn create_circuit(
        &mut self,
        path: &[Address],
        destination: Address,
        network: &mut dyn Settle,
    ) -> Result<u32, CircuitError> {
        let id = {
            let _g = self.profiler.enter();
            let _s = scope(labels::CREATE_CIRCUIT);
            self.begin_circuit(path, destination)?
        };
        let deadline = Instant::now() + self.handshake_timeout;
        loop {
            let handled = self.poll();
            let circuit = &self.circuits[&id];
            if circuit.is_established() {
                return Ok(id);
            }
            let stalled = if handled > 0 {
                false
            } else {
                network.step() == Progress::Idle && self.poll() == 0
            };
            let circuit = &self.circuits[&id];
            if circuit.is_established() {
                return Ok(id);
            }
            if stalled || Instant::now() >= deadline {
                let hop_index = circuit.established_hops() + 1;
                let _ = self.destroy_circuit(id);
                return Err(CircuitError::BuildFailure { hop_index });
            }
        }
    }

    /// Registers a circuit and sends its first handshake cell. Completion
    /// happens as replies are fed to [`handle_datagram`](Self::handle_datagram).
    pub fn begin_circuit(&mut self, path: &[Address], destination: Address) -> Result<u32, CircuitError> {
        if path.len() > MAX_HOPS {
            return Err(CircuitError::TooManyHops {
                got: path.len(),
                max: MAX_HOPS,
            });
        }
        let id = self.fresh_circuit_id();
        let mut circuit = Circuit::new(id, path.to_vec(), destination);
        if path.is_empty() {
            let mut key = [0u8; KEY_LEN];
            self.rng.fill_bytes(&mut key);
            circuit.local = Some(LocalLoop::new(LayerKey::new(key, KeySide::Initiator)));
            circuit.state = CircuitState::Established;
            self.circuits.insert(id, circuit);
            return Ok(id);
        }
        let pending = self.agreement.client_start(&mut self.rng);
        let create = Cell::new(id, CellType::Create, pending.share().to_vec());
        self.pending.insert(id, pending);
        self.circuits.insert(id, circuit);
        self.send_control(path[0], create)?;
        Ok(id)
    }

    /// Handles every datagram that is ready now. Returns how many there were.
    pub fn poll(&mut self) -> usize {
        let mut n = 0;
        while let Some(d) = self.endpoint.try_recv() {
            self.handle_datagram(d);
            n += 1;
        }
        n
    }

    pub fn handle_datagram(&mut self, datagram: Datagram) {
        let _g = self.profiler.enter();
        let _s = scope(labels::DISPATCH_DATAGRAM);
        let Ok((id, cell_type, payload)) = parse_header(&datagram.payload) else {
            self.counters.unexpected_cells += 1;
            return;
        };
        let expected = matches!(cell_type, CellType::Created | CellType::Extended)
            && self.circuits.get(&id).is_some_and(|c| {
                c.state == CircuitState::Building
                    && c.first_hop() == Some(datagram.source)
                    && (cell_type == CellType::Created) == c.keys.is_empty()
            });
        let share: Option<Share> = payload.try_into().ok();
        let (true, Some(share), Some(pending)) = (expected, share, self.pending.remove(&id)) else {
            self.counters.unexpected_cells += 1;
            return;
        };
        let key = self.agreement.client_finish(pending, &share);
        let circuit = self.circuits.get_mut(&id).expect("checked above");
        circuit.keys.push(key);
        if circuit.keys.len() == circuit.path.len() {
            circuit.state = CircuitState::Established;
            return;
        }
        let next = circuit.path[circuit.keys.len()];
        let first = circuit.path[0];
        let pending = self.agreement.client_start(&mut self.rng);
        let mut payload = self.codec.encode(next).to_vec();
        payload.extend_from_slice(pending.share());
        self.pending.insert(id, pending);
        let _ = self.send_control(first, Cell::new(id, CellType::Extend, payload));
    }

    /// Sends `data` on the configured path: pipelined if enabled, otherwise
    /// sequential.
    pub fn send(&mut self, id: u32, data: &[u8]) -> Result<(), CircuitError> {
        let _g = self.profiler.enter();
        if let Some(costs) = self.synthetic {
            let _s = scope(labels::SYNTHETIC_OTHER);
            std::thread::sleep(costs.other);
        }
        if self.pipeline.is_some() {
            self.pipelined_send(id, data)
        } else {
            self.send_packet(id, data)
        }
    }

    /// Encrypts and transmits one data cell on the calling thread.
    pub fn send_packet(&mut self, id: u32, data: &[u8]) -> Result<(), CircuitError> {
        let _g = self.profiler.enter();
        let _s = scope(labels::SEND_PACKET);
        match self.crypto_stage(id, data)? {
            Job::Send { to, cell } => {
                if let Some(costs) = self.synthetic {
                    let _c = scope(labels::SYNTHETIC_SEND);
                    std::thread::sleep(costs.send);
                }
                self.endpoint.send_to(to, serialize_cell(&cell)?)?;
            }
            Job::Local(plain) => {
                if let Some(costs) = self.synthetic {
                    let _c = scope(labels::SYNTHETIC_SEND);
                    std::thread::sleep(costs.send);
                }
                let _d = scope(labels::DELIVER_LOCAL);
                self.local.record(&plain);
            }
            Job::Flush(_) => unreachable!(),
        }
        self.count_data(data.len());
        Ok(())
    }

    /// Encrypts on the calling thread and queues the cell for the network
    /// thread. Blocks while the queue is full.
    pub fn pipelined_send(&mut self, id: u32, data: &[u8]) -> Result<(), CircuitError> {
        let _g = self.profiler.enter();
        if self.pipeline.is_none() {
            return Err(CircuitError::PipelineClosed);
        }
        let job = self.crypto_stage(id, data)?;
        self.pipeline.as_ref().expect("checked above").submit(job)?;
        self.count_data(data.len());
        Ok(())
    }

    fn count_data(&mut self, len: usize) {
        self.counters.data_cells += 1;
        self.counters.data_bytes += len as u64;
    }

    fn crypto_stage(&mut self, id: u32, data: &[u8]) -> Result<Job, CircuitError> {
        let circuit = self.circuits.get_mut(&id).ok_or(CircuitError::Unknown(id))?;
        if !circuit.is_established() {
            return Err(CircuitError::NotEstablished(id));
        }
        let max = max_payload_len(circuit.hop_count());
        if data.len() > max {
            return Err(OnionError::Oversize {
                len: data.len(),
                max,
                layers: circuit.hop_count().max(1),
            }
            .into());
        }
        let cell = crypto_out(circuit, data, &self.codec)?;
        if let Some(costs) = self.synthetic {
            let _c = scope(labels::SYNTHETIC_CRYPTO);
            std::thread::sleep(costs.crypto);
        }
        match (&mut circuit.local, circuit.path.first()) {
            (Some(local), _) => Ok(Job::Local(loop_back(local, cell, &self.codec)?)),
            (None, Some(&to)) => Ok(Job::Send { to, cell }),
            (None, None) => Err(CircuitError::NotEstablished(id)),
        }
    }

    /// Tears down a circuit. Queued data is flushed first so it precedes the
    /// DESTROY cell on the wire. Destroying twice is a no-op.
    pub fn destroy_circuit(&mut self, id: u32) -> Result<DestroyAck, CircuitError> {
        let _g = self.profiler.enter();
        let _s = scope(labels::DESTROY_CIRCUIT);
        let state = self.circuits.get(&id).ok_or(CircuitError::Unknown(id))?.state;
        if state == CircuitState::Destroyed {
            return Ok(DestroyAck::AlreadyDestroyed);
        }
        self.flush()?;
        self.pending.remove(&id);
        let circuit = self.circuits.get_mut(&id).expect("checked above");
        circuit.state = CircuitState::Destroyed;
        if let Some(first) = circuit.first_hop() {
            self.send_control(first, Cell::new(id, CellType::Destroy, Vec::new()))?;
        }
        Ok(DestroyAck::Destroyed)
    }

    fn send_control(&mut self, to: Address, cell: Cell) -> Result<(), CircuitError> {
        let _s = scope(labels::SEND_CONTROL);
        self.counters.control_cells += 1;
        self.endpoint.send_to(to, serialize_cell(&cell)?)?;
        Ok(())
    }

    fn fresh_circuit_id(&mut self) -> u32 {
        loop {
            let id = self.rng.next_u32();
            if id != 0 && !self.circuits.contains_key(&id) {
                return id;
            }
        }
    }
}

impl Drop for SeedNode {
    fn drop(&mut self) {
        self.disable_pipeline();
    }
}

/// Runs a 0-hop cell through the circuit's local key pair and returns the
/// application bytes.
fn loop_back(local: &mut LocalLoop, cell: Cell, codec: &AddressCodec) -> Result<Vec<u8>, CircuitError> {
    let framed = OnionPayload::from_wire(&cell.payload)?;
    let sealed = onion_encrypt(&framed.body, std::slice::from_mut(&mut local.key))?;
    let opened = peel_layer(sealed, &mut local.loopback)?;
    let (dest, data) = split_exit_payload(&opened.body)?;
    codec.decode(dest)?;
    Ok(data.to_vec())
}
