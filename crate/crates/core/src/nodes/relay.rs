//! Relay and exit behaviour.
//!
//! A relay node keeps one table entry per circuit passing through it. An
//! entry whose outbound side is empty terminates the circuit: data peeled
//! there is plaintext and is forwarded to the destination named inside it.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::onion::{
    parse_header, peel_layer, serialize_cell, split_exit_payload, Address, AddressCodec, Cell,
    CellType, LayerKey, OnionPayload, ADDRESS_LEN,
};
use crate::profiler::{labels, scope, Profiler};
use crate::transport::{Datagram, Endpoint};

use super::handshake::{KeyAgreement, Share, SHARE_LEN};
use super::Role;

type Label = (Address, u32);

#[derive(Debug, Clone)]
pub struct RelayTableEntry {
    pub inbound: Label,
    pub outbound: Option<Label>,
    pub layer_key: LayerKey,
    /// CREATE sent downstream, CREATED not yet seen.
    extending: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayCounters {
    /// Data cells forwarded to a next hop.
    pub relayed: u64,
    /// Plaintext payloads handed to their destination.
    pub exited: u64,
    pub unknown_circuit: u64,
    pub auth_failures: u64,
    pub malformed: u64,
    pub control_cells: u64,
}

impl RelayCounters {
    pub fn dropped(&self) -> u64 {
        self.unknown_circuit + self.auth_failures + self.malformed
    }
}

pub struct RelayNode {
    role: Role,
    endpoint: Arc<dyn Endpoint>,
    profiler: Profiler,
    codec: AddressCodec,
    agreement: KeyAgreement,
    rng: ChaCha20Rng,
    entries: HashMap<u64, RelayTableEntry>,
    next_entry: u64,
    by_inbound: HashMap<Label, u64>,
    by_outbound: HashMap<Label, u64>,
    counters: RelayCounters,
}

impl RelayNode {
    pub fn new(
        role: Role,
        endpoint: Arc<dyn Endpoint>,
        profiler: Profiler,
        agreement: KeyAgreement,
        codec: AddressCodec,
        rng_seed: u64,
    ) -> Self {
        RelayNode {
            role,
            endpoint,
            profiler,
            codec,
            agreement,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            entries: HashMap::new(),
            next_entry: 0,
            by_inbound: HashMap::new(),
            by_outbound: HashMap::new(),
            counters: RelayCounters::default(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
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

    pub fn counters(&self) -> RelayCounters {
        self.counters
    }

    pub fn table_len(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &RelayTableEntry> {
        self.entries.values()
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
        let from = datagram.source;
        let Ok((cid, cell_type, payload)) = parse_header(&datagram.payload) else {
            self.counters.malformed += 1;
            return;
        };
        match cell_type {
            CellType::Data => self.relay_packet(from, cid, payload),
            CellType::Create => self.on_create(from, cid, payload),
            CellType::Created => self.on_created(from, cid, payload),
            CellType::Extend => self.on_extend(from, cid, payload),
            CellType::Extended => self.on_extended(from, cid, payload),
            CellType::Destroy => self.on_destroy(from, cid),
        }
    }

    /// Peels one layer from a data cell and passes it on: relabeled to the
    /// next hop, or as plaintext to its destination when this node is the
    /// last hop. Failures are counted and the cell dropped.
    pub fn relay_packet(&mut self, from: Address, circuit_id: u32, payload: &[u8]) {
        let _s = scope(labels::RELAY_PACKET);
        let Some(&eid) = self.by_inbound.get(&(from, circuit_id)) else {
            self.counters.unknown_circuit += 1;
            return;
        };
        let Ok(onion) = OnionPayload::from_wire(payload) else {
            self.counters.malformed += 1;
            return;
        };
        let entry = self.entries.get_mut(&eid).expect("inbound index points at a live entry");
        let peeled = match peel_layer(onion, &mut entry.layer_key) {
            Ok(p) => p,
            Err(_) => {
                self.counters.auth_failures += 1;
                return;
            }
        };
        match (entry.outbound, entry.extending) {
            (Some((next, out_id)), false) => {
                let cell = Cell::new(out_id, CellType::Data, peeled.to_wire());
                self.counters.relayed += 1;
                self.transmit(next, &cell);
            }
            (None, _) => self.exit_forward(peeled),
            (Some(_), true) => self.counters.malformed += 1,
        }
    }

    /// Sends the plaintext of a fully peeled onion to the destination it names.
    pub fn exit_forward(&mut self, onion: OnionPayload) {
        if onion.layers_remaining != 0 {
            self.counters.malformed += 1;
            return;
        }
        let Ok((dest, data)) = split_exit_payload(&onion.body) else {
            self.counters.malformed += 1;
            return;
        };
        let Ok(dest) = self.codec.decode(dest) else {
            self.counters.malformed += 1;
            return;
        };
        let data = data.to_vec();
        let _s = scope(labels::SEND_PACKET);
        if self.endpoint.send_to(dest, data).is_ok() {
            self.counters.exited += 1;
        } else {
            self.counters.malformed += 1;
        }
    }

    fn transmit(&self, to: Address, cell: &Cell) {
        let _s = scope(labels::SEND_PACKET);
        if let Ok(bytes) = serialize_cell(cell) {
            let _ = self.endpoint.send_to(to, bytes);
        }
    }

    fn send_control(&mut self, to: Address, cell: Cell) {
        let _s = scope(labels::SEND_CONTROL);
        self.counters.control_cells += 1;
        if let Ok(bytes) = serialize_cell(&cell) {
            let _ = self.endpoint.send_to(to, bytes);
        }
    }

    fn share(payload: &[u8]) -> Option<Share> {
        payload.try_into().ok()
    }

    fn on_create(&mut self, from: Address, cid: u32, payload: &[u8]) {
        let Some(client_share) = Self::share(payload) else {
            self.counters.malformed += 1;
            return;
        };
        if self.by_inbound.contains_key(&(from, cid)) {
            self.counters.malformed += 1;
            return;
        }
        let (reply, key) = self.agreement.server_respond(&client_share, &mut self.rng);
        let eid = self.next_entry;
        self.next_entry += 1;
        self.entries.insert(
            eid,
            RelayTableEntry {
                inbound: (from, cid),
                outbound: None,
                layer_key: key,
                extending: false,
            },
        );
        self.by_inbound.insert((from, cid), eid);
        self.send_control(from, Cell::new(cid, CellType::Created, reply.to_vec()));
    }

    fn on_extend(&mut self, from: Address, cid: u32, payload: &[u8]) {
        let Some(&eid) = self.by_inbound.get(&(from, cid)) else {
            self.counters.unknown_circuit += 1;
            return;
        };
        if payload.len() != ADDRESS_LEN + SHARE_LEN {
            self.counters.malformed += 1;
            return;
        }
        let entry = &self.entries[&eid];
        if let Some((next, out_id)) = entry.outbound {
            if entry.extending {
                self.counters.malformed += 1;
                return;
            }
            self.send_control(next, Cell::new(out_id, CellType::Extend, payload.to_vec()));
            return;
        }
        let Ok(target) = self.codec.decode(&payload[..ADDRESS_LEN]) else {
            self.counters.malformed += 1;
            return;
        };
        let out_id = self.fresh_outbound_id(target);
        self.by_outbound.insert((target, out_id), eid);
        let entry = self.entries.get_mut(&eid).expect("entry exists");
        entry.outbound = Some((target, out_id));
        entry.extending = true;
        self.send_control(
            target,
            Cell::new(out_id, CellType::Create, payload[ADDRESS_LEN..].to_vec()),
        );
    }

    fn on_created(&mut self, from: Address, cid: u32, payload: &[u8]) {
        let Some(&eid) = self.by_outbound.get(&(from, cid)) else {
            self.counters.unknown_circuit += 1;
            return;
        };
        let entry = self.entries.get_mut(&eid).expect("outbound index points at a live entry");
        if !entry.extending || payload.len() != SHARE_LEN {
            self.counters.malformed += 1;
            return;
        }
        entry.extending = false;
        let (prev, in_id) = entry.inbound;
        self.send_control(prev, Cell::new(in_id, CellType::Extended, payload.to_vec()));
    }

    fn on_extended(&mut self, from: Address, cid: u32, payload: &[u8]) {
        let Some(&eid) = self.by_outbound.get(&(from, cid)) else {
            self.counters.unknown_circuit += 1;
            return;
        };
        let (prev, in_id) = self.entries[&eid].inbound;
        self.send_control(prev, Cell::new(in_id, CellType::Extended, payload.to_vec()));
    }

    fn on_destroy(&mut self, from: Address, cid: u32) {
        let Some(eid) = self.by_inbound.remove(&(from, cid)) else {
            self.counters.unknown_circuit += 1;
            return;
        };
        let entry = self.entries.remove(&eid).expect("inbound index points at a live entry");
        if let Some((next, out_id)) = entry.outbound {
            self.by_outbound.remove(&(next, out_id));
            self.send_control(next, Cell::new(out_id, CellType::Destroy, Vec::new()));
        }
    }

    fn fresh_outbound_id(&mut self, target: Address) -> u32 {
        loop {
            let id = self.rng.next_u32();
            if id != 0 && !self.by_outbound.contains_key(&(target, id)) {
                return id;
            }
        }
    }
}
