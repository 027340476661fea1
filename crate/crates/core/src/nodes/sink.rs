use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::profiler::{labels, scope, Profiler};
use crate::transport::{Datagram, Endpoint};

use super::Role;

/// Snapshot of what a sink has received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SinkCounters {
    pub bytes_received: u64,
    pub packets_received: u64,
    #[serde(skip)]
    pub first_receipt: Option<Instant>,
    #[serde(skip)]
    pub last_receipt: Option<Instant>,
    /// Hex SHA-256 over the received payloads, each prefixed by its length.
    pub digest: String,
}

impl SinkCounters {
    /// Received bytes over the span between the first and last receipt.
    pub fn throughput(&self) -> Option<f64> {
        let span = self.last_receipt?.duration_since(self.first_receipt?).as_secs_f64();
        (span > 0.0).then(|| self.bytes_received as f64 / span)
    }
}

struct Tally {
    bytes: u64,
    packets: u64,
    first: Option<Instant>,
    last: Option<Instant>,
    hash: Sha256,
}

/// Byte counter shared between a receiver and whoever reads its totals.
#[derive(Clone)]
pub struct SinkTally {
    inner: Arc<Mutex<Tally>>,
}

impl Default for SinkTally {
    fn default() -> Self {
        SinkTally {
            inner: Arc::new(Mutex::new(Tally {
                bytes: 0,
                packets: 0,
                first: None,
                last: None,
                hash: Sha256::new(),
            })),
        }
    }
}

impl SinkTally {
    pub fn record(&self, payload: &[u8]) {
        let now = Instant::now();
        let mut t = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        t.bytes += payload.len() as u64;
        t.packets += 1;
        t.first.get_or_insert(now);
        t.last = Some(now);
        t.hash.update((payload.len() as u32).to_be_bytes());
        t.hash.update(payload);
    }

    pub fn packets(&self) -> u64 {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).packets
    }

    pub fn counters(&self) -> SinkCounters {
        let t = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let digest = t.hash.clone().finalize();
        SinkCounters {
            bytes_received: t.bytes,
            packets_received: t.packets,
            first_receipt: t.first,
            last_receipt: t.last,
            digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    pub fn reset(&self) {
        let mut t = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        *t = Tally {
            bytes: 0,
            packets: 0,
            first: None,
            last: None,
            hash: Sha256::new(),
        };
    }
}

/// Terminal node: counts what arrives and drops it. Nothing is acknowledged.
pub struct SinkNode {
    endpoint: Arc<dyn Endpoint>,
    profiler: Profiler,
    tally: SinkTally,
}

impl SinkNode {
    pub fn new(endpoint: Arc<dyn Endpoint>, profiler: Profiler) -> Self {
        SinkNode {
            endpoint,
            profiler,
            tally: SinkTally::default(),
        }
    }

    pub fn role(&self) -> Role {
        Role::Sink
    }

    pub fn endpoint(&self) -> &Arc<dyn Endpoint> {
        &self.endpoint
    }

    pub fn profiler(&self) -> &Profiler {
        &self.profiler
    }

    pub fn tally(&self) -> SinkTally {
        self.tally.clone()
    }

    pub fn counters(&self) -> SinkCounters {
        self.tally.counters()
    }

    pub fn sink_receive(&mut self, datagram: Datagram) -> SinkCounters {
        self.handle_datagram(datagram);
        self.counters()
    }

    pub fn handle_datagram(&mut self, datagram: Datagram) {
        let _g = self.profiler.enter();
        let _s = scope(labels::SINK_RECEIVE);
        self.tally.record(&datagram.payload);
    }
}
