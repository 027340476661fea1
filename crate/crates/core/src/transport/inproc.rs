use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::atomic::{AtomicU16, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use super::{Datagram, Endpoint, EndpointStats, Transport, TransportError, MAX_DATAGRAM};
use crate::onion::Address;

struct Pending {
    deliver_at: Instant,
    seq: u64,
    datagram: Datagram,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.deliver_at == other.deliver_at && self.seq == other.seq
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_at, self.seq).cmp(&(other.deliver_at, other.seq))
    }
}

#[derive(Default)]
struct Inbox {
    queue: Mutex<BinaryHeap<Reverse<Pending>>>,
    ready: Condvar,
}

struct Router {
    inboxes: RwLock<HashMap<Address, Arc<Inbox>>>,
    latency: RwLock<HashMap<(Address, Address), Duration>>,
    default_latency: Duration,
    seq: AtomicU64,
    dropped: AtomicU64,
    in_flight: AtomicU64,
    next_port: AtomicU16,
}

impl Router {
    fn latency(&self, from: Address, to: Address) -> Duration {
        if let Some(d) = self.latency.read().unwrap_or_else(|e| e.into_inner()).get(&(from, to)) {
            return *d;
        }
        self.default_latency
    }
}

/// In-process datagram network. Delivery is exactly-once and FIFO per link;
/// an optional latency delays delivery per link.
#[derive(Clone)]
pub struct InProcNetwork {
    router: Arc<Router>,
}

impl Default for InProcNetwork {
    fn default() -> Self {
        Self::new()
    }
}

impl InProcNetwork {
    pub fn new() -> Self {
        Self::with_latency(Duration::ZERO)
    }

    /// Every link delays delivery by `latency`.
    pub fn with_latency(latency: Duration) -> Self {
        InProcNetwork {
            router: Arc::new(Router {
                inboxes: RwLock::new(HashMap::new()),
                latency: RwLock::new(HashMap::new()),
                default_latency: latency,
                seq: AtomicU64::new(0),
                dropped: AtomicU64::new(0),
                in_flight: AtomicU64::new(0),
                next_port: AtomicU16::new(40_000),
            }),
        }
    }

    /// Overrides the latency of the directed link `from -> to`.
    pub fn set_link_latency(&self, from: Address, to: Address, latency: Duration) {
        self.router
            .latency
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert((from, to), latency);
    }

    pub fn bind_inproc(&self, address: Address) -> Result<Arc<InProcEndpoint>, TransportError> {
        let mut inboxes = self.router.inboxes.write().unwrap_or_else(|e| e.into_inner());
        let address = if address.port == 0 {
            loop {
                let port = self.router.next_port.fetch_add(1, Ordering::Relaxed).max(1);
                let candidate = Address::new(address.host, port);
                if !inboxes.contains_key(&candidate) {
                    break candidate;
                }
            }
        } else {
            address
        };
        if inboxes.contains_key(&address) {
            return Err(TransportError::AddressInUse(address));
        }
        let inbox = Arc::new(Inbox::default());
        inboxes.insert(address, inbox.clone());
        Ok(Arc::new(InProcEndpoint {
            address,
            inbox,
            router: self.router.clone(),
            sent: AtomicU64::new(0),
            received: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }))
    }

    /// Earliest time a queued datagram becomes deliverable.
    pub fn next_delivery(&self) -> Option<Instant> {
        let inboxes = self.router.inboxes.read().unwrap_or_else(|e| e.into_inner());
        inboxes
            .values()
            .filter_map(|i| {
                i.queue
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .peek()
                    .map(|Reverse(p)| p.deliver_at)
            })
            .min()
    }
}

impl Transport for InProcNetwork {
    fn bind(&self, address: Address) -> Result<Arc<dyn Endpoint>, TransportError> {
        Ok(self.bind_inproc(address)?)
    }

    fn dropped(&self) -> u64 {
        self.router.dropped.load(Ordering::Relaxed)
    }

    fn in_flight(&self) -> Option<u64> {
        Some(self.router.in_flight.load(Ordering::Acquire))
    }
}

pub struct InProcEndpoint {
    address: Address,
    inbox: Arc<Inbox>,
    router: Arc<Router>,
    sent: AtomicU64,
    received: AtomicU64,
    dropped: AtomicU64,
}

impl InProcEndpoint {
    fn pop_ready(&self, queue: &mut BinaryHeap<Reverse<Pending>>, now: Instant) -> Option<Datagram> {
        match queue.peek() {
            Some(Reverse(p)) if p.deliver_at <= now => {
                let Reverse(p) = queue.pop()?;
                self.received.fetch_add(1, Ordering::Relaxed);
                self.router.in_flight.fetch_sub(1, Ordering::AcqRel);
                Some(p.datagram)
            }
            _ => None,
        }
    }
}

impl Endpoint for InProcEndpoint {
    fn local_address(&self) -> Address {
        self.address
    }

    fn send_to(&self, dest: Address, payload: Vec<u8>) -> Result<(), TransportError> {
        if payload.len() > MAX_DATAGRAM {
            return Err(TransportError::Oversize(payload.len()));
        }
        self.sent.fetch_add(1, Ordering::Relaxed);
        let inbox = self
            .router
            .inboxes
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&dest)
            .cloned();
        let Some(inbox) = inbox else {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            self.router.dropped.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        };
        let deliver_at = Instant::now() + self.router.latency(self.address, dest);
        let seq = self.router.seq.fetch_add(1, Ordering::Relaxed);
        self.router.in_flight.fetch_add(1, Ordering::AcqRel);
        inbox
            .queue
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(Reverse(Pending {
                deliver_at,
                seq,
                datagram: Datagram {
                    source: self.address,
                    payload,
                },
            }));
        inbox.ready.notify_one();
        Ok(())
    }

    fn try_recv(&self) -> Option<Datagram> {
        let mut queue = self.inbox.queue.lock().unwrap_or_else(|e| e.into_inner());
        self.pop_ready(&mut queue, Instant::now())
    }

    fn recv_timeout(&self, timeout: Duration) -> Option<Datagram> {
        let deadline = Instant::now() + timeout;
        let mut queue = self.inbox.queue.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let now = Instant::now();
            if let Some(d) = self.pop_ready(&mut queue, now) {
                return Some(d);
            }
            if now >= deadline {
                return None;
            }
            let wake = match queue.peek() {
                Some(Reverse(p)) => p.deliver_at.min(deadline),
                None => deadline,
            };
            queue = self
                .inbox
                .ready
                .wait_timeout(queue, wake.saturating_duration_since(now))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn stats(&self) -> EndpointStats {
        EndpointStats {
            sent: self.sent.load(Ordering::Relaxed),
            received: self.received.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
        }
    }
}

impl Drop for InProcEndpoint {
    fn drop(&mut self) {
        let mut inboxes = self.router.inboxes.write().unwrap_or_else(|e| e.into_inner());
        if inboxes
            .get(&self.address)
            .is_some_and(|i| Arc::ptr_eq(i, &self.inbox))
        {
            inboxes.remove(&self.address);
            let left = self.inbox.queue.lock().unwrap_or_else(|e| e.into_inner()).len() as u64;
            self.router.in_flight.fetch_sub(left, Ordering::AcqRel);
            self.router.dropped.fetch_add(left, Ordering::Relaxed);
        }
    }
}
