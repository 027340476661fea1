//! Schedulers for the reactive nodes (relays, exits, sink).
//!
//! The seed is never owned by a driver: it runs on the caller's thread and
//! polls its own endpoint.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::nodes::{Progress, RelayNode, SeedNode, Settle, SinkNode};
use crate::transport::{Endpoint, InProcNetwork, Transport};

/// How long a transport without delivery bookkeeping must stay silent before
/// it counts as idle.
const QUIET_PERIOD: Duration = Duration::from_millis(25);

pub struct Nodes {
    /// Relays and exits.
    pub relays: Vec<RelayNode>,
    pub sink: SinkNode,
}

impl Nodes {
    fn endpoints(&self) -> Vec<Arc<dyn Endpoint>> {
        self.relays
            .iter()
            .map(|r| r.endpoint().clone())
            .chain(std::iter::once(self.sink.endpoint().clone()))
            .collect()
    }
}

/// Runs every node round-robin on the calling thread.
pub struct DeterministicDriver {
    nodes: Nodes,
    inproc: Option<InProcNetwork>,
}

impl DeterministicDriver {
    /// `inproc` enables exact idleness detection; without it the driver
    /// waits for a quiet period instead.
    pub fn new(nodes: Nodes, inproc: Option<InProcNetwork>) -> Self {
        DeterministicDriver { nodes, inproc }
    }

    /// One pass over all nodes, handling whatever is ready.
    pub fn pump(&mut self) -> usize {
        let mut n = 0;
        for r in self.nodes.relays.iter_mut() {
            n += r.poll();
        }
        while let Some(d) = self.nodes.sink.endpoint().try_recv() {
            self.nodes.sink.handle_datagram(d);
            n += 1;
        }
        n
    }

    pub fn nodes(&self) -> &Nodes {
        &self.nodes
    }

    pub fn into_nodes(self) -> Nodes {
        self.nodes
    }
}

impl Settle for DeterministicDriver {
    fn step(&mut self) -> Progress {
        if self.pump() > 0 {
            return Progress::Busy;
        }
        match &self.inproc {
            Some(net) => match net.next_delivery() {
                Some(at) => {
                    std::thread::sleep(at.saturating_duration_since(Instant::now()));
                    Progress::Busy
                }
                None => Progress::Idle,
            },
            None => {
                let deadline = Instant::now() + QUIET_PERIOD;
                while Instant::now() < deadline {
                    std::thread::sleep(Duration::from_micros(200));
                    if self.pump() > 0 {
                        return Progress::Busy;
                    }
                }
                Progress::Idle
            }
        }
    }
}

enum Worker {
    Relay(Box<RelayNode>),
    Sink(SinkNode),
}

/// Gives every node its own thread.
pub struct ThreadedDriver {
    stop: Arc<AtomicBool>,
    handled: Arc<AtomicU64>,
    endpoints: Vec<Arc<dyn Endpoint>>,
    handles: Vec<JoinHandle<Worker>>,
    transport: Arc<dyn Transport>,
    last_seen: (u64, u64),
    quiet_since: Instant,
}

impl ThreadedDriver {
    pub fn spawn(nodes: Nodes, transport: Arc<dyn Transport>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let handled = Arc::new(AtomicU64::new(0));
        let endpoints = nodes.endpoints();
        let workers = nodes
            .relays
            .into_iter()
            .map(|r| Worker::Relay(Box::new(r)))
            .chain(std::iter::once(Worker::Sink(nodes.sink)));
        let handles = workers
            .map(|mut w| {
                let stop = stop.clone();
                let handled = handled.clone();
                std::thread::spawn(move || {
                    let endpoint = match &w {
                        Worker::Relay(r) => r.endpoint().clone(),
                        Worker::Sink(s) => s.endpoint().clone(),
                    };
                    loop {
                        let d = if stop.load(Ordering::Acquire) {
                            match endpoint.try_recv() {
                                Some(d) => d,
                                None => break,
                            }
                        } else {
                            match endpoint.recv_timeout(Duration::from_millis(5)) {
                                Some(d) => d,
                                None => continue,
                            }
                        };
                        match &mut w {
                            Worker::Relay(r) => r.handle_datagram(d),
                            Worker::Sink(s) => s.handle_datagram(d),
                        }
                        handled.fetch_add(1, Ordering::AcqRel);
                    }
                    w
                })
            })
            .collect();
        ThreadedDriver {
            stop,
            handled,
            endpoints,
            handles,
            transport,
            last_seen: (u64::MAX, u64::MAX),
            quiet_since: Instant::now(),
        }
    }

    /// Stops the node threads once their inboxes are empty and hands the
    /// nodes back.
    pub fn join(self) -> Nodes {
        self.stop.store(true, Ordering::Release);
        let mut relays = Vec::new();
        let mut sink = None;
        for h in self.handles {
            match h.join().expect("node thread panicked") {
                Worker::Relay(r) => relays.push(*r),
                Worker::Sink(s) => sink = Some(s),
            }
        }
        Nodes {
            relays,
            sink: sink.expect("sink thread present"),
        }
    }
}

impl Settle for ThreadedDriver {
    fn step(&mut self) -> Progress {
        std::thread::sleep(Duration::from_micros(200));
        let received: u64 = self.endpoints.iter().map(|e| e.stats().received).sum();
        let handled = self.handled.load(Ordering::Acquire);
        if received != handled || (received, handled) != self.last_seen {
            self.last_seen = (received, handled);
            self.quiet_since = Instant::now();
            return Progress::Busy;
        }
        match self.transport.in_flight() {
            Some(0) => Progress::Idle,
            Some(_) => Progress::Busy,
            None if self.quiet_since.elapsed() >= QUIET_PERIOD => Progress::Idle,
            None => Progress::Busy,
        }
    }
}

pub enum Driver {
    Deterministic(DeterministicDriver),
    Threaded(ThreadedDriver),
}

impl Driver {
    /// Lets nodes catch up without waiting for anything.
    pub fn pump(&mut self) {
        if let Driver::Deterministic(d) = self {
            d.pump();
        }
    }

    /// Runs until nothing is left in flight, feeding the seed its replies.
    pub fn settle(&mut self, seed: &mut SeedNode) {
        loop {
            seed.poll();
            if self.step() == Progress::Idle && seed.poll() == 0 {
                return;
            }
        }
    }

    pub fn into_nodes(self) -> Nodes {
        match self {
            Driver::Deterministic(d) => d.into_nodes(),
            Driver::Threaded(t) => t.join(),
        }
    }
}

impl Settle for Driver {
    fn step(&mut self) -> Progress {
        match self {
            Driver::Deterministic(d) => d.step(),
            Driver::Threaded(t) => t.step(),
        }
    }
}
