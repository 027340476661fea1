//! Two-stage send path: the caller encrypts, a dedicated thread transmits.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};

use crate::onion::{serialize_cell, Address, Cell};
use crate::profiler::{labels, scope, Profiler};
use crate::transport::Endpoint;

use super::circuit::CircuitError;
use super::sink::SinkTally;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

pub(crate) enum Job {
    Send { to: Address, cell: Cell },
    /// Plaintext of a 0-hop circuit, already through the local loop.
    Local(Vec<u8>),
    Flush(Sender<()>),
}

pub(crate) struct NetworkStage {
    pub endpoint: Arc<dyn Endpoint>,
    pub profiler: Profiler,
    pub local: SinkTally,
    pub send_cost: Option<Duration>,
}

/// Bounded FIFO between the crypto stage and the network thread. A full
/// queue blocks the producer; nothing is dropped.
pub struct Pipeline {
    tx: Option<Sender<Job>>,
    handle: Option<JoinHandle<()>>,
    capacity: usize,
    send_errors: Arc<AtomicU64>,
}

impl Pipeline {
    pub(crate) fn spawn(capacity: usize, stage: NetworkStage) -> Self {
        let capacity = capacity.max(1);
        let (tx, rx) = bounded(capacity);
        let send_errors = Arc::new(AtomicU64::new(0));
        let errors = send_errors.clone();
        let handle = std::thread::Builder::new()
            .name("seed-network".into())
            .spawn(move || network_loop(rx, stage, errors))
            .expect("spawn network stage");
        Pipeline {
            tx: Some(tx),
            handle: Some(handle),
            capacity,
            send_errors,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Datagrams the network thread failed to hand to the transport.
    pub fn send_errors(&self) -> u64 {
        self.send_errors.load(Ordering::Relaxed)
    }

    pub(crate) fn submit(&self, job: Job) -> Result<(), CircuitError> {
        let _s = scope(labels::ENQUEUE_CELL);
        self.tx
            .as_ref()
            .ok_or(CircuitError::PipelineClosed)?
            .send(job)
            .map_err(|_| CircuitError::PipelineClosed)
    }

    /// Blocks until everything queued so far has been transmitted.
    pub fn flush(&self) -> Result<(), CircuitError> {
        let (ack_tx, ack_rx) = bounded(1);
        self.tx
            .as_ref()
            .ok_or(CircuitError::PipelineClosed)?
            .send(Job::Flush(ack_tx))
            .map_err(|_| CircuitError::PipelineClosed)?;
        ack_rx.recv().map_err(|_| CircuitError::PipelineClosed)
    }

    /// Drains the queue and stops the network thread.
    pub fn shutdown(mut self) {
        self.close();
    }

    fn close(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        self.close();
    }
}

fn network_loop(rx: Receiver<Job>, stage: NetworkStage, errors: Arc<AtomicU64>) {
    let _g = stage.profiler.enter();
    for job in rx {
        match job {
            Job::Send { to, cell } => {
                let _s = scope(labels::SEND_PACKET);
                if let Some(cost) = stage.send_cost {
                    let _c = scope(labels::SYNTHETIC_SEND);
                    std::thread::sleep(cost);
                }
                let sent = serialize_cell(&cell)
                    .ok()
                    .map(|bytes| stage.endpoint.send_to(to, bytes).is_ok());
                if sent != Some(true) {
                    errors.fetch_add(1, Ordering::Relaxed);
                }
            }
            Job::Local(data) => {
                let _s = scope(labels::SEND_PACKET);
                if let Some(cost) = stage.send_cost {
                    let _c = scope(labels::SYNTHETIC_SEND);
                    std::thread::sleep(cost);
                }
                let _d = scope(labels::DELIVER_LOCAL);
                stage.local.record(&data);
            }
            Job::Flush(ack) => {
                let _ = ack.send(());
            }
        }
    }
}
