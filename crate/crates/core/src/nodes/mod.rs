//! Seed, relay, exit and sink nodes.

mod circuit;
mod handshake;
mod pipeline;
mod relay;
mod seed;
mod sink;

pub use circuit::{Circuit, CircuitError, CircuitState, LocalLoop};
pub use handshake::{KeyAgreement, PendingHandshake, Share, SHARE_LEN};
pub use pipeline::{Pipeline, DEFAULT_QUEUE_CAPACITY};
pub use relay::{RelayCounters, RelayNode, RelayTableEntry};
pub use seed::{max_payload_len, DestroyAck, SeedCounters, SeedNode, SyntheticCosts};
pub use sink::{SinkCounters, SinkNode, SinkTally};

use serde::{Deserialize, Serialize};

/// Longest circuit a seed will build.
pub const MAX_HOPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seed,
    Relay,
    Exit,
    Sink,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Seed, Role::Relay, Role::Exit, Role::Sink];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Seed => "seed",
            Role::Relay => "relay",
            Role::Exit => "exit",
            Role::Sink => "sink",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    /// Something happened, or may still happen shortly.
    Busy,
    /// Nothing is left to deliver or process.
    Idle,
}

/// Gives the rest of the network a chance to run while a node waits for
/// replies.
pub trait Settle {
    fn step(&mut self) -> Progress;
}

/// For nodes that never need the rest of the network, e.g. 0-hop circuits.
pub struct Detached;

impl Settle for Detached {
    fn step(&mut self) -> Progress {
        Progress::Idle
    }
}
