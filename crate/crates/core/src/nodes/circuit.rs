use thiserror::Error;

use crate::onion::{Address, AddressError, CellError, LayerKey, OnionError};
use crate::transport::TransportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CircuitState {
    Building,
    Established,
    Destroyed,
}

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("circuit {0} is not established")]
    NotEstablished(u32),
    #[error("no circuit with id {0}")]
    Unknown(u32),
    #[error("circuit build failed at hop {hop_index}")]
    BuildFailure { hop_index: usize },
    #[error("circuits have at most {max} hops, got {got}")]
    TooManyHops { got: usize, max: usize },
    #[error(transparent)]
    Onion(#[from] OnionError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("send pipeline has shut down")]
    PipelineClosed,
}

/// Both ends of the single key a 0-hop circuit uses to encrypt and
/// immediately decrypt on the seed itself.
#[derive(Debug, Clone)]
pub struct LocalLoop {
    pub key: LayerKey,
    pub loopback: LayerKey,
}

impl LocalLoop {
    pub fn new(key: LayerKey) -> Self {
        let loopback = key.peer();
        LocalLoop { key, loopback }
    }
}

/// The seed's view of one circuit.
///
/// `path` lists the planned hops; `keys` holds one key per hop whose
/// handshake has completed, in hop order. A 0-hop circuit has an empty path
/// and a [`LocalLoop`] instead.
#[derive(Debug, Clone)]
pub struct Circuit {
    /// Label on the link between the seed and the first hop.
    pub id: u32,
    pub path: Vec<Address>,
    pub destination: Address,
    pub keys: Vec<LayerKey>,
    pub local: Option<LocalLoop>,
    pub state: CircuitState,
}

impl Circuit {
    pub fn new(id: u32, path: Vec<Address>, destination: Address) -> Self {
        Circuit {
            id,
            path,
            destination,
            keys: Vec::new(),
            local: None,
            state: CircuitState::Building,
        }
    }

    pub fn hop_count(&self) -> usize {
        self.path.len()
    }

    pub fn established_hops(&self) -> usize {
        self.keys.len()
    }

    pub fn is_established(&self) -> bool {
        self.state == CircuitState::Established
    }

    pub fn first_hop(&self) -> Option<Address> {
        self.path.first().copied()
    }
}
