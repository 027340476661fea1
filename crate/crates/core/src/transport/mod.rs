//! Datagram transports: a deterministic in-process router and UDP on localhost.
//!
//! Both carry exactly the bytes handed to [`Endpoint::send_to`]; sending is
//! blind, so a datagram that cannot be delivered is counted and forgotten.

mod inproc;
mod udp;

pub use inproc::{InProcEndpoint, InProcNetwork};
pub use udp::{UdpEndpoint, UdpTransport};

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::onion::Address;

/// Largest payload a UDP/IPv4 datagram can carry.
pub const MAX_DATAGRAM: usize = 65_507;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("address {0} is already bound")]
    AddressInUse(Address),
    #[error("datagram of {0} bytes exceeds the {MAX_DATAGRAM}-byte limit")]
    Oversize(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} is not an IPv4 socket address")]
    NotIpv4(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub source: Address,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointStats {
    pub sent: u64,
    pub received: u64,
    /// Datagrams this endpoint knows it failed to hand over.
    pub dropped: u64,
}

pub trait Endpoint: Send + Sync {
    fn local_address(&self) -> Address;

    fn send_to(&self, dest: Address, payload: Vec<u8>) -> Result<(), TransportError>;

    fn try_recv(&self) -> Option<Datagram>;

    fn recv_timeout(&self, timeout: Duration) -> Option<Datagram>;

    fn stats(&self) -> EndpointStats;
}

pub trait Transport: Send + Sync {
    /// Binds `address`. Port 0 picks a free port.
    fn bind(&self, address: Address) -> Result<Arc<dyn Endpoint>, TransportError>;

    /// Datagrams the transport itself discarded (e.g. no such destination).
    fn dropped(&self) -> u64;

    /// Datagrams accepted for delivery but not yet received. `None` when the
    /// transport cannot tell.
    fn in_flight(&self) -> Option<u64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Udp,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inproc" => Ok(TransportKind::Inproc),
            "udp" => Ok(TransportKind::Udp),
            other => Err(format!("unknown transport `{other}` (expected inproc or udp)")),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::Inproc => "inproc",
            TransportKind::Udp => "udp",
        })
    }
}
