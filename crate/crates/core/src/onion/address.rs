//! Six-byte binary address codec, plain and memoized.

use std::collections::HashMap;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::profiler::{labels, scope};

pub const ADDRESS_LEN: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressError {
    #[error("malformed address: expected {ADDRESS_LEN} bytes, got {0}")]
    Malformed(usize),
    #[error("cannot parse address `{0}`")]
    Parse(String),
}

/// An IPv4 host and port.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address {
    pub host: Ipv4Addr,
    pub port: u16,
}

impl Address {
    pub const fn new(host: Ipv4Addr, port: u16) -> Self {
        Address { host, port }
    }

    pub const fn localhost(port: u16) -> Self {
        Address::new(Ipv4Addr::LOCALHOST, port)
    }

    pub fn socket_addr(self) -> SocketAddr {
        SocketAddr::V4(SocketAddrV4::new(self.host, self.port))
    }

    pub fn from_socket_addr(addr: SocketAddr) -> Option<Self> {
        match addr {
            SocketAddr::V4(v4) => Some(Address::new(*v4.ip(), v4.port())),
            SocketAddr::V6(_) => None,
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Address {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v4: SocketAddrV4 = s.parse().map_err(|_| AddressError::Parse(s.to_string()))?;
        Ok(Address::new(*v4.ip(), v4.port()))
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[inline]
fn to_bytes(addr: Address) -> [u8; ADDRESS_LEN] {
    let o = addr.host.octets();
    let p = addr.port.to_be_bytes();
    [o[0], o[1], o[2], o[3], p[0], p[1]]
}

#[inline]
fn from_bytes(bytes: &[u8]) -> Result<Address, AddressError> {
    let b: &[u8; ADDRESS_LEN] = bytes
        .try_into()
        .map_err(|_| AddressError::Malformed(bytes.len()))?;
    Ok(Address::new(
        Ipv4Addr::new(b[0], b[1], b[2], b[3]),
        u16::from_be_bytes([b[4], b[5]]),
    ))
}

/// Host octets in order, then the port big-endian.
pub fn encode_address(addr: Address) -> [u8; ADDRESS_LEN] {
    let _s = scope(labels::ENCODE_ADDRESS);
    to_bytes(addr)
}

pub fn decode_address(bytes: &[u8]) -> Result<Address, AddressError> {
    let _s = scope(labels::DECODE_ADDRESS);
    from_bytes(bytes)
}

/// Memoizes both directions of the codec. An encode also seeds the reverse
/// map, so decoding bytes produced here is a hit.
#[derive(Debug, Default)]
pub struct AddressCache {
    forward: RwLock<HashMap<Address, [u8; ADDRESS_LEN]>>,
    reverse: RwLock<HashMap<[u8; ADDRESS_LEN], Address>>,
    conversions: AtomicU64,
    hits: AtomicU64,
}

impl AddressCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of times the underlying conversion actually ran.
    pub fn conversions(&self) -> u64 {
        self.conversions.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.forward.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn encode(&self, addr: Address) -> [u8; ADDRESS_LEN] {
        if let Some(b) = self.forward.read().unwrap_or_else(|e| e.into_inner()).get(&addr) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return *b;
        }
        let mut forward = self.forward.write().unwrap_or_else(|e| e.into_inner());
        if let Some(b) = forward.get(&addr) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return *b;
        }
        let bytes = to_bytes(addr);
        self.conversions.fetch_add(1, Ordering::Relaxed);
        forward.insert(addr, bytes);
        // Lock order is always forward then reverse.
        self.reverse
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(bytes, addr);
        bytes
    }

    fn decode(&self, bytes: &[u8]) -> Result<Address, AddressError> {
        let key: [u8; ADDRESS_LEN] = bytes
            .try_into()
            .map_err(|_| AddressError::Malformed(bytes.len()))?;
        if let Some(a) = self.reverse.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*a);
        }
        let mut forward = self.forward.write().unwrap_or_else(|e| e.into_inner());
        let mut reverse = self.reverse.write().unwrap_or_else(|e| e.into_inner());
        if let Some(a) = reverse.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*a);
        }
        let addr = from_bytes(&key)?;
        self.conversions.fetch_add(1, Ordering::Relaxed);
        reverse.insert(key, addr);
        forward.insert(addr, key);
        Ok(addr)
    }
}

pub fn cached_encode_address(addr: Address, cache: &AddressCache) -> [u8; ADDRESS_LEN] {
    let _s = scope(labels::ENCODE_ADDRESS);
    cache.encode(addr)
}

pub fn cached_decode_address(bytes: &[u8], cache: &AddressCache) -> Result<Address, AddressError> {
    let _s = scope(labels::DECODE_ADDRESS);
    cache.decode(bytes)
}

/// The codec a node uses: direct conversion or a shared cache.
#[derive(Debug, Clone, Default)]
pub enum AddressCodec {
    #[default]
    Plain,
    Cached(Arc<AddressCache>),
}

impl AddressCodec {
    pub fn cached() -> Self {
        AddressCodec::Cached(Arc::new(AddressCache::new()))
    }

    pub fn encode(&self, addr: Address) -> [u8; ADDRESS_LEN] {
        match self {
            AddressCodec::Plain => encode_address(addr),
            AddressCodec::Cached(cache) => cached_encode_address(addr, cache),
        }
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Address, AddressError> {
        match self {
            AddressCodec::Plain => decode_address(bytes),
            AddressCodec::Cached(cache) => cached_decode_address(bytes, cache),
        }
    }
}
