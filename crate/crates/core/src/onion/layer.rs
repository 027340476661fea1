//! Layered authenticated encryption.
//!
//! Each layer is ChaCha20-Poly1305 under one hop's key. A layer on the wire is
//! the sender's 8-byte big-endian nonce counter, the ciphertext, then the
//! 16-byte tag. The onion as a whole carries a one-byte count of remaining
//! layers in front, which is bound into every layer as associated data.

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use thiserror::Error;

use crate::profiler::{labels, scope};

pub const KEY_LEN: usize = 32;
pub const NONCE_COUNTER_LEN: usize = 8;
pub const TAG_LEN: usize = 16;
/// Bytes added by one layer.
pub const LAYER_OVERHEAD: usize = NONCE_COUNTER_LEN + TAG_LEN;
/// Largest serialized onion: it must fit a cell payload.
pub const MAX_ONION_LEN: usize = u16::MAX as usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OnionError {
    #[error("payload of {len} bytes exceeds the {max}-byte budget for {layers} layers")]
    Oversize { len: usize, max: usize, layers: usize },
    #[error("authentication failed")]
    Authentication,
    #[error("no layer left to peel")]
    NoLayer,
    #[error("nonce {nonce} replayed (expected at least {expected})")]
    Replay { nonce: u64, expected: u64 },
    #[error("nonce counter exhausted")]
    NonceExhausted,
    #[error("empty onion")]
    Empty,
    #[error("too many layers: {0}")]
    TooManyLayers(usize),
}

/// Which end of a hop's key a holder is. The two ends encrypt with distinct
/// nonce prefixes so their counters never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeySide {
    Initiator,
    Responder,
}

impl KeySide {
    fn prefix(self) -> u8 {
        match self {
            KeySide::Initiator => 0,
            KeySide::Responder => 1,
        }
    }

    pub fn peer(self) -> KeySide {
        match self {
            KeySide::Initiator => KeySide::Responder,
            KeySide::Responder => KeySide::Initiator,
        }
    }
}

/// One hop's symmetric key plus its per-direction nonce counters.
#[derive(Clone)]
pub struct LayerKey {
    key: [u8; KEY_LEN],
    cipher: ChaCha20Poly1305,
    side: KeySide,
    send_nonce_counter: u64,
    recv_nonce_counter: u64,
}

impl std::fmt::Debug for LayerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerKey")
            .field("fingerprint", &format_args!("{:02x}{:02x}{:02x}{:02x}", self.key[0], self.key[1], self.key[2], self.key[3]))
            .field("side", &self.side)
            .field("send_nonce_counter", &self.send_nonce_counter)
            .field("recv_nonce_counter", &self.recv_nonce_counter)
            .finish()
    }
}

impl LayerKey {
    pub fn new(key: [u8; KEY_LEN], side: KeySide) -> Self {
        LayerKey {
            cipher: ChaCha20Poly1305::new(Key::from_slice(&key)),
            key,
            side,
            send_nonce_counter: 0,
            recv_nonce_counter: 0,
        }
    }

    /// The same secret held by the other end, with fresh counters.
    pub fn peer(&self) -> LayerKey {
        LayerKey::new(self.key, self.side.peer())
    }

    pub fn side(&self) -> KeySide {
        self.side
    }

    pub fn key_bytes(&self) -> &[u8; KEY_LEN] {
        &self.key
    }

    /// Next counter this key will use when sealing.
    pub fn send_nonce_counter(&self) -> u64 {
        self.send_nonce_counter
    }

    /// Smallest counter this key will still accept when opening.
    pub fn recv_nonce_counter(&self) -> u64 {
        self.recv_nonce_counter
    }

    fn nonce(side: KeySide, counter: u64) -> Nonce {
        let mut n = [0u8; 12];
        n[0] = side.prefix();
        n[4..].copy_from_slice(&counter.to_be_bytes());
        *Nonce::from_slice(&n)
    }

    /// Encrypts `plaintext` as one layer: counter || ciphertext || tag.
    pub fn seal(&mut self, aad: &[u8], plaintext: &[u8]) -> Result<Vec<u8>, OnionError> {
        let _s = scope(labels::ENCRYPT_STR);
        let counter = self.send_nonce_counter;
        let next = counter.checked_add(1).ok_or(OnionError::NonceExhausted)?;
        let mut out = Vec::with_capacity(plaintext.len() + LAYER_OVERHEAD);
        out.extend_from_slice(&counter.to_be_bytes());
        out.extend_from_slice(plaintext);
        let tag = self
            .cipher
            .encrypt_in_place_detached(
                &Self::nonce(self.side, counter),
                aad,
                &mut out[NONCE_COUNTER_LEN..],
            )
            .map_err(|_| OnionError::Authentication)?;
        out.extend_from_slice(&tag);
        self.send_nonce_counter = next;
        Ok(out)
    }

    /// Reverses [`LayerKey::seal`] for a layer produced by the peer. The
    /// layer's buffer is reused for the plaintext.
    pub fn open(&mut self, aad: &[u8], mut layer: Vec<u8>) -> Result<Vec<u8>, OnionError> {
        let _s = scope(labels::DECRYPT_STR);
        if layer.len() < LAYER_OVERHEAD {
            return Err(OnionError::Authentication);
        }
        let mut ctr = [0u8; NONCE_COUNTER_LEN];
        ctr.copy_from_slice(&layer[..NONCE_COUNTER_LEN]);
        let counter = u64::from_be_bytes(ctr);
        if counter < self.recv_nonce_counter {
            return Err(OnionError::Replay {
                nonce: counter,
                expected: self.recv_nonce_counter,
            });
        }
        let tag_at = layer.len() - TAG_LEN;
        let tag = *Tag::from_slice(&layer[tag_at..]);
        self.cipher
            .decrypt_in_place_detached(
                &Self::nonce(self.side.peer(), counter),
                aad,
                &mut layer[NONCE_COUNTER_LEN..tag_at],
                &tag,
            )
            .map_err(|_| OnionError::Authentication)?;
        self.recv_nonce_counter = counter + 1;
        layer.truncate(tag_at);
        layer.drain(..NONCE_COUNTER_LEN);
        Ok(layer)
    }
}

/// An onion with `layers_remaining` layers still wrapped around its payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnionPayload {
    pub layers_remaining: u8,
    pub body: Vec<u8>,
}

impl OnionPayload {
    pub fn plaintext(body: Vec<u8>) -> Self {
        OnionPayload {
            layers_remaining: 0,
            body,
        }
    }

    pub fn wire_len(&self) -> usize {
        1 + self.body.len()
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(self.layers_remaining);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, OnionError> {
        let (&layers, body) = bytes.split_first().ok_or(OnionError::Empty)?;
        Ok(OnionPayload {
            layers_remaining: layers,
            body: body.to_vec(),
        })
    }
}

/// Largest plaintext that still fits after wrapping `layers` layers.
pub fn max_plaintext_len(layers: usize) -> usize {
    (MAX_ONION_LEN - 1).saturating_sub(layers * LAYER_OVERHEAD)
}

/// Wraps `plaintext` so that `keys[0]` (hop 1) is peeled first and the last
/// key is peeled last.
pub fn onion_encrypt(plaintext: &[u8], keys: &mut [LayerKey]) -> Result<OnionPayload, OnionError> {
    let layers = keys.len();
    if layers > u8::MAX as usize {
        return Err(OnionError::TooManyLayers(layers));
    }
    let max = max_plaintext_len(layers);
    if plaintext.len() > max || layers * LAYER_OVERHEAD > MAX_ONION_LEN - 1 {
        return Err(OnionError::Oversize {
            len: plaintext.len(),
            max,
            layers,
        });
    }
    let mut body = plaintext.to_vec();
    for (i, key) in keys.iter_mut().enumerate().rev() {
        let remaining = (layers - i) as u8;
        body = key.seal(&[remaining], &body)?;
    }
    Ok(OnionPayload {
        layers_remaining: layers as u8,
        body,
    })
}

/// Removes the outermost layer.
pub fn peel_layer(onion: OnionPayload, key: &mut LayerKey) -> Result<OnionPayload, OnionError> {
    if onion.layers_remaining == 0 {
        return Err(OnionError::NoLayer);
    }
    let body = key.open(&[onion.layers_remaining], onion.body)?;
    Ok(OnionPayload {
        layers_remaining: onion.layers_remaining - 1,
        body,
    })
}
