//! Per-hop key agreement carried by CREATE/CREATED and EXTEND/EXTENDED.
//!
//! Both modes exchange one 32-byte share in each direction. With X25519 the
//! shares are ephemeral public keys; with a pre-shared key they are fresh
//! nonces mixed with the shared secret.

use rand::RngCore;
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use crate::onion::{KeySide, LayerKey, KEY_LEN};
use crate::profiler::{labels, scope};

pub const SHARE_LEN: usize = 32;

pub type Share = [u8; SHARE_LEN];

#[derive(Clone, PartialEq, Eq)]
pub enum KeyAgreement {
    X25519,
    PreShared([u8; KEY_LEN]),
}

impl std::fmt::Debug for KeyAgreement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KeyAgreement::X25519 => f.write_str("X25519"),
            KeyAgreement::PreShared(_) => f.write_str("PreShared(..)"),
        }
    }
}

/// Client state kept between sending a share and receiving the reply.
pub struct PendingHandshake {
    secret: [u8; 32],
    share: Share,
}

impl KeyAgreement {
    /// Pre-shared key derived from a run seed, for reproducible tests.
    pub fn pre_shared_from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"tunnelprof psk");
        h.update(seed.to_be_bytes());
        KeyAgreement::PreShared(h.finalize().into())
    }

    pub fn client_start(&self, rng: &mut impl RngCore) -> PendingHandshake {
        let _s = scope(labels::KEY_AGREEMENT);
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        let share = match self {
            KeyAgreement::X25519 => PublicKey::from(&StaticSecret::from(secret)).to_bytes(),
            KeyAgreement::PreShared(_) => secret,
        };
        PendingHandshake { secret, share }
    }

    /// Answers a client share; returns the reply share and the relay's key.
    pub fn server_respond(&self, client_share: &Share, rng: &mut impl RngCore) -> (Share, LayerKey) {
        let _s = scope(labels::KEY_AGREEMENT);
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        match self {
            KeyAgreement::X25519 => {
                let secret = StaticSecret::from(secret);
                let server_share = PublicKey::from(&secret).to_bytes();
                let shared = secret.diffie_hellman(&PublicKey::from(*client_share));
                let key = derive(b"x25519", shared.as_bytes(), client_share, &server_share);
                (server_share, LayerKey::new(key, KeySide::Responder))
            }
            KeyAgreement::PreShared(psk) => {
                let key = derive(b"psk", psk, client_share, &secret);
                (secret, LayerKey::new(key, KeySide::Responder))
            }
        }
    }

    pub fn client_finish(&self, pending: PendingHandshake, server_share: &Share) -> LayerKey {
        let _s = scope(labels::KEY_AGREEMENT);
        let key = match self {
            KeyAgreement::X25519 => {
                let secret = StaticSecret::from(pending.secret);
                let shared = secret.diffie_hellman(&PublicKey::from(*server_share));
                derive(b"x25519", shared.as_bytes(), &pending.share, server_share)
            }
            KeyAgreement::PreShared(psk) => derive(b"psk", psk, &pending.share, server_share),
        };
        LayerKey::new(key, KeySide::Initiator)
    }
}

impl PendingHandshake {
    pub fn share(&self) -> &Share {
        &self.share
    }
}

fn derive(mode: &[u8], secret: &[u8], client: &Share, server: &Share) -> [u8; KEY_LEN] {
    let mut h = Sha256::new();
    h.update(b"tunnelprof layer key ");
    h.update(mode);
    h.update(secret);
    h.update(client);
    h.update(server);
    h.finalize().into()
}
