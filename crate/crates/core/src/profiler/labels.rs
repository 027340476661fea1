//! Instrumentation labels used throughout the tunnel.

pub const ENCRYPT_STR: &str = "encrypt_str";
pub const DECRYPT_STR: &str = "decrypt_str";
pub const ENCODE_ADDRESS: &str = "encode_address";
pub const DECODE_ADDRESS: &str = "decode_address";
pub const CRYPTO_OUT: &str = "crypto_out";
pub const SEND_PACKET: &str = "send_packet";
pub const RELAY_PACKET: &str = "relay_packet";

/// The seven labels that make up the crypto and networking sets.
pub const TUNNEL_FUNCTIONS: [&str; 7] = [
    ENCRYPT_STR,
    DECRYPT_STR,
    ENCODE_ADDRESS,
    DECODE_ADDRESS,
    CRYPTO_OUT,
    SEND_PACKET,
    RELAY_PACKET,
];

pub const DISPATCH_DATAGRAM: &str = "dispatch_datagram";
pub const SEND_CONTROL: &str = "send_control";
pub const KEY_AGREEMENT: &str = "key_agreement";
pub const CREATE_CIRCUIT: &str = "create_circuit";
pub const DESTROY_CIRCUIT: &str = "destroy_circuit";
pub const SINK_RECEIVE: &str = "sink_receive";
pub const DELIVER_LOCAL: &str = "deliver_local";
pub const ENQUEUE_CELL: &str = "enqueue_cell";

/// Stand-in stage costs for pipeline experiments.
pub const SYNTHETIC_CRYPTO: &str = "synthetic_crypto";
pub const SYNTHETIC_SEND: &str = "synthetic_send";
pub const SYNTHETIC_OTHER: &str = "synthetic_other";
