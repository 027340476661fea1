//! Onion layer crypto, the binary address codec and the cell format.

pub mod address;
pub mod cell;
pub mod layer;

pub use address::{
    cached_decode_address, cached_encode_address, decode_address, encode_address, Address,
    AddressCache, AddressCodec, AddressError, ADDRESS_LEN,
};
pub use cell::{parse_cell, parse_header, serialize_cell, Cell, CellError, CellType, CELL_HEADER_LEN, MAX_CELL_PAYLOAD};
pub use layer::{
    max_plaintext_len, onion_encrypt, peel_layer, KeySide, LayerKey, OnionError, OnionPayload,
    KEY_LEN, LAYER_OVERHEAD,
};

use crate::nodes::{Circuit, CircuitError};
use crate::profiler::{labels, scope};

/// Innermost plaintext of a data cell: the exit's destination, then the
/// application bytes.
pub fn frame_exit_payload(destination: &[u8; ADDRESS_LEN], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ADDRESS_LEN + data.len());
    out.extend_from_slice(destination);
    out.extend_from_slice(data);
    out
}

/// Splits a framed exit payload into its destination bytes and data.
pub fn split_exit_payload(framed: &[u8]) -> Result<(&[u8], &[u8]), AddressError> {
    if framed.len() < ADDRESS_LEN {
        return Err(AddressError::Malformed(framed.len()));
    }
    Ok(framed.split_at(ADDRESS_LEN))
}

/// Largest application payload a circuit with `layers` layers can carry.
pub fn max_data_len(layers: usize) -> usize {
    max_plaintext_len(layers).saturating_sub(ADDRESS_LEN)
}

/// Builds the outbound data cell for `plaintext`: frames it with the
/// circuit's destination and wraps one layer per established hop.
pub fn crypto_out(
    circuit: &mut Circuit,
    plaintext: &[u8],
    codec: &AddressCodec,
) -> Result<Cell, CircuitError> {
    let _s = scope(labels::CRYPTO_OUT);
    if !circuit.is_established() {
        return Err(CircuitError::NotEstablished(circuit.id));
    }
    let destination = codec.encode(circuit.destination);
    let framed = frame_exit_payload(&destination, plaintext);
    let onion = onion_encrypt(&framed, &mut circuit.keys)?;
    Ok(Cell::new(circuit.id, CellType::Data, onion.to_wire()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::CircuitState;
    use std::net::Ipv4Addr;

    fn circuit(layers: usize) -> Circuit {
        let dest = Address::new(Ipv4Addr::new(10, 0, 0, 9), 9000);
        let path = (0..layers).map(|i| Address::localhost(7000 + i as u16)).collect();
        let mut c = Circuit::new(42, path, dest);
        for i in 0..layers {
            c.keys.push(LayerKey::new([i as u8 + 1; KEY_LEN], KeySide::Initiator));
        }
        if layers == 0 {
            c.local = Some(crate::nodes::LocalLoop::new(LayerKey::new([9; KEY_LEN], KeySide::Initiator)));
        }
        c.state = CircuitState::Established;
        c
    }

    #[test]
    fn zero_hop_cell_carries_framed_plaintext() {
        let mut c = circuit(0);
        let cell = crypto_out(&mut c, b"abc", &AddressCodec::Plain).unwrap();
        assert_eq!(cell.cell_type, CellType::Data);
        assert_eq!(cell.circuit_id, 42);
        assert_eq!(cell.payload, [&[0u8][..], &[10, 0, 0, 9, 0x23, 0x28], b"abc"].concat());
    }

    #[test]
    fn three_hop_cell_peels_to_plaintext() {
        let mut c = circuit(3);
        let mut peers: Vec<LayerKey> = c.keys.iter().map(LayerKey::peer).collect();
        let cell = crypto_out(&mut c, b"payload", &AddressCodec::Plain).unwrap();
        let mut onion = OnionPayload::from_wire(&cell.payload).unwrap();
        assert_eq!(onion.layers_remaining, 3);
        for k in peers.iter_mut() {
            onion = peel_layer(onion, k).unwrap();
        }
        let (dest, data) = split_exit_payload(&onion.body).unwrap();
        assert_eq!(decode_address(dest).unwrap(), c.destination);
        assert_eq!(data, b"payload");
    }

    #[test]
    fn destroyed_circuit_is_rejected() {
        let mut c = circuit(1);
        c.state = CircuitState::Destroyed;
        assert!(matches!(
            crypto_out(&mut c, b"x", &AddressCodec::Plain),
            Err(CircuitError::NotEstablished(42))
        ));
    }

    #[test]
    fn oversize_payload() {
        let mut c = circuit(1);
        assert!(crypto_out(&mut c, &vec![0; max_data_len(1)], &AddressCodec::Plain).is_ok());
        assert!(matches!(
            crypto_out(&mut c, &vec![0; max_data_len(1) + 1], &AddressCodec::Plain),
            Err(CircuitError::Onion(OnionError::Oversize { .. }))
        ));
    }

    #[test]
    fn flipped_bit_in_serialized_data_cell_fails_peel() {
        let mut c = circuit(2);
        let cell = crypto_out(&mut c, b"integrity", &AddressCodec::Plain).unwrap();
        let wire = serialize_cell(&cell).unwrap();
        for bit in CELL_HEADER_LEN * 8..wire.len() * 8 {
            let mut bad = wire.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            let parsed = parse_cell(&bad).unwrap();
            let onion = OnionPayload::from_wire(&parsed.payload).unwrap();
            assert!(peel_layer(onion, &mut c.keys[0].peer()).is_err(), "bit {bit}");
        }
    }
}
