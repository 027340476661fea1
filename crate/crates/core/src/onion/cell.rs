//! Cell wire format.
//!
//! ```text
//! byte 0      magic 0x54
//! bytes 1..4  circuit id, big-endian
//! byte 5      cell type
//! bytes 6..7  payload length, big-endian
//! bytes 8..   payload
//! ```

use thiserror::Error;

pub const CELL_MAGIC: u8 = 0x54;
pub const CELL_HEADER_LEN: usize = 8;
pub const MAX_CELL_PAYLOAD: usize = u16::MAX as usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CellError {
    #[error("malformed cell: buffer of {0} bytes is shorter than the header")]
    Short(usize),
    #[error("malformed cell: bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("malformed cell: unknown cell type {0}")]
    UnknownType(u8),
    #[error("malformed cell: header says {declared} payload bytes, buffer holds {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("cell payload of {0} bytes does not fit the 16-bit length field")]
    PayloadTooLong(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellType {
    Data = 0,
    Create = 1,
    Created = 2,
    Extend = 3,
    Extended = 4,
    Destroy = 5,
}

impl TryFrom<u8> for CellType {
    type Error = CellError;

    fn try_from(v: u8) -> Result<Self, CellError> {
        Ok(match v {
            0 => CellType::Data,
            1 => CellType::Create,
            2 => CellType::Created,
            3 => CellType::Extend,
            4 => CellType::Extended,
            5 => CellType::Destroy,
            other => return Err(CellError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub circuit_id: u32,
    pub cell_type: CellType,
    pub payload: Vec<u8>,
}

impl Cell {
    pub fn new(circuit_id: u32, cell_type: CellType, payload: Vec<u8>) -> Self {
        Cell {
            circuit_id,
            cell_type,
            payload,
        }
    }

    pub fn serialized_len(&self) -> usize {
        CELL_HEADER_LEN + self.payload.len()
    }
}

pub fn serialize_cell(cell: &Cell) -> Result<Vec<u8>, CellError> {
    let len = cell.payload.len();
    if len > MAX_CELL_PAYLOAD {
        return Err(CellError::PayloadTooLong(len));
    }
    let mut out = Vec::with_capacity(CELL_HEADER_LEN + len);
    out.push(CELL_MAGIC);
    out.extend_from_slice(&cell.circuit_id.to_be_bytes());
    out.push(cell.cell_type as u8);
    out.extend_from_slice(&(len as u16).to_be_bytes());
    out.extend_from_slice(&cell.payload);
    Ok(out)
}

/// Reads the header without copying the payload.
pub fn parse_header(bytes: &[u8]) -> Result<(u32, CellType, &[u8]), CellError> {
    if bytes.len() < CELL_HEADER_LEN {
        return Err(CellError::Short(bytes.len()));
    }
    if bytes[0] != CELL_MAGIC {
        return Err(CellError::BadMagic(bytes[0]));
    }
    let circuit_id = u32::from_be_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]);
    let cell_type = CellType::try_from(bytes[5])?;
    let declared = u16::from_be_bytes([bytes[6], bytes[7]]) as usize;
    let payload = &bytes[CELL_HEADER_LEN..];
    if payload.len() != declared {
        return Err(CellError::LengthMismatch {
            declared,
            actual: payload.len(),
        });
    }
    Ok((circuit_id, cell_type, payload))
}

pub fn parse_cell(bytes: &[u8]) -> Result<Cell, CellError> {
    let (circuit_id, cell_type, payload) = parse_header(bytes)?;
    Ok(Cell::new(circuit_id, cell_type, payload.to_vec()))
}
