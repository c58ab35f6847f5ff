//! glibc-style chunk headers and allocation geometry. Sensitive allocations
//! carry a landmark trailer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `prev_size` plus `size_field`, both 8 bytes wide.
pub const HEADER_SIZE: u64 = 16;

/// Landmark plus zero pad appended after a sensitive usable region.
pub const TRAILER_SIZE: u64 = 16;

pub const ALIGNMENT: u64 = 16;

/// The byte pattern written after every sensitive allocation.
pub const LANDMARK: [u8; 8] = [0xef, 0xef, 0xef, 0xef, 0xfe, 0xfe, 0xfe, 0xfe];

const FLAG_MASK: u64 = 0b111;
const PREV_INUSE: u64 = 0b001;
const IS_MMAPPED: u64 = 0b010;
const NON_MAIN_ARENA: u64 = 0b100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ChunkError {
    #[error("chunk size {0:#x} is not a multiple of 8")]
    SizeNotAligned(u64),
    #[error("zero-byte allocation request")]
    ZeroRequest,
    #[error("allocation request {0:#x} is too large")]
    RequestTooLarge(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkFlags {
    pub prev_inuse: bool,
    pub is_mmapped: bool,
    pub non_main_arena: bool,
}

impl ChunkFlags {
    pub const fn new(prev_inuse: bool, is_mmapped: bool, non_main_arena: bool) -> Self {
        Self {
            prev_inuse,
            is_mmapped,
            non_main_arena,
        }
    }

    fn bits(self) -> u64 {
        (if self.prev_inuse { PREV_INUSE } else { 0 })
            | (if self.is_mmapped { IS_MMAPPED } else { 0 })
            | (if self.non_main_arena {
                NON_MAIN_ARENA
            } else {
                0
            })
    }

    fn from_bits(raw: u64) -> Self {
        Self {
            prev_inuse: raw & PREV_INUSE != 0,
            is_mmapped: raw & IS_MMAPPED != 0,
            non_main_arena: raw & NON_MAIN_ARENA != 0,
        }
    }
}

/// Packs a chunk size and its flag bits into the raw `size` header word.
pub fn encode_size_field(size: u64, flags: ChunkFlags) -> Result<u64, ChunkError> {
    if size & FLAG_MASK != 0 {
        return Err(ChunkError::SizeNotAligned(size));
    }
    Ok(size | flags.bits())
}

pub fn decode_size_field(raw: u64) -> (u64, ChunkFlags) {
    (raw & !FLAG_MASK, ChunkFlags::from_bits(raw))
}

/// The two header words that precede every usable region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkHeader {
    pub prev_size: u64,
    pub size_field: u64,
}

impl ChunkHeader {
    pub fn new(prev_size: u64, size: u64, flags: ChunkFlags) -> Result<Self, ChunkError> {
        Ok(Self {
            prev_size,
            size_field: encode_size_field(size, flags)?,
        })
    }

    pub fn size(&self) -> u64 {
        decode_size_field(self.size_field).0
    }

    pub fn flags(&self) -> ChunkFlags {
        decode_size_field(self.size_field).1
    }

    pub fn to_bytes(&self) -> [u8; HEADER_SIZE as usize] {
        let mut out = [0u8; HEADER_SIZE as usize];
        out[..8].copy_from_slice(&self.prev_size.to_le_bytes());
        out[8..].copy_from_slice(&self.size_field.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_SIZE as usize]) -> Self {
        let mut word = [0u8; 8];
        word.copy_from_slice(&bytes[..8]);
        let prev_size = u64::from_le_bytes(word);
        word.copy_from_slice(&bytes[8..]);
        Self {
            prev_size,
            size_field: u64::from_le_bytes(word),
        }
    }
}

/// Geometry of one allocation. Only sensitive allocations get a trailer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub usable_size: u64,
    pub header_size: u64,
    pub trailer_size: u64,
    pub footprint: u64,
}

pub fn layout_for_request(request: u64, sensitive: bool) -> Result<Layout, ChunkError> {
    if request == 0 {
        return Err(ChunkError::ZeroRequest);
    }
    let usable_size = request
        .max(ALIGNMENT)
        .checked_next_multiple_of(ALIGNMENT)
        .ok_or(ChunkError::RequestTooLarge(request))?;
    let trailer_size = if sensitive { TRAILER_SIZE } else { 0 };
    let footprint = usable_size
        .checked_add(HEADER_SIZE + trailer_size)
        .ok_or(ChunkError::RequestTooLarge(request))?;
    Ok(Layout {
        usable_size,
        header_size: HEADER_SIZE,
        trailer_size,
        footprint,
    })
}

pub fn check_landmark(trailer: &[u8; 8]) -> bool {
    *trailer == LANDMARK
}

/// Full trailer image: landmark followed by eight zero bytes.
pub fn trailer_bytes() -> [u8; TRAILER_SIZE as usize] {
    let mut out = [0u8; TRAILER_SIZE as usize];
    out[..8].copy_from_slice(&LANDMARK);
    out
}
