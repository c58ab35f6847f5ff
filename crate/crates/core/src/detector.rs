//! Per-access corruption checks and landmark scanning.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chunk;
use crate::heap::{ChunkRecord, Classification, Heap};
use crate::program::{FieldRef, Site};
use crate::typedb::TypeDb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorruptionKind {
    InterChunk,
    IntraChunk,
    UseAfterFree,
    LandmarkViolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Read,
    Write,
}

/// One executed instruction, as named in reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrRef {
    pub seq: u64,
    pub site: Site,
    /// `fn:label`
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub kind: CorruptionKind,
    pub fault_addr: u64,
    pub last_valid: Option<u64>,
    pub instr: Option<InstrRef>,
    pub chunk: Option<ChunkRecord>,
    pub target_sensitive: bool,
    pub direction: Direction,
    /// The full access range `[addr, addr+len)`.
    pub access: (u64, u64),
    /// The sub-range the access was entitled to touch, if any.
    pub permitted: Option<(u64, u64)>,
}

impl CorruptionReport {
    /// Addresses of the access that fall outside its permitted extent.
    pub fn corrupted_addrs(&self) -> Vec<u64> {
        let (addr, len) = self.access;
        (addr..addr.saturating_add(len))
            .filter(|a| !matches!(self.permitted, Some((lo, hi)) if *a >= lo && *a < hi))
            .collect()
    }

    pub fn chunk_offset(&self) -> Option<u64> {
        self.chunk
            .as_ref()
            .and_then(|c| self.fault_addr.checked_sub(c.base))
    }
}

impl fmt::Display for CorruptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = self.instr.as_ref().map_or("?", |i| i.label.as_str());
        let suffix = match self.direction {
            Direction::Read => " (read)",
            Direction::Write => "",
        };
        match self.kind {
            CorruptionKind::InterChunk => write!(
                f,
                "[!] heap overflow ({:#x}, {:#x}) at {}{}",
                self.last_valid.unwrap_or(self.fault_addr.wrapping_sub(1)),
                self.fault_addr,
                at,
                suffix
            ),
            CorruptionKind::IntraChunk => write!(
                f,
                "[!] intra-chunk overflow ({:#x}, {:#x}) at {}{}",
                self.chunk.as_ref().map_or(0, |c| c.base),
                self.fault_addr,
                at,
                suffix
            ),
            CorruptionKind::UseAfterFree => write!(
                f,
                "[!] use after free ({:#x}, {:#x}) at {}{}",
                self.chunk.as_ref().map_or(0, |c| c.base),
                self.fault_addr,
                at,
                suffix
            ),
            CorruptionKind::LandmarkViolation => write!(
                f,
                "[!] landmark corrupted ({:#x}, {:#x})",
                self.chunk.as_ref().map_or(0, |c| c.base),
                self.fault_addr
            ),
        }
    }
}

fn classify_access<'h>(
    heap: &'h Heap,
    addr: u64,
    len: u64,
    instr: &InstrRef,
    direction: Direction,
) -> Result<Option<&'h ChunkRecord>, Box<CorruptionReport>> {
    let len = len.max(1);
    match heap.classify(addr, len) {
        Classification::Sensitive(r) | Classification::NonSensitive(r) => Ok(Some(r)),
        Classification::Freed(r) => Err(Box::new(CorruptionReport {
            kind: CorruptionKind::UseAfterFree,
            fault_addr: addr.max(r.base),
            last_valid: None,
            instr: Some(instr.clone()),
            chunk: Some(r.clone()),
            target_sensitive: r.sensitive,
            direction,
            access: (addr, len),
            permitted: None,
        })),
        Classification::Unowned => {
            let tables = heap.tables();
            let (fault_addr, implicated) = match tables.containing(addr) {
                Some(r) => (r.end(), Some(r)),
                None => (addr, tables.preceding(addr)),
            };
            let permitted = tables
                .containing(addr)
                .filter(|r| tables.is_live(r.base))
                .map(|r| (r.base, r.end()));
            Err(Box::new(CorruptionReport {
                kind: CorruptionKind::InterChunk,
                fault_addr,
                last_valid: Some(fault_addr.wrapping_sub(1)),
                instr: Some(instr.clone()),
                chunk: implicated.cloned(),
                target_sensitive: implicated.is_some_and(|r| r.sensitive),
                direction,
                access: (addr, len),
                permitted,
            }))
        }
    }
}

/// Checks a write of `len` bytes at `addr`. Priority is use-after-free,
/// then inter-chunk, then intra-chunk.
pub fn check_store(
    heap: &Heap,
    db: &TypeDb,
    addr: u64,
    len: u64,
    prov: Option<&FieldRef>,
    instr: &InstrRef,
) -> Option<CorruptionReport> {
    let record = match classify_access(heap, addr, len, instr, Direction::Write) {
        Ok(r) => r?,
        Err(report) => return Some(*report),
    };
    let prov = prov?;
    record.type_id.as_ref()?;
    let offset = addr - record.base;
    let def = db.get(&prov.ty)?;
    let field = def.field(&prov.field)?;
    if !db.crosses_field(&prov.ty, &prov.field, offset, len).ok()? {
        return None;
    }
    let fault_offset = if offset < field.offset {
        offset
    } else {
        field.end()
    };
    let fault_addr = record.base + fault_offset;
    Some(CorruptionReport {
        kind: CorruptionKind::IntraChunk,
        fault_addr,
        last_valid: Some(fault_addr.wrapping_sub(1)),
        instr: Some(instr.clone()),
        chunk: Some(record.clone()),
        target_sensitive: record.sensitive,
        direction: Direction::Write,
        access: (addr, len),
        permitted: Some((record.base + field.offset, record.base + field.end())),
    })
}

/// Reads are classified like writes, but field crossings are not flagged.
pub fn check_load(
    heap: &Heap,
    addr: u64,
    width: u64,
    instr: &InstrRef,
) -> Option<CorruptionReport> {
    classify_access(heap, addr, width, instr, Direction::Read)
        .err()
        .map(|r| *r)
}

/// One violation per live sensitive chunk whose trailer no longer holds the
/// landmark followed by zero padding.
pub fn scan_landmarks(heap: &Heap) -> Vec<CorruptionReport> {
    let expected = chunk::trailer_bytes();
    heap.tables()
        .sensitive()
        .filter(|r| r.landmark)
        .filter_map(|r| {
            let trailer = heap.trailer_of(r);
            let first_bad = trailer
                .iter()
                .zip(expected.iter())
                .position(|(a, b)| a != b)?;
            Some(CorruptionReport {
                kind: CorruptionKind::LandmarkViolation,
                fault_addr: r.end() + first_bad as u64,
                last_valid: None,
                instr: None,
                chunk: Some(r.clone()),
                target_sensitive: true,
                direction: Direction::Write,
                access: (r.end(), chunk::TRAILER_SIZE),
                permitted: None,
            })
        })
        .collect()
}
