//! Simulated flat heap: a bump allocator with allocation and free tables.
//! A runtime switch decides which allocations are sensitive.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk::{self, ChunkError, ChunkFlags, ChunkHeader, HEADER_SIZE};

pub const DEFAULT_HEAP_BASE: u64 = 0x2088010;
pub const DEFAULT_HEAP_MAX: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("zero-byte allocation request")]
    ZeroRequest,
    #[error("heap exhausted: request {request:#x} does not fit")]
    HeapExhausted { request: u64 },
    #[error("calloc({count}, {size}) overflows")]
    MulOverflow { count: u64, size: u64 },
    #[error("free of {0:#x}, which is not a live allocation")]
    InvalidFree(u64),
    #[error("double free of {0:#x}")]
    DoubleFree(u64),
    #[error("heap base {0:#x} must be 16-aligned and at least 0x10")]
    BadBase(u64),
}

impl From<ChunkError> for HeapError {
    fn from(e: ChunkError) -> Self {
        match e {
            ChunkError::ZeroRequest => HeapError::ZeroRequest,
            ChunkError::RequestTooLarge(request) | ChunkError::SizeNotAligned(request) => {
                HeapError::HeapExhausted { request }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapConfig {
    /// Address returned by the first allocation.
    pub base: u64,
    /// Upper bound on the total footprint handed out.
    pub max_bytes: u64,
    /// Whether sensitive allocations carry a landmark trailer.
    pub landmarks: bool,
}

impl Default for HeapConfig {
    fn default() -> Self {
        Self {
            base: DEFAULT_HEAP_BASE,
            max_bytes: DEFAULT_HEAP_MAX,
            landmarks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub base: u64,
    pub usable: u64,
    pub sensitive: bool,
    /// True when a landmark trailer follows the usable region.
    pub landmark: bool,
    pub type_id: Option<String>,
    pub alloc_site: String,
    pub seq: u64,
}

impl ChunkRecord {
    pub fn end(&self) -> u64 {
        self.base + self.usable
    }

    pub fn trailer_len(&self) -> u64 {
        if self.landmark {
            chunk::TRAILER_SIZE
        } else {
            0
        }
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.saturating_add(len) <= self.end()
    }

    pub fn intersects(&self, addr: u64, len: u64) -> bool {
        addr < self.end() && addr.saturating_add(len) > self.base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Status {
    Live,
    Freed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Entry {
    record: ChunkRecord,
    status: Status,
}

/// Allocation tables split by sensitivity, plus the free table.
///
/// Records are indexed by base address; the free table additionally keeps
/// the order in which chunks were released.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationTables {
    entries: BTreeMap<u64, Entry>,
    free_order: Vec<u64>,
}

impl AllocationTables {
    pub fn sensitive(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.live().filter(|r| r.sensitive)
    }

    pub fn non_sensitive(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.live().filter(|r| !r.sensitive)
    }

    /// Live records in address order.
    pub fn live(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.entries
            .values()
            .filter(|e| e.status == Status::Live)
            .map(|e| &e.record)
    }

    /// Freed records in release order.
    pub fn free(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.free_order.iter().map(|b| &self.entries[b].record)
    }

    /// Every record ever allocated, in address order.
    pub fn all(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.entries.values().map(|e| &e.record)
    }

    pub fn is_live(&self, base: u64) -> bool {
        matches!(self.entries.get(&base), Some(e) if e.status == Status::Live)
    }

    pub fn is_freed(&self, base: u64) -> bool {
        matches!(self.entries.get(&base), Some(e) if e.status == Status::Freed)
    }

    pub fn get(&self, base: u64) -> Option<&ChunkRecord> {
        self.entries.get(&base).map(|e| &e.record)
    }

    /// Records whose usable regions intersect `[addr, addr+len)`, with their
    /// liveness.
    fn intersecting(&self, addr: u64, len: u64) -> impl Iterator<Item = (&ChunkRecord, bool)> {
        let hi = addr.saturating_add(len);
        // Usable regions are disjoint and allocated in address order, so
        // their ends are sorted as well.
        self.entries
            .range(..hi)
            .rev()
            .map(|(_, e)| e)
            .take_while(move |e| e.record.end() > addr)
            .map(|e| (&e.record, e.status == Status::Live))
    }

    /// The record whose usable region contains `addr`, live or freed.
    pub fn containing(&self, addr: u64) -> Option<&ChunkRecord> {
        self.entries
            .range(..=addr)
            .next_back()
            .map(|(_, e)| &e.record)
            .filter(|r| r.end() > addr)
    }

    /// The closest record ending at or below `addr`.
    pub fn preceding(&self, addr: u64) -> Option<&ChunkRecord> {
        self.entries
            .range(..=addr)
            .rev()
            .map(|(_, e)| &e.record)
            .find(|r| r.end() <= addr)
    }
}

/// Where an address range falls relative to the tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification<'a> {
    Sensitive(&'a ChunkRecord),
    NonSensitive(&'a ChunkRecord),
    Freed(&'a ChunkRecord),
    Unowned,
}

impl Classification<'_> {
    pub fn live_record(&self) -> Option<&ChunkRecord> {
        match self {
            Classification::Sensitive(r) | Classification::NonSensitive(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeapEventKind {
    /// `TA <-`: inserted into an allocation table.
    Allocate,
    /// `TA ->`: removed from an allocation table.
    Release,
    /// `TF <-`: inserted into the free table.
    FreeInsert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapEvent {
    pub kind: HeapEventKind,
    pub base: u64,
    pub size: u64,
    pub sensitive: bool,
}

impl fmt::Display for HeapEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            HeapEventKind::Allocate => "TA <-",
            HeapEventKind::Release => "TA ->",
            HeapEventKind::FreeInsert => "TF <-",
        };
        write!(f, "[+] {} ({:#x}, {:#x})", tag, self.base, self.size)
    }
}

/// Final table listing in the `Free table:` / `Allocation table:` layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDump {
    pub free: Vec<(u64, u64)>,
    pub allocated: Vec<(u64, u64)>,
}

impl fmt::Display for TableDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn section(f: &mut fmt::Formatter<'_>, title: &str, rows: &[(u64, u64)]) -> fmt::Result {
            writeln!(f)?;
            writeln!(f, "{title}")?;
            if rows.is_empty() {
                writeln!(f, "Empty")?;
            }
            for (base, size) in rows {
                writeln!(f, "({base:#x}, {size:#x})")?;
            }
            Ok(())
        }
        section(f, "Free table:", &self.free)?;
        section(f, "Allocation table:", &self.allocated)
    }
}

/// The heap image plus its bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heap {
    config: HeapConfig,
    /// Address of `bytes[0]`; the first chunk header lives here.
    start: u64,
    bytes: Vec<u8>,
    /// Offset of the next chunk header from `start`.
    cursor: u64,
    tables: AllocationTables,
    sensitive_switch: bool,
    next_seq: u64,
    #[serde(skip)]
    events: Vec<HeapEvent>,
}

impl Heap {
    pub fn new(config: HeapConfig) -> Result<Self, HeapError> {
        if !config.base.is_multiple_of(chunk::ALIGNMENT) || config.base < HEADER_SIZE {
            return Err(HeapError::BadBase(config.base));
        }
        Ok(Self {
            config,
            start: config.base - HEADER_SIZE,
            bytes: Vec::new(),
            cursor: 0,
            tables: AllocationTables::default(),
            sensitive_switch: false,
            next_seq: 0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &HeapConfig {
        &self.config
    }

    pub fn tables(&self) -> &AllocationTables {
        &self.tables
    }

    pub fn sensitive_switch(&self) -> bool {
        self.sensitive_switch
    }

    /// First address of the image (the first chunk header).
    pub fn image_start(&self) -> u64 {
        self.start
    }

    /// One past the last byte handed out by the bump allocator.
    pub fn top(&self) -> u64 {
        self.start + self.cursor
    }

    pub fn image(&self) -> &[u8] {
        &self.bytes
    }

    pub fn take_events(&mut self) -> Vec<HeapEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn toggle_sensitive(&mut self, on: bool) {
        self.sensitive_switch = on;
    }

    pub fn alloc(
        &mut self,
        size: u64,
        site: &str,
        type_id: Option<String>,
    ) -> Result<u64, HeapError> {
        let sensitive = self.sensitive_switch;
        let landmark = sensitive && self.config.landmarks;
        let layout = chunk::layout_for_request(size, landmark)?;
        let header_at = self.cursor;
        let new_cursor = header_at
            .checked_add(layout.footprint)
            .filter(|c| *c <= self.config.max_bytes)
            .ok_or(HeapError::HeapExhausted { request: size })?;
        self.cursor = new_cursor;
        if (self.bytes.len() as u64) < new_cursor {
            self.bytes.resize(new_cursor as usize, 0);
        }

        let header = ChunkHeader::new(0, layout.footprint, ChunkFlags::new(true, false, false))?;
        let h = header_at as usize;
        self.bytes[h..h + HEADER_SIZE as usize].copy_from_slice(&header.to_bytes());
        let base = self.start + header_at + HEADER_SIZE;
        if landmark {
            let t = (header_at + HEADER_SIZE + layout.usable_size) as usize;
            self.bytes[t..t + chunk::TRAILER_SIZE as usize]
                .copy_from_slice(&chunk::trailer_bytes());
        }

        let record = ChunkRecord {
            base,
            usable: layout.usable_size,
            sensitive,
            landmark,
            type_id,
            alloc_site: site.to_string(),
            seq: self.next_seq,
        };
        self.next_seq += 1;
        log::trace!(
            "alloc {:#x} usable {:#x} sensitive={}",
            base,
            layout.usable_size,
            sensitive
        );
        self.events.push(HeapEvent {
            kind: HeapEventKind::Allocate,
            base,
            size: record.usable,
            sensitive,
        });
        self.tables.entries.insert(
            base,
            Entry {
                record,
                status: Status::Live,
            },
        );
        Ok(base)
    }

    pub fn calloc(
        &mut self,
        count: u64,
        size: u64,
        site: &str,
        type_id: Option<String>,
    ) -> Result<u64, HeapError> {
        let total = count
            .checked_mul(size)
            .ok_or(HeapError::MulOverflow { count, size })?;
        let base = self.alloc(total, site, type_id)?;
        let usable = self.tables.entries[&base].record.usable;
        self.fill(base, usable, 0);
        Ok(base)
    }

    pub fn free(&mut self, base: u64) -> Result<(), HeapError> {
        let entry = self
            .tables
            .entries
            .get_mut(&base)
            .ok_or(HeapError::InvalidFree(base))?;
        if entry.status == Status::Freed {
            return Err(HeapError::DoubleFree(base));
        }
        entry.status = Status::Freed;
        let (size, sensitive) = (entry.record.usable, entry.record.sensitive);
        self.tables.free_order.push(base);
        for kind in [HeapEventKind::Release, HeapEventKind::FreeInsert] {
            self.events.push(HeapEvent {
                kind,
                base,
                size,
                sensitive,
            });
        }
        Ok(())
    }

    /// Moves a live chunk to a fresh allocation of `new_size`, keeping its
    /// sensitivity and type binding.
    pub fn realloc(&mut self, base: u64, new_size: u64, site: &str) -> Result<u64, HeapError> {
        if base == 0 {
            return self.alloc(new_size, site, None);
        }
        let old = match self.tables.entries.get(&base) {
            Some(e) if e.status == Status::Live => e.record.clone(),
            Some(_) => return Err(HeapError::DoubleFree(base)),
            None => return Err(HeapError::InvalidFree(base)),
        };
        let saved = self.sensitive_switch;
        self.sensitive_switch = old.sensitive;
        let result = self.alloc(new_size, site, old.type_id.clone());
        self.sensitive_switch = saved;
        let new_base = result?;
        let keep = old.usable.min(self.tables.entries[&new_base].record.usable);
        let data = self.read(old.base, keep);
        self.write(new_base, &data);
        self.free(base)?;
        Ok(new_base)
    }

    pub fn classify(&self, addr: u64, width: u64) -> Classification<'_> {
        let width = width.max(1);
        let mut freed = None;
        let mut any_live = false;
        for (record, live) in self.tables.intersecting(addr, width) {
            if live {
                if record.contains(addr, width) {
                    return if record.sensitive {
                        Classification::Sensitive(record)
                    } else {
                        Classification::NonSensitive(record)
                    };
                }
                any_live = true;
            } else {
                // Iteration runs downward; keep the lowest freed record.
                freed = Some(record);
            }
        }
        match freed {
            Some(record) if !any_live => Classification::Freed(record),
            _ => Classification::Unowned,
        }
    }

    fn offset(&self, addr: u64) -> Option<usize> {
        addr.checked_sub(self.start).map(|o| o as usize)
    }

    pub fn read_byte(&self, addr: u64) -> u8 {
        self.offset(addr)
            .and_then(|o| self.bytes.get(o).copied())
            .unwrap_or(0)
    }

    /// Reads `len` bytes; addresses outside the image read as zero.
    pub fn read(&self, addr: u64, len: u64) -> Vec<u8> {
        (0..len)
            .map(|i| self.read_byte(addr.wrapping_add(i)))
            .collect()
    }

    /// Unchecked write. Bytes below the image are dropped; the image grows
    /// to cover bytes above it, up to the configured maximum.
    pub fn write(&mut self, addr: u64, data: &[u8]) {
        for (i, b) in data.iter().enumerate() {
            let Some(off) = self.offset(addr.wrapping_add(i as u64)) else {
                continue;
            };
            if off as u64 >= self.config.max_bytes {
                continue;
            }
            if off >= self.bytes.len() {
                self.bytes.resize(off + 1, 0);
            }
            self.bytes[off] = *b;
        }
    }

    fn fill(&mut self, addr: u64, len: u64, value: u8) {
        let off = (addr - self.start) as usize;
        self.bytes[off..off + len as usize].fill(value);
    }

    pub fn dump(&self) -> TableDump {
        TableDump {
            free: self.tables.free().map(|r| (r.base, r.usable)).collect(),
            allocated: self.tables.live().map(|r| (r.base, r.usable)).collect(),
        }
    }

    /// Header of the chunk whose usable region starts at `base`.
    pub fn header_of(&self, base: u64) -> ChunkHeader {
        let raw = self.read(base - HEADER_SIZE, HEADER_SIZE);
        let mut bytes = [0u8; HEADER_SIZE as usize];
        bytes.copy_from_slice(&raw);
        ChunkHeader::from_bytes(&bytes)
    }

    pub fn trailer_of(&self, record: &ChunkRecord) -> Vec<u8> {
        self.read(record.end(), record.trailer_len())
    }
}
