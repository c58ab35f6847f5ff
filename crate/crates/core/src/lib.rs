//! Heap corruption detection and recovery for a small register IR.
//!
//! A program runs on a simulated glibc-style heap. Every store and load is
//! checked against the allocation tables; a corruption is traced back to
//! the input that caused it, and the run is rolled back to a function-entry
//! snapshot taken before that input was read.

pub mod chunk;
pub mod detector;
pub mod heap;
pub mod impact;
pub mod interp;
pub mod program;
pub mod recovery;
pub mod scenarios;
pub mod slicer;
pub mod typedb;

pub use detector::{CorruptionKind, CorruptionReport, Direction, InstrRef};
pub use heap::{ChunkRecord, Heap, HeapConfig, HeapError, HeapEvent, HeapEventKind, TableDump};
pub use impact::{Decision, ImpactVerdict};
pub use interp::{ExecConfig, ExecContext, ExecError, ExecEvent, MachineState, Observer, Step};
pub use program::{parse_program, FuncId, Program, ProgramError, Site};
pub use recovery::{
    orchestrate, Session, SessionConfig, SessionError, SessionEvent, SessionSummary,
};
pub use typedb::{parse_typedb, TypeDb, TypeDbError};
