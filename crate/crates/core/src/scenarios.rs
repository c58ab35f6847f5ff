//! Bundled micro-programs, with the inputs and heap settings they are meant
//! to run under.

use thiserror::Error;

use crate::heap::HeapConfig;
use crate::program::{parse_program, Program, ProgramError};
use crate::recovery::SessionConfig;
use crate::typedb::{parse_typedb, TypeDb, TypeDbError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    TypeDb(#[from] TypeDbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    pub name: &'static str,
    pub program: &'static str,
    pub typedb: &'static str,
    pub inputs: &'static [i64],
    pub landmarks: bool,
    pub report_all_faults: bool,
}

impl Scenario {
    pub fn heap_config(&self) -> HeapConfig {
        HeapConfig {
            landmarks: self.landmarks,
            ..HeapConfig::default()
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            heap: self.heap_config(),
            report_all_faults: self.report_all_faults,
            ..SessionConfig::default()
        }
    }

    /// Parses the program and the type database, and checks one against
    /// the other.
    pub fn load(&self) -> Result<(Program, TypeDb), ScenarioError> {
        let program = parse_program(self.program)?;
        let mut db = parse_typedb(self.typedb)?;
        db.check_program(&program)?;
        Ok((program, db))
    }
}

pub const OFF_BY_ONE: Scenario = Scenario {
    name: "off_by_one",
    program: include_str!("../scenarios/off_by_one.mp"),
    typedb: "",
    inputs: &[128, 56],
    // Trailers would shift the second buffer off 0x20880a0.
    landmarks: false,
    report_all_faults: true,
};

pub const GOATY: Scenario = Scenario {
    name: "goaty",
    program: include_str!("../scenarios/goaty.mp"),
    typedb: include_str!("../scenarios/goaty.tdb"),
    inputs: &[],
    landmarks: true,
    report_all_faults: false,
};

pub const NULLHTTPD: Scenario = Scenario {
    name: "nullhttpd",
    program: include_str!("../scenarios/nullhttpd.mp"),
    typedb: "",
    inputs: &[-800, 100],
    landmarks: true,
    report_all_faults: false,
};

pub const BENIGN_OVERFLOW: Scenario = Scenario {
    name: "benign_overflow",
    program: include_str!("../scenarios/benign_overflow.mp"),
    typedb: "",
    inputs: &[12],
    landmarks: true,
    report_all_faults: false,
};

pub const TAINTED_COPY: Scenario = Scenario {
    name: "tainted_copy",
    program: include_str!("../scenarios/tainted_copy.mp"),
    typedb: "",
    inputs: &[28, 0],
    landmarks: true,
    report_all_faults: false,
};

pub const TAINTED_INDEX: Scenario = Scenario {
    name: "tainted_index",
    program: include_str!("../scenarios/tainted_index.mp"),
    typedb: "",
    inputs: &[31, 0],
    landmarks: true,
    report_all_faults: false,
};

pub const NESTED: Scenario = Scenario {
    name: "nested",
    program: include_str!("../scenarios/nested.mp"),
    typedb: "",
    inputs: &[10, 100, 20],
    landmarks: true,
    report_all_faults: false,
};

pub const ALL: &[Scenario] = &[
    OFF_BY_ONE,
    GOATY,
    NULLHTTPD,
    BENIGN_OVERFLOW,
    TAINTED_COPY,
    TAINTED_INDEX,
    NESTED,
];
