//! The micro-IR executed by the engine.
//!
//! A program is a list of functions; each function is a list of labelled
//! instructions. The text format is line oriented:
//!
//! ```text
//! # comment
//! fn main {
//!   L0: buf = alloc 128 type=goaty
//!   L1: n = input
//!   L2: c = cmp_le i n
//!   L3: br c L4 L9
//!   L4: store1 p 0x41
//!   ...
//! }
//! fn helper(a, b) {
//!   L0: s = add a b
//!   L1: ret s
//! }
//! ```

mod cfg;
mod parse;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cfg::{control_dependence, post_dominators, Cfg, PostDominators};
pub use parse::parse_program;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("link error at line {line}: {msg}")]
    Link { line: usize, msg: String },
    #[error("invalid program: {0}")]
    Validation(String),
}

/// Function-local register index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FuncId(pub u32);

/// A static instruction: function plus instruction index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub func: FuncId,
    pub pc: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
}

impl Operand {
    pub fn reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(*r),
            Operand::Imm(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    CmpLe,
    CmpLt,
    CmpEq,
}

impl ArithOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Sub => "sub",
            ArithOp::Mul => "mul",
            ArithOp::CmpLe => "cmp_le",
            ArithOp::CmpLt => "cmp_lt",
            ArithOp::CmpEq => "cmp_eq",
        }
    }

    fn from_mnemonic(s: &str) -> Option<Self> {
        Some(match s {
            "add" => ArithOp::Add,
            "sub" => ArithOp::Sub,
            "mul" => ArithOp::Mul,
            "cmp_le" => ArithOp::CmpLe,
            "cmp_lt" => ArithOp::CmpLt,
            "cmp_eq" => ArithOp::CmpEq,
            _ => return None,
        })
    }
}

/// `field=T.f` pointer provenance annotation on an access.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldRef {
    pub ty: String,
    pub field: String,
}

impl fmt::Display for FieldRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.ty, self.field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Const {
        dst: Reg,
        value: i64,
    },
    Arith {
        dst: Reg,
        op: ArithOp,
        lhs: Operand,
        rhs: Operand,
    },
    Br {
        cond: Operand,
        then_pc: usize,
        else_pc: usize,
    },
    Jmp {
        target: usize,
    },
    Call {
        dst: Option<Reg>,
        callee: FuncId,
        args: Vec<Operand>,
    },
    Ret {
        value: Option<Operand>,
    },
    Alloc {
        dst: Reg,
        size: Operand,
        ty: Option<String>,
    },
    Calloc {
        dst: Reg,
        count: Operand,
        size: Operand,
        ty: Option<String>,
    },
    Realloc {
        dst: Reg,
        ptr: Operand,
        size: Operand,
    },
    Free {
        ptr: Operand,
    },
    Store {
        width: u8,
        addr: Operand,
        value: Operand,
        field: Option<FieldRef>,
    },
    Load {
        dst: Reg,
        width: u8,
        addr: Operand,
        field: Option<FieldRef>,
    },
    StoreBytes {
        addr: Operand,
        bytes: Vec<u8>,
        field: Option<FieldRef>,
    },
    Input {
        dst: Reg,
    },
    ToggleSensitive {
        on: bool,
    },
    Print {
        value: Operand,
    },
    Halt,
}

impl Op {
    pub fn mnemonic(&self) -> String {
        match self {
            Op::Const { .. } => "const".into(),
            Op::Arith { op, .. } => op.mnemonic().into(),
            Op::Br { .. } => "br".into(),
            Op::Jmp { .. } => "jmp".into(),
            Op::Call { .. } => "call".into(),
            Op::Ret { .. } => "ret".into(),
            Op::Alloc { .. } => "alloc".into(),
            Op::Calloc { .. } => "calloc".into(),
            Op::Realloc { .. } => "realloc".into(),
            Op::Free { .. } => "free".into(),
            Op::Store { width, .. } => format!("store{width}"),
            Op::Load { width, .. } => format!("load{width}"),
            Op::StoreBytes { .. } => "store_bytes".into(),
            Op::Input { .. } => "input".into(),
            Op::ToggleSensitive { .. } => "toggle_sensitive".into(),
            Op::Print { .. } => "print".into(),
            Op::Halt => "halt".into(),
        }
    }

    /// Register operands read by this instruction, in operand order.
    pub fn reads(&self) -> Vec<Reg> {
        let ops: Vec<&Operand> = match self {
            Op::Arith { lhs, rhs, .. } => vec![lhs, rhs],
            Op::Br { cond, .. } => vec![cond],
            Op::Call { args, .. } => args.iter().collect(),
            Op::Ret { value } => value.iter().collect(),
            Op::Alloc { size, .. } => vec![size],
            Op::Calloc { count, size, .. } => vec![count, size],
            Op::Realloc { ptr, size, .. } => vec![ptr, size],
            Op::Free { ptr } => vec![ptr],
            Op::Store { addr, value, .. } => vec![addr, value],
            Op::Load { addr, .. } => vec![addr],
            Op::StoreBytes { addr, .. } => vec![addr],
            Op::Print { value } => vec![value],
            _ => vec![],
        };
        ops.into_iter().filter_map(Operand::reg).collect()
    }

    /// The register defined in the executing frame, if any. A call's result
    /// is written by the callee's `ret`.
    pub fn def(&self) -> Option<Reg> {
        match self {
            Op::Const { dst, .. }
            | Op::Arith { dst, .. }
            | Op::Alloc { dst, .. }
            | Op::Calloc { dst, .. }
            | Op::Realloc { dst, .. }
            | Op::Load { dst, .. }
            | Op::Input { dst } => Some(*dst),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub label: String,
    pub op: Op,
}

#[derive(Debug, Clone)]
pub struct Function {
    pub name: String,
    pub params: Vec<Reg>,
    pub reg_names: Vec<String>,
    pub body: Vec<Instruction>,
    labels: HashMap<String, usize>,
    cfg: Cfg,
    control_deps: Vec<BTreeSet<usize>>,
}

impl PartialEq for Function {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.params == other.params
            && self.reg_names == other.reg_names
            && self.body == other.body
    }
}

impl Function {
    fn new(name: String, params: Vec<Reg>, reg_names: Vec<String>, body: Vec<Instruction>) -> Self {
        let labels = body
            .iter()
            .enumerate()
            .map(|(pc, i)| (i.label.clone(), pc))
            .collect();
        let cfg = Cfg::from_body(&body);
        let pdoms = post_dominators(&cfg);
        let control_deps = control_dependence(&cfg, &pdoms);
        Self {
            name,
            params,
            reg_names,
            body,
            labels,
            cfg,
            control_deps,
        }
    }

    pub fn pc_of(&self, label: &str) -> Option<usize> {
        self.labels.get(label).copied()
    }

    pub fn reg_name(&self, reg: Reg) -> &str {
        &self.reg_names[reg.0 as usize]
    }

    pub fn cfg(&self) -> &Cfg {
        &self.cfg
    }

    /// Static branches instruction `pc` is control dependent on.
    pub fn control_deps(&self, pc: usize) -> &BTreeSet<usize> {
        &self.control_deps[pc]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    functions: Vec<Function>,
    main: FuncId,
}

impl Program {
    pub fn functions(&self) -> &[Function] {
        &self.functions
    }

    pub fn main(&self) -> FuncId {
        self.main
    }

    pub fn function(&self, id: FuncId) -> &Function {
        &self.functions[id.0 as usize]
    }

    pub fn func_id(&self, name: &str) -> Option<FuncId> {
        self.functions
            .iter()
            .position(|f| f.name == name)
            .map(|i| FuncId(i as u32))
    }

    pub fn instruction(&self, site: Site) -> &Instruction {
        &self.function(site.func).body[site.pc as usize]
    }

    /// `fn:label`, the identifier printed in reports.
    pub fn site_label(&self, site: Site) -> String {
        format!(
            "{}:{}",
            self.function(site.func).name,
            self.instruction(site).label
        )
    }

    /// Resolves `fn:label`, or a bare label inside `main`.
    pub fn resolve_site(&self, text: &str) -> Option<Site> {
        let (func, label) = match text.split_once(':') {
            Some((f, l)) => (self.func_id(f)?, l),
            None => (self.main, text),
        };
        let pc = self.function(func).pc_of(label)?;
        Some(Site {
            func,
            pc: pc as u32,
        })
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.functions.iter().enumerate().flat_map(|(f, func)| {
            (0..func.body.len()).map(move |pc| Site {
                func: FuncId(f as u32),
                pc: pc as u32,
            })
        })
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, func: &Function, op: &Operand) -> fmt::Result {
    match op {
        Operand::Reg(r) => write!(f, "{}", func.reg_name(*r)),
        Operand::Imm(v) => write!(f, "{v}"),
    }
}

fn write_bytes(f: &mut fmt::Formatter<'_>, bytes: &[u8]) -> fmt::Result {
    write!(f, "\"")?;
    for &b in bytes {
        match b {
            b'"' => write!(f, "\\\"")?,
            b'\\' => write!(f, "\\\\")?,
            0x20..=0x7e => write!(f, "{}", b as char)?,
            _ => write!(f, "\\x{b:02x}")?,
        }
    }
    write!(f, "\"")
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for func in &self.functions {
            write!(f, "fn {}", func.name)?;
            if !func.params.is_empty() {
                let names: Vec<&str> = func.params.iter().map(|r| func.reg_name(*r)).collect();
                write!(f, "({})", names.join(", "))?;
            }
            writeln!(f, " {{")?;
            for instr in &func.body {
                write!(f, "  {}: ", instr.label)?;
                let label_at = |pc: usize| func.body[pc].label.as_str();
                match &instr.op {
                    Op::Const { dst, value } => {
                        write!(f, "{} = const {}", func.reg_name(*dst), value)?
                    }
                    Op::Arith { dst, op, lhs, rhs } => {
                        write!(f, "{} = {} ", func.reg_name(*dst), op.mnemonic())?;
                        write_operand(f, func, lhs)?;
                        write!(f, " ")?;
                        write_operand(f, func, rhs)?;
                    }
                    Op::Br {
                        cond,
                        then_pc,
                        else_pc,
                    } => {
                        write!(f, "br ")?;
                        write_operand(f, func, cond)?;
                        write!(f, " {} {}", label_at(*then_pc), label_at(*else_pc))?;
                    }
                    Op::Jmp { target } => write!(f, "jmp {}", label_at(*target))?,
                    Op::Call { dst, callee, args } => {
                        if let Some(d) = dst {
                            write!(f, "{} = ", func.reg_name(*d))?;
                        }
                        write!(f, "call {}", self.function(*callee).name)?;
                        for a in args {
                            write!(f, " ")?;
                            write_operand(f, func, a)?;
                        }
                    }
                    Op::Ret { value } => {
                        write!(f, "ret")?;
                        if let Some(v) = value {
                            write!(f, " ")?;
                            write_operand(f, func, v)?;
                        }
                    }
                    Op::Alloc { dst, size, ty } => {
                        write!(f, "{} = alloc ", func.reg_name(*dst))?;
                        write_operand(f, func, size)?;
                        if let Some(t) = ty {
                            write!(f, " type={t}")?;
                        }
                    }
                    Op::Calloc {
                        dst,
                        count,
                        size,
                        ty,
                    } => {
                        write!(f, "{} = calloc ", func.reg_name(*dst))?;
                        write_operand(f, func, count)?;
                        write!(f, " ")?;
                        write_operand(f, func, size)?;
                        if let Some(t) = ty {
                            write!(f, " type={t}")?;
                        }
                    }
                    Op::Realloc { dst, ptr, size } => {
                        write!(f, "{} = realloc ", func.reg_name(*dst))?;
                        write_operand(f, func, ptr)?;
                        write!(f, " ")?;
                        write_operand(f, func, size)?;
                    }
                    Op::Free { ptr } => {
                        write!(f, "free ")?;
                        write_operand(f, func, ptr)?;
                    }
                    Op::Store {
                        width,
                        addr,
                        value,
                        field,
                    } => {
                        write!(f, "store{width} ")?;
                        write_operand(f, func, addr)?;
                        write!(f, " ")?;
                        write_operand(f, func, value)?;
                        if let Some(fr) = field {
                            write!(f, " field={fr}")?;
                        }
                    }
                    Op::Load {
                        dst,
                        width,
                        addr,
                        field,
                    } => {
                        write!(f, "{} = load{} ", func.reg_name(*dst), width)?;
                        write_operand(f, func, addr)?;
                        if let Some(fr) = field {
                            write!(f, " field={fr}")?;
                        }
                    }
                    Op::StoreBytes { addr, bytes, field } => {
                        write!(f, "store_bytes ")?;
                        write_operand(f, func, addr)?;
                        write!(f, " ")?;
                        write_bytes(f, bytes)?;
                        if let Some(fr) = field {
                            write!(f, " field={fr}")?;
                        }
                    }
                    Op::Input { dst } => write!(f, "{} = input", func.reg_name(*dst))?,
                    Op::ToggleSensitive { on } => {
                        write!(f, "toggle_sensitive {}", if *on { "on" } else { "off" })?
                    }
                    Op::Print { value } => {
                        write!(f, "print ")?;
                        write_operand(f, func, value)?;
                    }
                    Op::Halt => write!(f, "halt")?,
                }
                writeln!(f)?;
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}
