//! Speculative taint analysis: can a non-sensitive corruption reach
//! sensitive memory later on?
//!
//! The copy runs concretely while tainted values carry a signed interval.
//! Anything the single concrete path cannot vouch for is answered with
//! `affects_sensitive = true`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{CorruptionKind, CorruptionReport};
use crate::interp::{ExecContext, InstrInstance, MachineState, Observer, Step};
use crate::program::{ArithOp, Instruction, Op, Operand, Program, Reg};

pub const DEFAULT_IMPACT_BUDGET: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: i64,
    pub hi: i64,
}

impl Interval {
    pub const FULL: Interval = Interval {
        lo: i64::MIN,
        hi: i64::MAX,
    };

    pub fn point(v: i64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: i64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn from_i128(lo: i128, hi: i128) -> Self {
        if lo < i64::MIN as i128 || hi > i64::MAX as i128 {
            Self::FULL
        } else {
            Self {
                lo: lo as i64,
                hi: hi as i64,
            }
        }
    }

    /// Sound for the wrapping concrete semantics: any overflow widens to
    /// the full range.
    pub fn arith(op: ArithOp, a: Interval, b: Interval) -> Interval {
        let (al, ah, bl, bh) = (a.lo as i128, a.hi as i128, b.lo as i128, b.hi as i128);
        match op {
            ArithOp::Add => Self::from_i128(al + bl, ah + bh),
            ArithOp::Sub => Self::from_i128(al - bh, ah - bl),
            ArithOp::Mul => {
                let p = [al * bl, al * bh, ah * bl, ah * bh];
                Self::from_i128(*p.iter().min().unwrap(), *p.iter().max().unwrap())
            }
            ArithOp::CmpLe => Self::truth(a.hi <= b.lo, a.lo > b.hi),
            ArithOp::CmpLt => Self::truth(a.hi < b.lo, a.lo >= b.hi),
            ArithOp::CmpEq => Self::truth(
                a.lo == a.hi && b.lo == b.hi && a.lo == b.lo,
                a.hi < b.lo || b.hi < a.lo,
            ),
        }
    }

    fn truth(always: bool, never: bool) -> Interval {
        match (always, never) {
            (true, _) => Self::point(1),
            (_, true) => Self::point(0),
            _ => Self { lo: 0, hi: 1 },
        }
    }

    /// Every value a `width`-byte zero-extended load can produce.
    fn load_range(width: u64) -> Interval {
        if width >= 8 {
            Self::FULL
        } else {
            Self {
                lo: 0,
                hi: (1i64 << (8 * width)) - 1,
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintState {
    pub tainted_heap_bytes: BTreeSet<u64>,
    /// Tainted registers keyed by (frame id, register), with their interval.
    pub registers: BTreeMap<(u64, Reg), Interval>,
}

impl TaintState {
    fn reg(&self, frame: u64, op: &Operand) -> Option<Interval> {
        op.reg()
            .and_then(|r| self.registers.get(&(frame, r)).copied())
    }

    fn set(&mut self, key: (u64, Reg), value: Option<Interval>) {
        match value {
            Some(iv) => {
                self.registers.insert(key, iv);
            }
            None => {
                self.registers.remove(&key);
            }
        }
    }

    fn any_heap(&self, addr: u64, len: u64) -> bool {
        self.tainted_heap_bytes
            .range(addr..addr.saturating_add(len))
            .next()
            .is_some()
    }

    fn taint_heap(&mut self, addr: u64, len: u64) {
        self.tainted_heap_bytes
            .extend(addr..addr.saturating_add(len));
    }

    /// Interval of a little-endian load whose tainted bytes may be anything.
    fn load_interval(&self, bytes: &[u8], addr: u64) -> Interval {
        let mut lo: i128 = 0;
        let mut hi: i128 = 0;
        for (k, b) in bytes.iter().enumerate() {
            let scale = 1i128 << (8 * k);
            if self.tainted_heap_bytes.contains(&(addr + k as u64)) {
                hi += 255 * scale;
            } else {
                lo += *b as i128 * scale;
                hi += *b as i128 * scale;
            }
        }
        Interval::from_i128(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpactVerdict {
    pub affects_sensitive: bool,
    pub witness: Option<u64>,
    pub budget_exhausted: bool,
}

impl ImpactVerdict {
    fn clean() -> Self {
        Self {
            affects_sensitive: false,
            witness: None,
            budget_exhausted: false,
        }
    }
}

/// Sensitive usable regions plus trailers, live or freed.
fn sensitive_regions(state: &MachineState) -> Vec<(u64, u64)> {
    state
        .heap
        .tables()
        .all()
        .filter(|r| r.sensitive)
        .map(|r| (r.base, r.end() + r.trailer_len()))
        .collect()
}

fn hits_sensitive(state: &MachineState, lo: u64, hi_exclusive: u64) -> bool {
    sensitive_regions(state)
        .iter()
        .any(|&(b, e)| lo < e && b < hi_exclusive)
}

struct TaintTracker<'p> {
    program: &'p Program,
    taint: TaintState,
    witness: Option<u64>,
}

impl TaintTracker<'_> {
    fn flag(&mut self, seq: u64, why: &str) {
        if self.witness.is_none() {
            log::debug!("speculation reaches sensitive memory at seq {seq}: {why}");
            self.witness = Some(seq);
        }
    }

    fn operand(&self, frame: u64, op: &Operand) -> Option<Interval> {
        self.taint.reg(frame, op)
    }
}

impl Observer for TaintTracker<'_> {
    fn instance(&mut self, state: &MachineState, inst: &InstrInstance, instr: &Instruction) {
        let f = inst.frame;
        let seq = inst.seq;
        let vals = &inst.operand_values;
        match &instr.op {
            Op::Const { dst, .. } | Op::Input { dst } => self.taint.set((f, *dst), None),
            Op::Arith { dst, op, lhs, rhs } => {
                let a = self.operand(f, lhs);
                let b = self.operand(f, rhs);
                let out = if a.is_some() || b.is_some() {
                    let a = a.unwrap_or(Interval::point(vals[0]));
                    let b = b.unwrap_or(Interval::point(vals[1]));
                    Some(Interval::arith(*op, a, b))
                } else {
                    None
                };
                self.taint.set((f, *dst), out);
            }
            Op::Br { cond, .. } => {
                if let Some(iv) = self.operand(f, cond) {
                    // The other direction is unexplored.
                    if iv.contains(0) && (iv.lo != 0 || iv.hi != 0) {
                        self.flag(seq, "branch on corrupted data");
                    }
                }
            }
            Op::Jmp { .. } | Op::ToggleSensitive { .. } | Op::Print { .. } | Op::Halt => {}
            Op::Call { callee, args, .. } => {
                let callee_frame = inst.callee_frame.expect("call creates a frame");
                let params = &self.program.function(*callee).params;
                for (p, a) in params.iter().zip(args) {
                    let t = self.operand(f, a);
                    self.taint.set((callee_frame, *p), t);
                }
            }
            Op::Ret { value } => {
                let t = value.as_ref().and_then(|v| self.operand(f, v));
                if let Some((caller, Some(dst))) = inst.return_to {
                    self.taint.set((caller, dst), t);
                }
                self.taint.registers.retain(|(frame, _), _| *frame != f);
            }
            Op::Alloc { dst, size, .. } => {
                if self.operand(f, size).is_some() {
                    self.flag(seq, "allocation size depends on corrupted data");
                }
                self.taint.set((f, *dst), None);
            }
            Op::Calloc {
                dst, count, size, ..
            } => {
                if self.operand(f, count).is_some() || self.operand(f, size).is_some() {
                    self.flag(seq, "allocation size depends on corrupted data");
                }
                self.taint.set((f, *dst), None);
            }
            Op::Realloc { dst, ptr, size } => {
                if self.operand(f, ptr).is_some() || self.operand(f, size).is_some() {
                    self.flag(seq, "realloc operand depends on corrupted data");
                }
                if let (Some((from, len)), Some((to, _))) = (inst.mem_read, inst.mem_write) {
                    let moved: Vec<u64> = (0..len)
                        .filter(|k| self.taint.tainted_heap_bytes.contains(&(from + k)))
                        .collect();
                    for k in moved {
                        self.taint.tainted_heap_bytes.insert(to + k);
                    }
                    if hits_sensitive(state, to, to + len) && self.taint.any_heap(to, len) {
                        self.flag(seq, "corrupted bytes moved into sensitive memory");
                    }
                }
                self.taint.set((f, *dst), None);
            }
            Op::Free { ptr } => {
                if self.operand(f, ptr).is_some() {
                    self.flag(seq, "freed pointer depends on corrupted data");
                }
            }
            Op::Store {
                addr, value, width, ..
            } => {
                let w = *width as u64;
                let a = vals[0] as u64;
                let addr_t = self.operand(f, addr);
                let value_t = self.operand(f, value);
                self.store(state, seq, a, w, addr_t, value_t.is_some());
            }
            Op::StoreBytes { addr, bytes, .. } => {
                let a = vals[0] as u64;
                let addr_t = self.operand(f, addr);
                self.store(state, seq, a, bytes.len() as u64, addr_t, false);
            }
            Op::Load {
                dst, width, addr, ..
            } => {
                let w = *width as u64;
                let a = vals[0] as u64;
                let out = if self.operand(f, addr).is_some() {
                    Some(Interval::load_range(w))
                } else if self.taint.any_heap(a, w) {
                    let bytes = state.heap.read(a, w);
                    let iv = self.taint.load_interval(&bytes, a);
                    Some(if w < 8 {
                        Interval {
                            lo: iv.lo.max(0),
                            hi: iv.hi.min(Interval::load_range(w).hi),
                        }
                    } else {
                        iv
                    })
                } else {
                    None
                };
                self.taint.set((f, *dst), out);
            }
        }
    }
}

impl TaintTracker<'_> {
    fn store(
        &mut self,
        state: &MachineState,
        seq: u64,
        a: u64,
        len: u64,
        addr_t: Option<Interval>,
        value_tainted: bool,
    ) {
        if len == 0 {
            return;
        }
        if let Some(iv) = addr_t {
            let lo = iv.lo as u64;
            let hi = (iv.hi as u64).saturating_add(len);
            let wraps = (iv.lo < 0) != (iv.hi < 0);
            if wraps || hits_sensitive(state, lo.min(hi), hi.max(lo)) {
                self.flag(seq, "store address range overlaps sensitive memory");
            }
        }
        if addr_t.is_some() || value_tainted {
            self.taint.taint_heap(a, len);
            if hits_sensitive(state, a, a.saturating_add(len)) {
                self.flag(seq, "corrupted value stored into sensitive memory");
            }
        }
    }
}

/// Runs `state` forward from a fault whose write has been applied, with the
/// bytes in `corrupted` tainted. Inputs past the consumed prefix read as
/// `default_input`.
pub fn speculative_continue(
    mut state: MachineState,
    corrupted: &BTreeSet<u64>,
    ctx: &ExecContext<'_>,
    budget: u64,
    default_input: i64,
) -> ImpactVerdict {
    state.recorder_mut().set_enabled(false);
    let mut spec_ctx = ctx.clone();
    spec_ctx.inputs.truncate(state.input_cursor());
    spec_ctx.default_input = Some(default_input);
    spec_ctx.config.step_budget = u64::MAX;

    let mut tracker = TaintTracker {
        program: ctx.program,
        taint: TaintState::default(),
        witness: None,
    };
    tracker
        .taint
        .tainted_heap_bytes
        .extend(corrupted.iter().copied());
    let fault_seq = state.seq().saturating_sub(1);
    if corrupted.iter().any(|&a| hits_sensitive(&state, a, a + 1)) {
        tracker.flag(fault_seq, "corrupted bytes lie in sensitive memory");
    }

    let mut steps = 0u64;
    while tracker.witness.is_none() {
        if steps >= budget {
            return ImpactVerdict {
                affects_sensitive: true,
                witness: None,
                budget_exhausted: true,
            };
        }
        steps += 1;
        match state.step(&spec_ctx, &mut tracker) {
            Ok(Step::Continue) => {}
            Ok(Step::Halted) | Ok(Step::NeedInput) => break,
            Ok(Step::Fault(report)) => {
                if state.apply_pending().is_some() {
                    let bytes: Vec<u64> = report.corrupted_addrs();
                    let seq = report.instr.as_ref().map_or(state.seq(), |i| i.seq);
                    for &a in &bytes {
                        tracker.taint.tainted_heap_bytes.insert(a);
                    }
                    if bytes.iter().any(|&a| hits_sensitive(&state, a, a + 1))
                        || report.kind == CorruptionKind::LandmarkViolation
                    {
                        tracker.flag(seq, "further corruption reaches sensitive memory");
                    }
                }
            }
            Err(e) => {
                log::debug!("speculation stopped: {e}");
                tracker.flag(state.seq(), "execution error during speculation");
            }
        }
    }
    match tracker.witness {
        Some(w) => ImpactVerdict {
            affects_sensitive: true,
            witness: Some(w),
            budget_exhausted: false,
        },
        None => ImpactVerdict::clean(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Recover,
    LogAndContinue,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImpactError {
    #[error("non-sensitive corruption reached the decision without an impact verdict")]
    MissingVerdict,
}

pub fn decide_recovery(
    report: &CorruptionReport,
    verdict: Option<&ImpactVerdict>,
) -> Result<Decision, ImpactError> {
    if report.target_sensitive || report.kind == CorruptionKind::LandmarkViolation {
        return Ok(Decision::Recover);
    }
    match verdict {
        None => Err(ImpactError::MissingVerdict),
        Some(v) if v.affects_sensitive => Ok(Decision::Recover),
        Some(_) => Ok(Decision::LogAndContinue),
    }
}
