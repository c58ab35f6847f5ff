//! Deterministic interpreter over the micro-IR.
//!
//! Every store and load is checked before it takes effect. A faulting store
//! leaves its bytes in [`MachineState::pending`] until the caller applies or
//! discards them; an unresolved pending write is dropped at the next step.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{self, CorruptionReport, InstrRef};
use crate::heap::{Heap, HeapConfig, HeapError, HeapEvent};
use crate::program::{ArithOp, FuncId, Instruction, Op, Operand, Program, Reg, Site};
use crate::slicer::{DepNode, Recorder};
use crate::typedb::TypeDb;

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
pub const DEFAULT_STACK_CAP: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("step budget of {0} steps exhausted")]
    StepBudgetExceeded(u64),
    #[error("call depth exceeds {0}")]
    StackOverflow(usize),
    #[error("register {reg} read before any write at {site}")]
    UndefinedRegister { site: String, reg: String },
    #[error("at {site}: {source}")]
    Heap {
        site: String,
        #[source]
        source: HeapError,
    },
    #[error("input queue exhausted")]
    InputExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub step_budget: u64,
    pub stack_cap: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            step_budget: DEFAULT_STEP_BUDGET,
            stack_cap: DEFAULT_STACK_CAP,
        }
    }
}

/// Everything the interpreter reads but never mutates.
#[derive(Debug, Clone)]
pub struct ExecContext<'a> {
    pub program: &'a Program,
    pub typedb: &'a TypeDb,
    /// The input queue; the state only holds a cursor into it.
    pub inputs: Vec<i64>,
    /// Values never to be consumed again at a given input site.
    pub rejected: BTreeMap<Site, BTreeSet<i64>>,
    /// Used once the queue runs dry; `None` means ask for more input.
    pub default_input: Option<i64>,
    pub config: ExecConfig,
}

impl<'a> ExecContext<'a> {
    pub fn new(program: &'a Program, typedb: &'a TypeDb) -> Self {
        Self {
            program,
            typedb,
            inputs: Vec::new(),
            rejected: BTreeMap::new(),
            default_input: None,
            config: ExecConfig::default(),
        }
    }

    pub fn with_inputs(mut self, inputs: Vec<i64>) -> Self {
        self.inputs = inputs;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u64,
    pub func: FuncId,
    pub pc: usize,
    regs: Vec<Option<i64>>,
    writers: Vec<Option<u64>>,
    /// Latest executed instance of each branch in this frame.
    branch_seen: BTreeMap<usize, u64>,
    pub call_instance: Option<u64>,
    pub ret_dst: Option<Reg>,
}

impl Frame {
    fn new(id: u64, func: FuncId, nregs: usize) -> Self {
        Self {
            id,
            func,
            pc: 0,
            regs: vec![None; nregs],
            writers: vec![None; nregs],
            branch_seen: BTreeMap::new(),
            call_instance: None,
            ret_dst: None,
        }
    }

    pub fn reg(&self, reg: Reg) -> Option<i64> {
        self.regs.get(reg.0 as usize).copied().flatten()
    }

    fn set(&mut self, reg: Reg, value: i64, seq: u64) {
        self.regs[reg.0 as usize] = Some(value);
        self.writers[reg.0 as usize] = Some(seq);
    }
}

/// Bytes of a faulting store, withheld from the heap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingWrite {
    pub addr: u64,
    pub bytes: Vec<u8>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecEvent {
    Heap(HeapEvent),
    Output(i64),
}

/// What one executed instance did, in concrete terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrInstance {
    pub seq: u64,
    pub site: Site,
    pub frame: u64,
    /// Values of all operands in operand order, immediates included.
    pub operand_values: Vec<i64>,
    pub result: Option<i64>,
    pub mem_read: Option<(u64, u64)>,
    pub mem_write: Option<(u64, u64)>,
    pub callee_frame: Option<u64>,
    /// Caller frame id and destination register of a `ret`.
    pub return_to: Option<(u64, Option<Reg>)>,
    pub input_value: Option<i64>,
    /// The store faulted; its bytes are pending.
    pub faulted: bool,
}

pub trait Observer {
    fn instance(&mut self, _state: &MachineState, _inst: &InstrInstance, _instr: &Instruction) {}
    /// A new frame for `func` is on top of the stack, before its first step.
    fn call(&mut self, _state: &MachineState, _func: FuncId) {}
    fn event(&mut self, _seq: u64, _event: &ExecEvent) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Collects events in order.
#[derive(Debug, Default)]
pub struct EventLog(pub Vec<(u64, ExecEvent)>);

impl Observer for EventLog {
    fn event(&mut self, seq: u64, event: &ExecEvent) {
        self.0.push((seq, event.clone()));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Continue,
    Halted,
    Fault(Box<CorruptionReport>),
    NeedInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    CompletedClean,
    Corrupted(Vec<CorruptionReport>),
}

/// Two's-complement wrapping arithmetic; comparisons yield 1 or 0.
pub fn eval_arith(op: ArithOp, a: i64, b: i64) -> i64 {
    match op {
        ArithOp::Add => a.wrapping_add(b),
        ArithOp::Sub => a.wrapping_sub(b),
        ArithOp::Mul => a.wrapping_mul(b),
        ArithOp::CmpLe => (a <= b) as i64,
        ArithOp::CmpLt => (a < b) as i64,
        ArithOp::CmpEq => (a == b) as i64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineState {
    pub heap: Heap,
    frames: Vec<Frame>,
    input_cursor: usize,
    seq: u64,
    steps: u64,
    next_frame_id: u64,
    halted: bool,
    exit_value: Option<i64>,
    recorder: Recorder,
    pending: Option<PendingWrite>,
}

impl MachineState {
    pub fn new(program: &Program, heap: HeapConfig) -> Result<Self, HeapError> {
        let main = program.main();
        let nregs = program.function(main).reg_names.len();
        Ok(Self {
            heap: Heap::new(heap)?,
            frames: vec![Frame::new(0, main, nregs)],
            input_cursor: 0,
            seq: 0,
            steps: 0,
            next_frame_id: 1,
            halted: false,
            exit_value: None,
            recorder: Recorder::default(),
            pending: None,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn current_frame(&self) -> &Frame {
        self.frames.last().expect("at least one frame")
    }

    pub fn input_cursor(&self) -> usize {
        self.input_cursor
    }

    /// Seq the next instance will receive.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn exit_value(&self) -> Option<i64> {
        self.exit_value
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn recorder_mut(&mut self) -> &mut Recorder {
        &mut self.recorder
    }

    pub fn pending(&self) -> Option<&PendingWrite> {
        self.pending.as_ref()
    }

    /// Lets the withheld bytes land.
    pub fn apply_pending(&mut self) -> Option<PendingWrite> {
        let p = self.pending.take()?;
        self.heap.write(p.addr, &p.bytes);
        self.recorder
            .set_writer(p.addr, p.bytes.len() as u64, p.seq);
        Some(p)
    }

    pub fn discard_pending(&mut self) -> Option<PendingWrite> {
        self.pending.take()
    }

    /// Function names from main to the current frame, joined by `>`.
    pub fn call_path(&self, program: &Program) -> String {
        self.frames
            .iter()
            .map(|f| program.function(f.func).name.as_str())
            .collect::<Vec<_>>()
            .join(">")
    }

    /// Site the next step will execute.
    pub fn next_site(&self) -> Site {
        let f = self.current_frame();
        Site {
            func: f.func,
            pc: f.pc as u32,
        }
    }

    fn next_input(&mut self, ctx: &ExecContext<'_>, site: Site) -> Option<i64> {
        let rejected = ctx.rejected.get(&site);
        while let Some(&v) = ctx.inputs.get(self.input_cursor) {
            self.input_cursor += 1;
            if rejected.is_some_and(|r| r.contains(&v)) {
                log::debug!("skipping rejected input {v}");
                continue;
            }
            return Some(v);
        }
        ctx.default_input
    }

    fn operand(
        &self,
        op: &Operand,
        deps: &mut Vec<u64>,
        ctx: &ExecContext<'_>,
        site: Site,
    ) -> Result<i64, ExecError> {
        match *op {
            Operand::Imm(v) => Ok(v),
            Operand::Reg(r) => {
                let frame = self.current_frame();
                match frame.reg(r) {
                    Some(v) => {
                        deps.extend(frame.writers[r.0 as usize]);
                        Ok(v)
                    }
                    None => Err(ExecError::UndefinedRegister {
                        site: ctx.program.site_label(site),
                        reg: ctx.program.function(frame.func).reg_name(r).to_string(),
                    }),
                }
            }
        }
    }

    /// Birth instance of the chunk an address points into, or of the chunk
    /// it most plausibly derives from.
    fn chunk_birth(&self, addr: u64) -> Option<u64> {
        let tables = self.heap.tables();
        tables
            .containing(addr)
            .or_else(|| tables.preceding(addr))
            .and_then(|r| self.recorder.birth(r.base))
    }

    fn heap_err<'c>(
        ctx: &'c ExecContext<'_>,
        site: Site,
    ) -> impl FnOnce(HeapError) -> ExecError + 'c {
        move |source| ExecError::Heap {
            site: ctx.program.site_label(site),
            source,
        }
    }

    /// Executes one instruction instance.
    pub fn step(
        &mut self,
        ctx: &ExecContext<'_>,
        obs: &mut dyn Observer,
    ) -> Result<Step, ExecError> {
        if self.halted {
            return Ok(Step::Halted);
        }
        if self.pending.take().is_some() {
            log::debug!("dropping unresolved faulting write");
        }
        if self.steps >= ctx.config.step_budget {
            return Err(ExecError::StepBudgetExceeded(ctx.config.step_budget));
        }
        let site = self.next_site();
        let (func_id, pc) = (site.func, site.pc as usize);
        let function = ctx.program.function(func_id);
        let instr = &function.body[pc];
        let seq = self.seq;

        let input_value = if let Op::Input { .. } = instr.op {
            match self.next_input(ctx, site) {
                Some(v) => Some(v),
                None => return Ok(Step::NeedInput),
            }
        } else {
            None
        };

        let frame = self.current_frame();
        let frame_id = frame.id;
        let control = function
            .control_deps(pc)
            .iter()
            .filter_map(|b| frame.branch_seen.get(b))
            .max()
            .copied()
            .or(frame.call_instance);

        let mut deps = Vec::new();
        let mut inst = InstrInstance {
            seq,
            site,
            frame: frame_id,
            operand_values: Vec::new(),
            result: None,
            mem_read: None,
            mem_write: None,
            callee_frame: None,
            return_to: None,
            input_value,
            faulted: false,
        };
        let mut next_pc = pc + 1;
        let mut fault = None;
        let mut called = None;
        let instr_ref = || InstrRef {
            seq,
            site,
            label: ctx.program.site_label(site),
        };

        match &instr.op {
            Op::Const { dst, value } => {
                inst.result = Some(*value);
                self.top().set(*dst, *value, seq);
            }
            Op::Arith { dst, op, lhs, rhs } => {
                let a = self.operand(lhs, &mut deps, ctx, site)?;
                let b = self.operand(rhs, &mut deps, ctx, site)?;
                let v = eval_arith(*op, a, b);
                inst.operand_values = vec![a, b];
                inst.result = Some(v);
                self.top().set(*dst, v, seq);
            }
            Op::Br {
                cond,
                then_pc,
                else_pc,
            } => {
                let c = self.operand(cond, &mut deps, ctx, site)?;
                inst.operand_values = vec![c];
                next_pc = if c != 0 { *then_pc } else { *else_pc };
                self.top().branch_seen.insert(pc, seq);
            }
            Op::Jmp { target } => next_pc = *target,
            Op::Call { dst, callee, args } => {
                let values = args
                    .iter()
                    .map(|a| self.operand(a, &mut deps, ctx, site))
                    .collect::<Result<Vec<_>, _>>()?;
                if self.frames.len() >= ctx.config.stack_cap {
                    return Err(ExecError::StackOverflow(ctx.config.stack_cap));
                }
                let target = ctx.program.function(*callee);
                let mut frame = Frame::new(self.next_frame_id, *callee, target.reg_names.len());
                self.next_frame_id += 1;
                for (param, v) in target.params.iter().zip(&values) {
                    frame.set(*param, *v, seq);
                }
                frame.call_instance = Some(seq);
                frame.ret_dst = *dst;
                inst.operand_values = values;
                inst.callee_frame = Some(frame.id);
                self.top().pc = pc + 1;
                self.frames.push(frame);
                called = Some(*callee);
            }
            Op::Ret { value } => {
                let v = match value {
                    Some(op) => self.operand(op, &mut deps, ctx, site)?,
                    None => 0,
                };
                inst.operand_values = vec![v];
                if self.frames.len() == 1 {
                    self.halted = true;
                    self.exit_value = Some(v);
                } else {
                    let callee = self.frames.pop().expect("callee frame");
                    let caller = self.top();
                    if let Some(dst) = callee.ret_dst {
                        caller.set(dst, v, seq);
                    }
                    inst.return_to = Some((caller.id, callee.ret_dst));
                }
            }
            Op::Alloc { dst, size, ty } => {
                let n = self.operand(size, &mut deps, ctx, site)?;
                let label = ctx.program.site_label(site);
                let ty = ty
                    .clone()
                    .or_else(|| ctx.typedb.binding(&label).map(str::to_string));
                let base = self
                    .heap
                    .alloc(n as u64, &label, ty)
                    .map_err(Self::heap_err(ctx, site))?;
                self.recorder.set_birth(base, seq);
                inst.operand_values = vec![n];
                inst.result = Some(base as i64);
                self.top().set(*dst, base as i64, seq);
            }
            Op::Calloc {
                dst,
                count,
                size,
                ty,
            } => {
                let c = self.operand(count, &mut deps, ctx, site)?;
                let n = self.operand(size, &mut deps, ctx, site)?;
                let label = ctx.program.site_label(site);
                let ty = ty
                    .clone()
                    .or_else(|| ctx.typedb.binding(&label).map(str::to_string));
                let base = self
                    .heap
                    .calloc(c as u64, n as u64, &label, ty)
                    .map_err(Self::heap_err(ctx, site))?;
                let usable = self.heap.tables().get(base).map_or(0, |r| r.usable);
                self.recorder.set_birth(base, seq);
                self.recorder.set_writer(base, usable, seq);
                inst.operand_values = vec![c, n];
                inst.result = Some(base as i64);
                inst.mem_write = Some((base, usable));
                self.top().set(*dst, base as i64, seq);
            }
            Op::Realloc { dst, ptr, size } => {
                let p = self.operand(ptr, &mut deps, ctx, site)? as u64;
                let n = self.operand(size, &mut deps, ctx, site)?;
                let old = self.heap.tables().get(p).filter(|_| p != 0).cloned();
                if let Some(old) = &old {
                    deps.extend(self.recorder.birth(old.base));
                    deps.extend(self.recorder.writers(old.base, old.usable));
                }
                let label = ctx.program.site_label(site);
                let base = self
                    .heap
                    .realloc(p, n as u64, &label)
                    .map_err(Self::heap_err(ctx, site))?;
                self.recorder.set_birth(base, seq);
                if let Some(old) = &old {
                    let new_usable = self.heap.tables().get(base).map_or(0, |r| r.usable);
                    let kept = old.usable.min(new_usable);
                    self.recorder.set_writer(base, kept, seq);
                    inst.mem_read = Some((old.base, kept));
                    inst.mem_write = Some((base, kept));
                }
                inst.operand_values = vec![p as i64, n];
                inst.result = Some(base as i64);
                self.top().set(*dst, base as i64, seq);
            }
            Op::Free { ptr } => {
                let p = self.operand(ptr, &mut deps, ctx, site)? as u64;
                inst.operand_values = vec![p as i64];
                if p != 0 {
                    deps.extend(self.recorder.birth(p));
                    self.heap.free(p).map_err(Self::heap_err(ctx, site))?;
                }
            }
            Op::Store {
                width,
                addr,
                value,
                field,
            } => {
                let a = self.operand(addr, &mut deps, ctx, site)? as u64;
                let v = self.operand(value, &mut deps, ctx, site)?;
                let bytes = v.to_le_bytes()[..*width as usize].to_vec();
                inst.operand_values = vec![a as i64, v];
                fault = self.store(
                    ctx,
                    a,
                    bytes,
                    field.as_ref(),
                    &instr_ref(),
                    &mut deps,
                    &mut inst,
                );
            }
            Op::StoreBytes { addr, bytes, field } => {
                let a = self.operand(addr, &mut deps, ctx, site)? as u64;
                inst.operand_values = vec![a as i64];
                if !bytes.is_empty() {
                    fault = self.store(
                        ctx,
                        a,
                        bytes.clone(),
                        field.as_ref(),
                        &instr_ref(),
                        &mut deps,
                        &mut inst,
                    );
                }
            }
            Op::Load {
                dst, width, addr, ..
            } => {
                let a = self.operand(addr, &mut deps, ctx, site)? as u64;
                let w = *width as u64;
                deps.extend(self.chunk_birth(a));
                deps.extend(self.recorder.writers(a, w));
                fault = detector::check_load(&self.heap, a, w, &instr_ref());
                let mut buf = [0u8; 8];
                buf[..w as usize].copy_from_slice(&self.heap.read(a, w));
                let v = i64::from_le_bytes(buf);
                inst.operand_values = vec![a as i64];
                inst.result = Some(v);
                inst.mem_read = Some((a, w));
                self.top().set(*dst, v, seq);
            }
            Op::Input { dst } => {
                let v = input_value.expect("input value resolved above");
                inst.result = Some(v);
                self.top().set(*dst, v, seq);
            }
            Op::ToggleSensitive { on } => self.heap.toggle_sensitive(*on),
            Op::Print { value } => {
                let v = self.operand(value, &mut deps, ctx, site)?;
                inst.operand_values = vec![v];
            }
            Op::Halt => self.halted = true,
        }

        if called.is_none() && !self.halted && !matches!(instr.op, Op::Ret { .. }) {
            self.top().pc = next_pc;
        }
        self.recorder.record(DepNode {
            seq,
            site,
            data: deps,
            control,
            input: input_value,
        });
        self.seq += 1;
        self.steps += 1;

        for e in self.heap.take_events() {
            obs.event(seq, &ExecEvent::Heap(e));
        }
        if let Op::Print { .. } = instr.op {
            obs.event(seq, &ExecEvent::Output(inst.operand_values[0]));
        }
        obs.instance(self, &inst, instr);
        if let Some(callee) = called {
            obs.call(self, callee);
        }

        Ok(match fault {
            Some(report) => Step::Fault(Box::new(report)),
            None if self.halted => Step::Halted,
            None => Step::Continue,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn store(
        &mut self,
        ctx: &ExecContext<'_>,
        addr: u64,
        bytes: Vec<u8>,
        field: Option<&crate::program::FieldRef>,
        instr: &InstrRef,
        deps: &mut Vec<u64>,
        inst: &mut InstrInstance,
    ) -> Option<CorruptionReport> {
        let len = bytes.len() as u64;
        deps.extend(self.chunk_birth(addr));
        inst.mem_write = Some((addr, len));
        let report = detector::check_store(&self.heap, ctx.typedb, addr, len, field, instr);
        if report.is_some() {
            inst.faulted = true;
            self.pending = Some(PendingWrite {
                addr,
                bytes,
                seq: instr.seq,
            });
        } else {
            self.heap.write(addr, &bytes);
            self.recorder.set_writer(addr, len, instr.seq);
        }
        report
    }

    fn top(&mut self) -> &mut Frame {
        self.frames.last_mut().expect("at least one frame")
    }

    /// Runs to completion, suppressing every faulting write and collecting
    /// the reports.
    pub fn run(
        &mut self,
        ctx: &ExecContext<'_>,
        obs: &mut dyn Observer,
    ) -> Result<RunOutcome, ExecError> {
        let mut reports = Vec::new();
        loop {
            match self.step(ctx, obs)? {
                Step::Continue => {}
                Step::Halted => break,
                Step::Fault(r) => {
                    self.discard_pending();
                    reports.push(*r);
                }
                Step::NeedInput => return Err(ExecError::InputExhausted),
            }
        }
        Ok(if reports.is_empty() {
            RunOutcome::CompletedClean
        } else {
            RunOutcome::Corrupted(reports)
        })
    }
}
