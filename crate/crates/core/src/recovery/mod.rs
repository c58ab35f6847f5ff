//! Function-entry snapshots and the session loop that turns each detected
//! corruption into a decision and, when needed, a restore.

mod clearance;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clearance::Clearance;
pub use snapshot::{restore, RetentionPolicy, Snapshot, SnapshotStore, DEFAULT_SNAPSHOT_CAP};

use crate::detector::{scan_landmarks, CorruptionReport, Direction};
use crate::heap::{HeapConfig, HeapError, HeapEvent, TableDump};
use crate::impact::{
    self, decide_recovery, Decision, ImpactError, ImpactVerdict, DEFAULT_IMPACT_BUDGET,
};
use crate::interp::{
    ExecConfig, ExecContext, ExecError, ExecEvent, InstrInstance, MachineState, Observer, Step,
};
use crate::program::{FuncId, Instruction, Program, Site};
use crate::slicer::{backward_slice, find_root_input, render_slice, SliceError};
use crate::typedb::TypeDb;

pub const DEFAULT_MAX_ATTEMPTS: usize = 8;

pub const PROLOGUE_LINE: &str = "[+] Take a snapshot at the prologue of the function";
pub const RESTORE_LINE: &str = "[+] Still bad input which reduces heap overflow. Restore snapshot.";
pub const GOOD_INPUT_LINE: &str = "[+] Good Input!";
pub const CONTINUE_LINE: &str = "[+] Corruption does not affect sensitive memory. Continue.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("no acceptable input left for {site} after {attempts} restores")]
    BadInputExhausted { site: String, attempts: usize },
    #[error("corruption at {label} does not depend on any input; nothing to replace")]
    NoRootInput { label: String },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error(transparent)]
    Impact(#[from] ImpactError),
    #[error(transparent)]
    Slice(#[from] SliceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionEvent {
    Snapshot {
        function: String,
        call_path: String,
        seq: u64,
    },
    Heap(HeapEvent),
    Output(i64),
    Report(CorruptionReport),
    Decision {
        seq: u64,
        decision: Decision,
        verdict: Option<ImpactVerdict>,
    },
    Restore {
        snapshot_id: u64,
        call_path: String,
        taken_at_seq: u64,
        input_site: String,
        rejected_value: i64,
    },
    GoodInput,
    Tables(TableDump),
}

impl SessionEvent {
    /// The transcript text of an event; some events are silent in text form.
    pub fn text(&self) -> Option<String> {
        match self {
            SessionEvent::Snapshot { call_path, .. } if call_path == "main" => {
                Some(PROLOGUE_LINE.into())
            }
            SessionEvent::Snapshot { .. } => None,
            SessionEvent::Heap(e) => Some(e.to_string()),
            SessionEvent::Output(v) => Some(v.to_string()),
            SessionEvent::Report(r) => Some(r.to_string()),
            SessionEvent::Decision {
                decision: Decision::LogAndContinue,
                ..
            } => Some(CONTINUE_LINE.into()),
            SessionEvent::Decision { .. } => None,
            SessionEvent::Restore { .. } => Some(RESTORE_LINE.into()),
            SessionEvent::GoodInput => Some(GOOD_INPUT_LINE.into()),
            SessionEvent::Tables(t) => Some(t.to_string().trim_end_matches('\n').to_string()),
        }
    }
}

pub trait EventSink {
    fn emit(&mut self, event: SessionEvent);
}

impl EventSink for Vec<SessionEvent> {
    fn emit(&mut self, event: SessionEvent) {
        self.push(event);
    }
}

/// Supplies values once the queue runs dry.
pub trait InputProvider {
    fn request(&mut self, site_label: &str) -> Option<i64>;
}

/// Batch mode: the queue is all there is.
pub struct NoMoreInput;

impl InputProvider for NoMoreInput {
    fn request(&mut self, _site_label: &str) -> Option<i64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionConfig {
    pub heap: HeapConfig,
    pub exec: ExecConfig,
    pub retention: RetentionPolicy,
    pub impact_budget: u64,
    pub impact_default_input: i64,
    /// Keep running after the first fault that needs recovery, reporting
    /// every later fault, and recover once the run ends.
    pub report_all_faults: bool,
    pub max_attempts: usize,
    pub record_slices: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            heap: HeapConfig::default(),
            exec: ExecConfig::default(),
            retention: RetentionPolicy::default(),
            impact_budget: DEFAULT_IMPACT_BUDGET,
            impact_default_input: 0,
            report_all_faults: false,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            record_slices: false,
        }
    }
}

/// Values rejected per input site, and how many restores were spent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoverySession {
    pub bad_inputs: BTreeMap<Site, BTreeSet<i64>>,
    pub attempts: usize,
    pub max_attempts: usize,
}

impl RecoverySession {
    pub fn new(max_attempts: usize) -> Self {
        Self {
            max_attempts,
            ..Self::default()
        }
    }

    fn reject(&mut self, site: Site, value: i64, label: &str) -> Result<(), SessionError> {
        if self.attempts >= self.max_attempts {
            return Err(SessionError::BadInputExhausted {
                site: label.to_string(),
                attempts: self.attempts,
            });
        }
        self.attempts += 1;
        self.bad_inputs.entry(site).or_default().insert(value);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SessionSummary {
    pub restores: usize,
    /// Every corruption reported, in order.
    pub reports: Vec<CorruptionReport>,
    pub decisions: Vec<Decision>,
    pub final_state: MachineState,
    pub recovery: RecoverySession,
    /// Rendered root-cause slices, one per restore, when requested.
    pub slices: Vec<String>,
}

/// Events before `horizon` are re-executions of the abandoned run and stay
/// silent while the inputs read match it.
#[derive(Debug, Clone)]
struct Replay {
    horizon: u64,
    inputs: BTreeMap<u64, i64>,
}

impl Replay {
    fn silences(replay: &Option<Replay>, seq: u64) -> bool {
        replay.as_ref().is_some_and(|r| seq < r.horizon)
    }
}

struct SessionObserver<'a, 'p> {
    program: &'p Program,
    store: &'a mut SnapshotStore,
    sink: &'a mut dyn EventSink,
    replay: &'a mut Option<Replay>,
    diagnostic: bool,
}

impl Observer for SessionObserver<'_, '_> {
    fn instance(&mut self, _state: &MachineState, inst: &InstrInstance, _instr: &Instruction) {
        if let (Some(r), Some(v)) = (self.replay.as_ref(), inst.input_value) {
            if inst.seq >= r.horizon || r.inputs.get(&inst.seq) != Some(&v) {
                log::debug!("replay diverges at seq {}", inst.seq);
                *self.replay = None;
            }
        }
    }

    fn call(&mut self, state: &MachineState, _func: FuncId) {
        if self.diagnostic {
            return;
        }
        let call_seq = state.seq() - 1;
        let silenced = Replay::silences(self.replay, call_seq);
        if let Some(s) = self.store.take(state, self.program) {
            log::debug!(
                "snapshot {} at {} (seq {})",
                s.id,
                s.call_path,
                s.taken_at_seq
            );
            if !silenced {
                self.sink.emit(SessionEvent::Snapshot {
                    function: s.function.clone(),
                    call_path: s.call_path.clone(),
                    seq: s.taken_at_seq,
                });
            }
        }
    }

    fn event(&mut self, seq: u64, event: &ExecEvent) {
        if self.diagnostic || Replay::silences(self.replay, seq) {
            return;
        }
        self.sink.emit(match event {
            ExecEvent::Heap(e) => SessionEvent::Heap(*e),
            ExecEvent::Output(v) => SessionEvent::Output(*v),
        });
    }
}

/// Runs a program under detection and recovery.
pub struct Session<'p> {
    program: &'p Program,
    typedb: &'p TypeDb,
    config: SessionConfig,
}

impl<'p> Session<'p> {
    pub fn new(program: &'p Program, typedb: &'p TypeDb, config: SessionConfig) -> Self {
        Self {
            program,
            typedb,
            config,
        }
    }

    pub fn run(
        &self,
        inputs: Vec<i64>,
        sink: &mut dyn EventSink,
        provider: &mut dyn InputProvider,
    ) -> Result<SessionSummary, SessionError> {
        let mut ctx = ExecContext::new(self.program, self.typedb).with_inputs(inputs);
        ctx.config = self.config.exec;
        let state = MachineState::new(self.program, self.config.heap)?;
        let driver = Driver {
            session: self,
            ctx,
            state,
            store: SnapshotStore::new(self.config.retention.clone()),
            clearance: Clearance::new(self.program),
            recovery: RecoverySession::new(self.config.max_attempts),
            replay: None,
            diagnostic: None,
            good_input_sent: false,
            reports: Vec::new(),
            decisions: Vec::new(),
            slices: Vec::new(),
            sink,
        };
        driver.run(provider)
    }
}

/// Convenience wrapper collecting every event.
pub fn orchestrate(
    program: &Program,
    typedb: &TypeDb,
    inputs: Vec<i64>,
    config: SessionConfig,
) -> (Result<SessionSummary, SessionError>, Vec<SessionEvent>) {
    let mut events = Vec::new();
    let result = Session::new(program, typedb, config).run(inputs, &mut events, &mut NoMoreInput);
    (result, events)
}

struct Driver<'s, 'p> {
    session: &'s Session<'p>,
    ctx: ExecContext<'p>,
    state: MachineState,
    store: SnapshotStore,
    clearance: Clearance,
    recovery: RecoverySession,
    replay: Option<Replay>,
    /// Criterion seq of the first fault awaiting recovery in report-all mode.
    diagnostic: Option<u64>,
    good_input_sent: bool,
    reports: Vec<CorruptionReport>,
    decisions: Vec<Decision>,
    slices: Vec<String>,
    sink: &'s mut dyn EventSink,
}

impl Driver<'_, '_> {
    fn program(&self) -> &Program {
        self.session.program
    }

    fn run(mut self, provider: &mut dyn InputProvider) -> Result<SessionSummary, SessionError> {
        if let Some(s) = self.store.take(&self.state, self.session.program) {
            self.sink.emit(SessionEvent::Snapshot {
                function: s.function.clone(),
                call_path: s.call_path.clone(),
                seq: s.taken_at_seq,
            });
        }
        loop {
            let step = {
                let mut obs = SessionObserver {
                    program: self.session.program,
                    store: &mut self.store,
                    sink: &mut *self.sink,
                    replay: &mut self.replay,
                    diagnostic: self.diagnostic.is_some(),
                };
                self.state.step(&self.ctx, &mut obs)
            };
            if self
                .replay
                .as_ref()
                .is_some_and(|r| self.state.seq() >= r.horizon)
            {
                self.replay = None;
            }
            match step {
                Err(e) => match self.diagnostic.take() {
                    Some(criterion) => {
                        log::debug!("diagnostic run stopped: {e}");
                        self.recover(criterion)?;
                        continue;
                    }
                    None => return Err(e.into()),
                },
                Ok(Step::NeedInput) => {
                    if let Some(criterion) = self.diagnostic.take() {
                        self.recover(criterion)?;
                        continue;
                    }
                    let label = self.program().site_label(self.state.next_site());
                    match provider.request(&label) {
                        Some(v) => self.ctx.inputs.push(v),
                        None if self.recovery.attempts > 0 => {
                            return Err(SessionError::BadInputExhausted {
                                site: label,
                                attempts: self.recovery.attempts,
                            })
                        }
                        None => return Err(ExecError::InputExhausted.into()),
                    }
                }
                Ok(Step::Halted) => match self.diagnostic.take() {
                    Some(criterion) => {
                        self.recover(criterion)?;
                        continue;
                    }
                    None => return Ok(self.finish()),
                },
                Ok(Step::Fault(report)) => self.handle_fault(*report)?,
                Ok(Step::Continue) => {}
            }
            if self.recovery.attempts > 0
                && !self.good_input_sent
                && self.diagnostic.is_none()
                && self.replay.is_none()
                && self.clearance.is_clear(&self.state)
            {
                self.good_input_sent = true;
                self.sink.emit(SessionEvent::GoodInput);
            }
        }
    }

    fn finish(self) -> SessionSummary {
        if !self.good_input_sent {
            self.sink.emit(SessionEvent::GoodInput);
        }
        self.sink.emit(SessionEvent::Tables(self.state.heap.dump()));
        SessionSummary {
            restores: self.recovery.attempts,
            reports: self.reports,
            decisions: self.decisions,
            final_state: self.state,
            recovery: self.recovery,
            slices: self.slices,
        }
    }

    fn handle_fault(&mut self, report: CorruptionReport) -> Result<(), SessionError> {
        let seq = report
            .instr
            .as_ref()
            .map_or(self.state.seq() - 1, |i| i.seq);
        let silenced = Replay::silences(&self.replay, seq);
        if !silenced {
            self.sink.emit(SessionEvent::Report(report.clone()));
            self.reports.push(report.clone());
        }
        if self.diagnostic.is_some() {
            self.state.discard_pending();
            return Ok(());
        }
        let (decision, verdict) = self.decide(&report, silenced)?;
        self.state.discard_pending();
        if !silenced {
            self.decisions.push(decision);
            self.sink.emit(SessionEvent::Decision {
                seq,
                decision,
                verdict,
            });
        }
        match decision {
            Decision::LogAndContinue => Ok(()),
            Decision::Recover if self.session.config.report_all_faults => {
                self.diagnostic = Some(seq);
                Ok(())
            }
            Decision::Recover => self.recover(seq),
        }
    }

    fn decide(
        &mut self,
        report: &CorruptionReport,
        silenced: bool,
    ) -> Result<(Decision, Option<ImpactVerdict>), SessionError> {
        if report.target_sensitive {
            return Ok((decide_recovery(report, None)?, None));
        }
        let mut scratch = self.state.clone();
        scratch.apply_pending();
        let violations = scan_landmarks(&scratch.heap);
        if let Some(first) = violations.first() {
            let decision = decide_recovery(first, None)?;
            for mut v in violations {
                v.instr = report.instr.clone();
                if !silenced {
                    self.sink.emit(SessionEvent::Report(v.clone()));
                    self.reports.push(v);
                }
            }
            return Ok((decision, None));
        }
        let corrupted: BTreeSet<u64> = if report.direction == Direction::Write {
            report.corrupted_addrs().into_iter().collect()
        } else {
            BTreeSet::new()
        };
        let verdict = if corrupted.is_empty() {
            ImpactVerdict {
                affects_sensitive: false,
                witness: None,
                budget_exhausted: false,
            }
        } else {
            let config = &self.session.config;
            impact::speculative_continue(
                scratch,
                &corrupted,
                &self.ctx,
                config.impact_budget,
                config.impact_default_input,
            )
        };
        Ok((decide_recovery(report, Some(&verdict))?, Some(verdict)))
    }

    fn recover(&mut self, criterion: u64) -> Result<(), SessionError> {
        let program = self.session.program;
        let graph = self.state.recorder().graph();
        let slice = backward_slice(graph, criterion)?;
        if self.session.config.record_slices {
            self.slices.push(render_slice(&slice, graph, program));
        }
        let Some(root) = find_root_input(&slice, graph) else {
            let label = graph
                .get(criterion)
                .map_or_else(String::new, |n| program.site_label(n.site));
            return Err(SessionError::NoRootInput { label });
        };
        let label = program.site_label(root.site);
        self.recovery.reject(root.site, root.value, &label)?;
        self.ctx.rejected = self.recovery.bad_inputs.clone();

        let snapshot = self
            .store
            .select(Some(root.seq))
            .expect("main-entry snapshot is pinned")
            .clone();
        let inputs = graph
            .nodes()
            .iter()
            .filter(|n| n.seq >= snapshot.taken_at_seq && n.seq < root.seq)
            .filter_map(|n| n.input.map(|v| (n.seq, v)))
            .collect();
        log::info!(
            "rejecting input {} at {}; restoring {} (seq {})",
            root.value,
            label,
            snapshot.call_path,
            snapshot.taken_at_seq
        );
        self.sink.emit(SessionEvent::Restore {
            snapshot_id: snapshot.id,
            call_path: snapshot.call_path.clone(),
            taken_at_seq: snapshot.taken_at_seq,
            input_site: label,
            rejected_value: root.value,
        });
        self.state = restore(&snapshot);
        self.store.drop_newer(snapshot.taken_at_seq);
        self.replay = Some(Replay {
            horizon: root.seq,
            inputs,
        });
        self.diagnostic = None;
        self.good_input_sent = false;
        Ok(())
    }
}
