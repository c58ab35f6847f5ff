//! Command-line frontend. Runs one recovery session over a program file and
//! renders its events as text or as one JSON object per line.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use heapmend::heap::{HeapEventKind, DEFAULT_HEAP_BASE};
use heapmend::impact::DEFAULT_IMPACT_BUDGET;
use heapmend::interp::DEFAULT_STEP_BUDGET;
use heapmend::recovery::{
    EventSink, InputProvider, NoMoreInput, RetentionPolicy, DEFAULT_MAX_ATTEMPTS,
    DEFAULT_SNAPSHOT_CAP,
};
use heapmend::{
    parse_program, parse_typedb, CorruptionKind, Decision, Direction, ExecConfig, ExecError,
    HeapConfig, Session, SessionConfig, SessionError, SessionEvent, TypeDb,
};
use serde_json::{json, Value};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CORRUPTION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

fn parse_address(s: &str) -> Result<u64, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    let addr = parsed.map_err(|e| e.to_string())?;
    if addr % 16 != 0 {
        return Err(format!("{addr:#x} is not 16-byte aligned"));
    }
    Ok(addr)
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "heapmend",
    version,
    about = "Run a micro-program under heap corruption detection and recovery"
)]
pub struct Config {
    #[arg(long, value_name = "PATH")]
    pub program: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub typedb: Option<PathBuf>,
    /// One integer per line; `-` prompts on the terminal.
    #[arg(long, value_name = "PATH|-")]
    pub inputs: Option<String>,
    #[arg(long, value_parser = parse_address, default_value_t = DEFAULT_HEAP_BASE)]
    pub heap_base: u64,
    #[arg(long)]
    pub no_landmarks: bool,
    #[arg(long, default_value_t = DEFAULT_SNAPSHOT_CAP)]
    pub snapshot_cap: usize,
    /// Comma-separated function names; the main entry is always captured.
    #[arg(long, value_delimiter = ',', value_name = "FN,...")]
    pub snapshot_fns: Option<Vec<String>>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = DEFAULT_STEP_BUDGET)]
    pub step_budget: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = DEFAULT_IMPACT_BUDGET)]
    pub impact_budget: u64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub impact_default_input: i64,
    #[arg(long)]
    pub report_all_faults: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long, value_name = "PATH")]
    pub dump_slice: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = DEFAULT_MAX_ATTEMPTS as u64)]
    pub max_attempts: u64,
}

impl Config {
    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            heap: HeapConfig {
                base: self.heap_base,
                landmarks: !self.no_landmarks,
                ..HeapConfig::default()
            },
            exec: ExecConfig {
                step_budget: self.step_budget,
                ..ExecConfig::default()
            },
            retention: RetentionPolicy {
                cap: self.snapshot_cap,
                functions: self
                    .snapshot_fns
                    .as_ref()
                    .map(|fns| fns.iter().cloned().collect::<BTreeSet<_>>()),
            },
            impact_budget: self.impact_budget,
            impact_default_input: self.impact_default_input,
            report_all_faults: self.report_all_faults,
            max_attempts: self.max_attempts as usize,
            record_slices: self.dump_slice.is_some(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}:{line}: not an integer: {text:?}")]
    BadInput {
        path: String,
        line: usize,
        text: String,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Session(SessionError::Exec(ExecError::InputExhausted)) => EXIT_USAGE,
            CliError::Session(_) => EXIT_CORRUPTION,
            _ => EXIT_USAGE,
        }
    }
}

fn read_file(path: &std::path::Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })
}

/// Parses an input queue: one decimal integer per line, blank lines ignored.
pub fn parse_inputs(text: &str, path: &str) -> Result<Vec<i64>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| CliError::BadInput {
                path: path.to_string(),
                line: i + 1,
                text: l.to_string(),
            })
        })
        .collect()
}

fn hex(v: u64) -> String {
    format!("{v:#x}")
}

fn kind_name(kind: CorruptionKind) -> &'static str {
    match kind {
        CorruptionKind::InterChunk => "inter_chunk",
        CorruptionKind::IntraChunk => "intra_chunk",
        CorruptionKind::UseAfterFree => "use_after_free",
        CorruptionKind::LandmarkViolation => "landmark_violation",
    }
}

/// The JSON record of an event. Events that are silent in text mode have
/// no record either, so both formats list the same sequence.
pub fn event_json(event: &SessionEvent) -> Option<Value> {
    event.text()?;
    Some(match event {
        SessionEvent::Snapshot {
            function,
            call_path,
            seq,
        } => json!({"event": "snapshot", "function": function, "call_path": call_path, "seq": seq}),
        SessionEvent::Heap(h) => json!({
            "event": "heap",
            "kind": match h.kind {
                HeapEventKind::Allocate => "allocate",
                HeapEventKind::Release => "release",
                HeapEventKind::FreeInsert => "free_insert",
            },
            "base": hex(h.base),
            "size": hex(h.size),
            "sensitive": h.sensitive,
        }),
        SessionEvent::Output(v) => json!({"event": "output", "value": v}),
        SessionEvent::Report(r) => json!({
            "event": "report",
            "kind": kind_name(r.kind),
            "direction": match r.direction {
                Direction::Read => "read",
                Direction::Write => "write",
            },
            "fault_addr": hex(r.fault_addr),
            "last_valid": r.last_valid.map(hex),
            "chunk_base": r.chunk.as_ref().map(|c| hex(c.base)),
            "chunk_size": r.chunk.as_ref().map(|c| hex(c.usable)),
            "target_sensitive": r.target_sensitive,
            "seq": r.instr.as_ref().map(|i| i.seq),
            "label": r.instr.as_ref().map(|i| i.label.clone()),
        }),
        SessionEvent::Decision {
            seq,
            decision,
            verdict,
        } => json!({
            "event": "decision",
            "seq": seq,
            "decision": match decision {
                Decision::Recover => "recover",
                Decision::LogAndContinue => "log_and_continue",
            },
            "affects_sensitive": verdict.as_ref().map(|v| v.affects_sensitive),
            "budget_exhausted": verdict.as_ref().map(|v| v.budget_exhausted),
        }),
        SessionEvent::Restore {
            snapshot_id,
            call_path,
            taken_at_seq,
            input_site,
            rejected_value,
        } => json!({
            "event": "restore",
            "decision": "recover",
            "snapshot_id": snapshot_id,
            "call_path": call_path,
            "seq": taken_at_seq,
            "label": input_site,
            "rejected_value": rejected_value,
        }),
        SessionEvent::GoodInput => json!({"event": "good_input"}),
        SessionEvent::Tables(t) => {
            let rows = |rows: &[(u64, u64)]| -> Vec<Value> {
                rows.iter()
                    .map(|&(b, s)| json!({"base": hex(b), "size": hex(s)}))
                    .collect()
            };
            json!({"event": "tables", "free": rows(&t.free), "allocated": rows(&t.allocated)})
        }
    })
}

/// Renders one event in the chosen format, without a trailing newline.
pub fn render_event(event: &SessionEvent, format: Format) -> Option<String> {
    match format {
        Format::Text => event.text(),
        Format::Json => event_json(event).map(|v| v.to_string()),
    }
}

struct StreamSink<'w> {
    out: &'w mut dyn Write,
    format: Format,
    failed: Option<io::Error>,
}

impl EventSink for StreamSink<'_> {
    fn emit(&mut self, event: SessionEvent) {
        if self.failed.is_some() {
            return;
        }
        if let Some(line) = render_event(&event, self.format) {
            if let Err(e) = writeln!(self.out, "{line}").and_then(|()| self.out.flush()) {
                self.failed = Some(e);
            }
        }
    }
}

/// Prompts on the diagnostic stream so the transcript stays clean.
struct Prompt<'a> {
    input: &'a mut dyn BufRead,
    prompt: &'a mut dyn Write,
}

impl InputProvider for Prompt<'_> {
    fn request(&mut self, site_label: &str) -> Option<i64> {
        loop {
            let _ = write!(self.prompt, "input for {site_label}: ");
            let _ = self.prompt.flush();
            let mut line = String::new();
            match self.input.read_line(&mut line) {
                Ok(0) | Err(_) => return None,
                Ok(_) => match line.trim().parse() {
                    Ok(v) => return Some(v),
                    Err(_) => {
                        let _ = writeln!(self.prompt, "not an integer: {:?}", line.trim());
                    }
                },
            }
        }
    }
}

fn execute(
    config: &Config,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let program_text = read_file(&config.program)?;
    let program = parse_program(&program_text).map_err(|e| CliError::Parse {
        path: config.program.display().to_string(),
        message: e.to_string(),
    })?;
    let (mut typedb, db_path) = match &config.typedb {
        Some(path) => {
            let text = read_file(path)?;
            let db = parse_typedb(&text).map_err(|e| CliError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            (db, path.display().to_string())
        }
        None => (TypeDb::default(), "<typedb>".to_string()),
    };
    typedb
        .check_program(&program)
        .map_err(|e| CliError::Parse {
            path: db_path,
            message: e.to_string(),
        })?;
    let interactive = config.inputs.as_deref() == Some("-");
    let inputs = match config.inputs.as_deref() {
        Some("-") | None => Vec::new(),
        Some(path) => parse_inputs(&read_file(path.as_ref())?, path)?,
    };

    let session = Session::new(&program, &typedb, config.session_config());
    let mut sink = StreamSink {
        out: stdout,
        format: config.format,
        failed: None,
    };
    let result = if interactive {
        let mut prompt = Prompt {
            input: stdin,
            prompt: stderr,
        };
        session.run(inputs, &mut sink, &mut prompt)
    } else {
        session.run(inputs, &mut sink, &mut NoMoreInput)
    };
    if let Some(source) = sink.failed {
        return Err(CliError::Write {
            path: "<stdout>".into(),
            source,
        });
    }
    let summary = result?;
    log::info!(
        "{} report(s), {} restore(s), {} step(s)",
        summary.reports.len(),
        summary.restores,
        summary.final_state.steps()
    );
    if let Some(path) = &config.dump_slice {
        let mut text = summary.slices.join("\n");
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        fs::write(path, text).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Runs the frontend against explicit streams and returns the exit code.
pub fn run_cli_with<I, T>(
    argv: I,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let config = match Config::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    match execute(&config, stdin, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.exit_code() == EXIT_USAGE {
                let _ = writeln!(
                    stderr,
                    "usage: heapmend --program <PATH> [OPTIONS]; see --help"
                );
            }
            e.exit_code()
        }
    }
}

/// Runs the frontend on the process streams.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdin = io::stdin();
    let mut stdin = stdin.lock();
    let mut stdout = io::stdout().lock();
    let mut stderr = io::stderr().lock();
    run_cli_with(argv, &mut stdin, &mut stdout, &mut stderr)
}
