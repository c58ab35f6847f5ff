//! Oracles and whole-corpus checks shared by the core tests and the CLI
//! acceptance target. Every check returns a one-line summary or the first
//! disagreement found.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use heapmend::chunk::{
    decode_size_field, encode_size_field, trailer_bytes, ChunkFlags, ChunkHeader,
};
use heapmend::detector::{check_store, scan_landmarks, InstrRef};
use heapmend::heap::{ChunkRecord, Classification, Heap, HeapConfig};
use heapmend::impact::{speculative_continue, Decision, ImpactVerdict, DEFAULT_IMPACT_BUDGET};
use heapmend::interp::{ExecContext, MachineState, Observer, Step};
use heapmend::program::{control_dependence, post_dominators, Cfg, FuncId, Program, Site};
use heapmend::recovery::{
    orchestrate, restore, RetentionPolicy, SessionEvent, Snapshot, SnapshotStore,
};
use heapmend::scenarios::{self, Scenario, ALL};
use heapmend::slicer::{backward_slice, find_root_input, DepNode, DependenceGraph};
use heapmend::{CorruptionKind, TypeDb};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub type Check = Result<String, String>;

pub const CASE_STUDY_LIMIT: Duration = Duration::from_secs(1);
pub const SUITE_LIMIT: Duration = Duration::from_secs(60);
pub const CLASSIFY_TRIALS: usize = 1000;
pub const CFG_TRIALS: usize = 200;
pub const SLICE_TRIALS: usize = 200;
pub const CODEC_SIZES: usize = 10_000;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn transcript(events: &[SessionEvent]) -> Vec<String> {
    events
        .iter()
        .filter_map(SessionEvent::text)
        .flat_map(|t| t.lines().map(str::to_string).collect::<Vec<_>>())
        .collect()
}

fn label_matches(line: &str, prefix: &str) -> bool {
    line.strip_prefix(prefix).is_some_and(|rest| {
        rest.strip_prefix("main:L")
            .is_some_and(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))
    })
}

/// Checks a transcript against the reference session shape. Required lines
/// appear once each and in order, except the prologue line, which may come
/// first. The final dump lists both buffers as free.
pub fn check_off_by_one_lines(lines: &[String]) -> Check {
    let count = |want: &str| lines.iter().filter(|l| *l == want).count();
    let position = |want: &str| lines.iter().position(|l| l == want);
    let exact = [
        "[+] TA <- (0x2088010, 0x80)",
        "[+] TA <- (0x20880a0, 0x80)",
        "[+] Take a snapshot at the prologue of the function",
        "[+] Still bad input which reduces heap overflow. Restore snapshot.",
        "[+] Good Input!",
    ];
    for want in exact {
        ensure!(
            count(want) == 1,
            "expected exactly one `{want}`, found {}",
            count(want)
        );
    }
    let overflow = |lo: &str| {
        let prefix = format!("[!] heap overflow ({lo}) at ");
        let hits: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| label_matches(l, &prefix))
            .map(|(i, _)| i)
            .collect();
        hits
    };
    let first = overflow("0x208808f, 0x2088090");
    let second = overflow("0x208811f, 0x2088120");
    ensure!(
        first.len() == 1,
        "first overflow line appears {} times",
        first.len()
    );
    ensure!(
        second.len() == 1,
        "second overflow line appears {} times",
        second.len()
    );
    let overflow_lines = lines.iter().filter(|l| l.starts_with("[!]")).count();
    ensure!(
        overflow_lines == 2,
        "expected two report lines, found {overflow_lines}"
    );

    let order = [
        position(exact[0]).unwrap(),
        position(exact[1]).unwrap(),
        first[0],
        second[0],
        position(exact[3]).unwrap(),
        position(exact[4]).unwrap(),
    ];
    ensure!(
        order.windows(2).all(|w| w[0] < w[1]),
        "lines out of order: {order:?}"
    );
    let echo_128 = lines.iter().position(|l| l == "128");
    let echo_56 = lines.iter().position(|l| l == "56");
    ensure!(
        matches!((echo_128, echo_56), (Some(a), Some(b)) if a < first[0] && order[4] < b && b < order[5]),
        "echoed inputs misplaced: 128 at {echo_128:?}, 56 at {echo_56:?}"
    );

    let tail: Vec<&str> = lines
        .iter()
        .skip_while(|l| *l != "Free table:")
        .map(String::as_str)
        .collect();
    let expected_tail = [
        "Free table:",
        "(0x2088010, 0x80)",
        "(0x20880a0, 0x80)",
        "",
        "Allocation table:",
        "Empty",
    ];
    ensure!(tail == expected_tail, "final dump differs: {tail:?}");
    Ok("transcript lines, order and final dump match".into())
}

/// The reference session through the library.
pub fn off_by_one_session() -> Check {
    let start = Instant::now();
    let s = scenarios::OFF_BY_ONE;
    let (program, db) = s.load().map_err(|e| e.to_string())?;
    let (result, events) = orchestrate(&program, &db, vec![128, 56], s.session_config());
    let summary = result.map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check_off_by_one_lines(&transcript(&events))?;
    ensure!(
        summary.restores == 1,
        "expected one restore, got {}",
        summary.restores
    );
    ensure!(elapsed < CASE_STUDY_LIMIT, "took {elapsed:?}");
    Ok(format!("{elapsed:?}"))
}

pub fn goaty() -> Check {
    let start = Instant::now();
    let s = scenarios::GOATY;
    let (program, db) = s.load().map_err(|e| e.to_string())?;
    let (result, _) = orchestrate(&program, &db, s.inputs.to_vec(), s.session_config());
    let summary = result.map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let intra: Vec<_> = summary
        .reports
        .iter()
        .filter(|r| r.kind == CorruptionKind::IntraChunk)
        .collect();
    let inter = summary
        .reports
        .iter()
        .filter(|r| r.kind == CorruptionKind::InterChunk)
        .count();
    ensure!(
        intra.len() == 1,
        "expected one intra-chunk report, got {}",
        intra.len()
    );
    ensure!(inter == 0, "expected no inter-chunk reports, got {inter}");
    // Field layout oracle: name occupies bytes 0..8, so the first stray
    // byte of the 12-byte copy is at 8.
    let name_len = "projectgoat\0".len() as u64;
    ensure!(name_len == 12, "payload length {name_len}");
    ensure!(
        intra[0].chunk_offset() == Some(8),
        "offset {:?}",
        intra[0].chunk_offset()
    );
    ensure!(elapsed < CASE_STUDY_LIMIT, "took {elapsed:?}");
    Ok(format!("one intra-chunk report at offset 8, {elapsed:?}"))
}

pub fn nullhttpd() -> Check {
    let start = Instant::now();
    let s = scenarios::NULLHTTPD;
    let (program, db) = s.load().map_err(|e| e.to_string())?;
    let (result, events) = orchestrate(&program, &db, s.inputs.to_vec(), s.session_config());
    let summary = result.map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let request: i64 = -800 + 1024;
    let usable = (request as u64).max(16).div_ceil(16) * 16;
    ensure!(usable == 224, "oracle usable size {usable}");
    let base = HeapConfig::default().base;
    let first_alloc = events.iter().find_map(|e| match e {
        SessionEvent::Heap(h) => Some(*h),
        _ => None,
    });
    ensure!(
        matches!(first_alloc, Some(h) if h.base == base && h.size == usable),
        "first allocation {first_alloc:?}"
    );
    let inter = summary
        .reports
        .iter()
        .find(|r| r.kind == CorruptionKind::InterChunk)
        .ok_or("no inter-chunk report")?;
    ensure!(
        inter.last_valid == Some(base + 223) && inter.fault_addr == base + 224,
        "inter-chunk at ({:?}, {:#x})",
        inter.last_valid,
        inter.fault_addr
    );
    ensure!(
        !inter.target_sensitive,
        "POST buffer should not be sensitive"
    );

    // The neighbour starts one header past the buffer; its trailer sits
    // right after its 512 usable bytes.
    let neighbour = base + usable + 16;
    let landmark = summary
        .reports
        .iter()
        .find(|r| r.kind == CorruptionKind::LandmarkViolation)
        .ok_or("no landmark violation")?;
    let chunk = landmark.chunk.as_ref().ok_or("violation names no chunk")?;
    ensure!(
        chunk.base == neighbour && chunk.sensitive,
        "violation on {chunk:?}"
    );
    ensure!(
        landmark.fault_addr == neighbour + 512,
        "violation at {:#x}",
        landmark.fault_addr
    );
    ensure!(
        payload_reaches(neighbour + 512, base, 1000),
        "payload arithmetic"
    );
    scan_at_first_fault(&program, &db, s, neighbour)?;
    ensure!(
        summary.restores == 1,
        "expected one restore, got {}",
        summary.restores
    );
    ensure!(elapsed < CASE_STUDY_LIMIT, "took {elapsed:?}");
    Ok(format!(
        "224-byte buffer, overflow at base+224, landmark hit on {neighbour:#x}, {elapsed:?}"
    ))
}

/// Runs without recovery to the payload store and checks the trailer of the
/// neighbour before and after the withheld write lands.
fn scan_at_first_fault(
    program: &Program,
    db: &TypeDb,
    s: Scenario,
    neighbour: u64,
) -> Result<(), String> {
    let ctx = ExecContext::new(program, db).with_inputs(s.inputs.to_vec());
    let mut state = MachineState::new(program, s.heap_config()).map_err(|e| e.to_string())?;
    loop {
        match state
            .step(&ctx, &mut heapmend::interp::NoObserver)
            .map_err(|e| e.to_string())?
        {
            Step::Continue => {}
            Step::Fault(_) => break,
            other => return Err(format!("no fault, stopped with {other:?}")),
        }
    }
    let record = state
        .heap
        .tables()
        .get(neighbour)
        .cloned()
        .ok_or("neighbour not allocated")?;
    let trailer = state.heap.read(neighbour + record.usable, 16);
    ensure!(
        trailer == trailer_bytes(),
        "trailer before payload {trailer:02x?}"
    );
    ensure!(
        trailer[..8] == [0xef, 0xef, 0xef, 0xef, 0xfe, 0xfe, 0xfe, 0xfe],
        "landmark bytes {trailer:02x?}"
    );
    ensure!(
        scan_landmarks(&state.heap).is_empty(),
        "violation before the payload landed"
    );
    state.apply_pending();
    let found = scan_landmarks(&state.heap);
    ensure!(
        found.len() == 1 && found[0].chunk.as_ref().is_some_and(|c| c.base == neighbour),
        "scan after payload found {found:?}"
    );
    Ok(())
}

fn payload_reaches(addr: u64, start: u64, len: u64) -> bool {
    start <= addr && addr < start + len
}

/// Decision for the first fault of a scenario, and whether speculation ran.
pub fn first_decision(s: &Scenario) -> Result<(Decision, Option<ImpactVerdict>, bool), String> {
    let (program, db) = s.load().map_err(|e| e.to_string())?;
    let (result, events) = orchestrate(&program, &db, s.inputs.to_vec(), s.session_config());
    let summary = result.map_err(|e| e.to_string())?;
    let (decision, verdict) = events
        .iter()
        .find_map(|e| match e {
            SessionEvent::Decision {
                decision, verdict, ..
            } => Some((*decision, verdict.clone())),
            _ => None,
        })
        .ok_or_else(|| format!("{}: no decision", s.name))?;
    let clean = summary.final_state.is_halted();
    Ok((decision, verdict, clean))
}

pub fn decision_matrix() -> Check {
    let (d, v, clean) = first_decision(&scenarios::OFF_BY_ONE)?;
    ensure!(
        d == Decision::Recover && v.is_none() && clean,
        "sensitive: {d:?} {v:?}"
    );
    let (d, v, clean) = first_decision(&scenarios::BENIGN_OVERFLOW)?;
    ensure!(
        d == Decision::LogAndContinue && v.as_ref().is_some_and(|v| !v.affects_sensitive) && clean,
        "benign: {d:?} {v:?}"
    );
    let (d, v, clean) = first_decision(&scenarios::TAINTED_COPY)?;
    ensure!(
        d == Decision::Recover && v.as_ref().is_some_and(|v| v.affects_sensitive) && clean,
        "tainted copy: {d:?} {v:?}"
    );
    Ok("sensitive -> Recover, benign -> LogAndContinue, tainted -> Recover".into())
}

pub fn codec_round_trip() -> Check {
    let mut rng = StdRng::seed_from_u64(0xc0dec);
    let mut sizes: Vec<u64> = (1..=CODEC_SIZES as u64 / 2).map(|i| i * 16).collect();
    while sizes.len() < CODEC_SIZES {
        sizes.push(rng.gen_range(1..1u64 << 59) * 16);
    }
    let mut checked = 0;
    for bits in 0..8u64 {
        let flags = ChunkFlags::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
        for &size in &sizes {
            let raw = encode_size_field(size, flags).map_err(|e| e.to_string())?;
            ensure!(raw == size | bits, "encode({size:#x}, {bits}) = {raw:#x}");
            ensure!(decode_size_field(raw) == (size, flags), "decode({raw:#x})");
            let header = ChunkHeader::new(size ^ 0x55, size, flags).map_err(|e| e.to_string())?;
            ensure!(
                ChunkHeader::from_bytes(&header.to_bytes()) == header,
                "header bytes for {size:#x}"
            );
            let skew = 1 + (size / 16) % 7;
            ensure!(
                encode_size_field(size + skew, flags).is_err(),
                "misaligned {size:#x}+{skew} accepted"
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} size/flag pairs"))
}

#[derive(Debug, PartialEq, Eq)]
enum Class {
    Sensitive(u64),
    NonSensitive(u64),
    Freed(u64),
    Unowned,
}

fn scan_oracle(records: &[(ChunkRecord, bool)], addr: u64, width: u64) -> Class {
    let end = addr + width;
    if let Some((r, _)) = records
        .iter()
        .find(|(r, live)| *live && r.base <= addr && end <= r.base + r.usable)
    {
        return if r.sensitive {
            Class::Sensitive(r.base)
        } else {
            Class::NonSensitive(r.base)
        };
    }
    let overlaps = |r: &ChunkRecord| addr < r.base + r.usable && r.base < end;
    let live_hit = records.iter().any(|(r, live)| *live && overlaps(r));
    let freed = records
        .iter()
        .filter(|(r, live)| !*live && overlaps(r))
        .map(|(r, _)| r.base)
        .min();
    match freed {
        Some(b) if !live_hit => Class::Freed(b),
        _ => Class::Unowned,
    }
}

pub fn random_heap(rng: &mut StdRng, max_chunks: usize) -> Heap {
    let mut heap = Heap::new(HeapConfig {
        landmarks: rng.gen_bool(0.5),
        ..HeapConfig::default()
    })
    .expect("default base");
    let n = rng.gen_range(1..=max_chunks);
    let mut bases = Vec::new();
    for _ in 0..n {
        heap.toggle_sensitive(rng.gen_bool(0.5));
        bases.push(
            heap.alloc(rng.gen_range(1..=64), "main:L0", None)
                .expect("fits"),
        );
    }
    for b in bases {
        if rng.gen_bool(0.3) {
            heap.free(b).expect("live");
        }
    }
    heap
}

pub fn classify_matches_scan() -> Check {
    let mut rng = StdRng::seed_from_u64(0xc1a55);
    let mut queries = 0u64;
    for trial in 0..CLASSIFY_TRIALS {
        let heap = random_heap(&mut rng, 4);
        let records: Vec<(ChunkRecord, bool)> = heap
            .tables()
            .all()
            .map(|r| (r.clone(), heap.tables().is_live(r.base)))
            .collect();
        for addr in heap.image_start() - 16..heap.top() + 16 {
            for width in 1..=32 {
                let got = match heap.classify(addr, width) {
                    Classification::Sensitive(r) => Class::Sensitive(r.base),
                    Classification::NonSensitive(r) => Class::NonSensitive(r.base),
                    Classification::Freed(r) => Class::Freed(r.base),
                    Classification::Unowned => Class::Unowned,
                };
                let want = scan_oracle(&records, addr, width);
                ensure!(
                    got == want,
                    "trial {trial}: ({addr:#x}, {width}) gave {got:?}, scan says {want:?}"
                );
                queries += 1;
            }
        }
    }
    Ok(format!("{queries} queries over {CLASSIFY_TRIALS} heaps"))
}

/// Store verdicts against the range oracle, including the reported fault
/// address, on small random heaps.
pub fn store_checks_match_oracle(trials: usize) -> Check {
    let mut rng = StdRng::seed_from_u64(0x5707e);
    let db = TypeDb::default();
    let at = InstrRef {
        seq: 0,
        site: Site {
            func: FuncId(0),
            pc: 0,
        },
        label: "main:L0".into(),
    };
    for trial in 0..trials {
        let heap = random_heap(&mut rng, 3);
        let records: Vec<(ChunkRecord, bool)> = heap
            .tables()
            .all()
            .map(|r| (r.clone(), heap.tables().is_live(r.base)))
            .collect();
        for addr in heap.image_start() - 16..heap.top() + 16 {
            for len in 1..=32 {
                let report = check_store(&heap, &db, addr, len, None, &at);
                match scan_oracle(&records, addr, len) {
                    Class::Sensitive(_) | Class::NonSensitive(_) => {
                        ensure!(
                            report.is_none(),
                            "trial {trial}: in-bounds ({addr:#x}, {len}) reported"
                        )
                    }
                    Class::Freed(_) => ensure!(
                        report
                            .as_ref()
                            .is_some_and(|r| r.kind == CorruptionKind::UseAfterFree),
                        "trial {trial}: ({addr:#x}, {len}) should be use-after-free"
                    ),
                    Class::Unowned => {
                        let r = report
                            .ok_or_else(|| format!("trial {trial}: ({addr:#x}, {len}) missed"))?;
                        ensure!(
                            r.kind == CorruptionKind::InterChunk,
                            "trial {trial}: kind {:?}",
                            r.kind
                        );
                        let start_in = records
                            .iter()
                            .find(|(c, _)| c.base <= addr && addr < c.base + c.usable);
                        let want = start_in.map_or(addr, |(c, _)| c.base + c.usable);
                        ensure!(
                            r.fault_addr == want,
                            "trial {trial}: fault {:#x} != {want:#x}",
                            r.fault_addr
                        );
                        ensure!(r.last_valid == Some(want - 1), "trial {trial}: last_valid");
                    }
                }
            }
        }
    }
    Ok(format!("{trials} heaps"))
}

fn reaches_exit_avoiding(succs: &[Vec<usize>], exit: usize, from: usize, avoid: usize) -> bool {
    let mut seen = vec![false; exit + 1];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(n) = stack.pop() {
        if n == exit {
            return true;
        }
        for &s in &succs[n] {
            if s != avoid && !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    false
}

pub fn random_cfg(rng: &mut StdRng, max_nodes: usize) -> Vec<Vec<usize>> {
    let n = rng.gen_range(1..=max_nodes);
    (0..n)
        .map(|i| {
            // A forward edge keeps the exit reachable from every node.
            let mut s = vec![rng.gen_range(i + 1..=n)];
            if rng.gen_bool(0.5) {
                s.push(rng.gen_range(0..=n));
            }
            s
        })
        .collect()
}

pub fn pdom_cd_match_bruteforce() -> Check {
    let mut rng = StdRng::seed_from_u64(0xd0);
    let mut edges_checked = 0;
    for trial in 0..CFG_TRIALS {
        let succs = random_cfg(&mut rng, 10);
        let n = succs.len();
        let exit = n;
        let cfg = Cfg::new(succs.clone());
        let mut full = succs.clone();
        full.push(Vec::new());
        let pd = post_dominators(&cfg);
        let cd = control_dependence(&cfg, &pd);

        let pdom =
            |d: usize, x: usize| x == d || (x != exit && !reaches_exit_avoiding(&full, exit, x, d));
        for x in 0..=n {
            let strict: Vec<usize> = (0..=n).filter(|&d| d != x && pdom(d, x)).collect();
            let want = strict
                .iter()
                .copied()
                .find(|&d| strict.iter().all(|&e| pdom(e, d)));
            ensure!(
                pd.ipdom(x) == want,
                "trial {trial}: ipdom({x}) = {:?}, brute {want:?} in {succs:?}",
                pd.ipdom(x)
            );
            for d in 0..=n {
                ensure!(
                    pd.post_dominates(d, x) == pdom(d, x),
                    "trial {trial}: pdom({d}, {x})"
                );
            }
        }
        for x in 0..n {
            for y in 0..=n {
                let want = full[x].iter().any(|&s| pdom(y, s)) && !(y != x && pdom(y, x));
                ensure!(
                    cd[y].contains(&x) == want,
                    "trial {trial}: cd({y} on {x}) = {}, brute {want} in {succs:?}",
                    cd[y].contains(&x)
                );
                edges_checked += 1;
            }
        }
    }
    Ok(format!(
        "{CFG_TRIALS} graphs, {edges_checked} dependence pairs"
    ))
}

pub fn random_dependence_graph(rng: &mut StdRng, max_nodes: usize) -> DependenceGraph {
    let n = rng.gen_range(1..=max_nodes);
    let mut g = DependenceGraph::new();
    for i in 0..n as u64 {
        let data = (0..i).filter(|_| rng.gen_bool(0.08)).collect();
        let control = (i > 0 && rng.gen_bool(0.3)).then(|| rng.gen_range(0..i));
        let input = rng.gen_bool(0.2).then(|| rng.gen_range(-5..5));
        g.push(DepNode {
            seq: i,
            site: Site {
                func: FuncId(0),
                pc: i as u32,
            },
            data,
            control,
            input,
        });
    }
    g
}

pub fn slice_matches_closure() -> Check {
    let mut rng = StdRng::seed_from_u64(0x511ce);
    for trial in 0..SLICE_TRIALS {
        let g = random_dependence_graph(&mut rng, 50);
        let n = g.len();
        let mut reach = vec![vec![false; n]; n];
        for node in g.nodes() {
            let i = node.seq as usize;
            reach[i][i] = true;
            for &d in node.data.iter().chain(node.control.iter()) {
                reach[i][d as usize] = true;
            }
        }
        for k in 0..n {
            for i in 0..n {
                if reach[i][k] {
                    for j in 0..n {
                        if reach[k][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
        }
        let criterion = rng.gen_range(0..n);
        let slice = backward_slice(&g, criterion as u64).map_err(|e| e.to_string())?;
        let want: BTreeSet<u64> = (0..n)
            .filter(|&j| reach[criterion][j])
            .map(|j| j as u64)
            .collect();
        ensure!(
            slice.members == want,
            "trial {trial}: slice differs from closure"
        );
        let want_root = want
            .iter()
            .rev()
            .find(|&&s| g.get(s).is_some_and(|n| n.input.is_some()))
            .copied();
        ensure!(
            find_root_input(&slice, &g).map(|r| r.seq) == want_root,
            "trial {trial}: root input"
        );
    }
    Ok(format!("{SLICE_TRIALS} graphs"))
}

struct SnapshotCollector<'p> {
    program: &'p Program,
    store: SnapshotStore,
    taken: Vec<Snapshot>,
}

impl Observer for SnapshotCollector<'_> {
    fn call(&mut self, state: &MachineState, _func: FuncId) {
        if let Some(s) = self.store.take(state, self.program) {
            self.taken.push(s.clone());
        }
    }
}

/// Every snapshot taken while running a scenario without recovery. Faulting
/// writes are suppressed.
pub fn collect_snapshots(s: &Scenario) -> Result<Vec<Snapshot>, String> {
    let (program, db) = s.load().map_err(|e| e.to_string())?;
    let ctx = ExecContext::new(&program, &db).with_inputs(s.inputs.to_vec());
    let mut state = MachineState::new(&program, s.heap_config()).map_err(|e| e.to_string())?;
    let mut obs = SnapshotCollector {
        program: &program,
        store: SnapshotStore::new(RetentionPolicy::default()),
        taken: Vec::new(),
    };
    let main = obs
        .store
        .take(&state, &program)
        .cloned()
        .ok_or("main snapshot")?;
    obs.taken.push(main);
    loop {
        match state.step(&ctx, &mut obs) {
            Ok(Step::Continue) => {}
            Ok(Step::Fault(_)) => {
                state.discard_pending();
            }
            _ => break,
        }
    }
    Ok(obs.taken)
}

pub fn snapshot_round_trip() -> Check {
    let mut count = 0;
    for s in ALL {
        for snap in collect_snapshots(s)? {
            let json = serde_json::to_string(&snap).map_err(|e| e.to_string())?;
            let back: Snapshot = serde_json::from_str(&json).map_err(|e| e.to_string())?;
            ensure!(
                back == snap,
                "{}: snapshot {} changed across serialization",
                s.name,
                snap.id
            );
            let again = serde_json::to_string(&back).map_err(|e| e.to_string())?;
            ensure!(again == json, "{}: reserialization differs", s.name);
            let restored = restore(&snap);
            ensure!(restored == snap.state, "{}: restore differs", s.name);
            let restored_json = serde_json::to_string(&restored).map_err(|e| e.to_string())?;
            ensure!(
                restored_json == serde_json::to_string(&snap.state).unwrap(),
                "{}: restored serialization differs",
                s.name
            );
            count += 1;
        }
    }
    ensure!(count > ALL.len(), "only {count} snapshots taken");
    Ok(format!("{count} snapshots"))
}

/// Bytes of every sensitive chunk including its trailer, after running to
/// completion with faulting writes applied.
fn concrete_outcome(
    mut state: MachineState,
    ctx: &ExecContext<'_>,
) -> Result<BTreeMap<u64, Vec<u8>>, String> {
    let mut run_ctx = ctx.clone();
    run_ctx.inputs.truncate(state.input_cursor());
    run_ctx.default_input = Some(0);
    state.recorder_mut().set_enabled(false);
    for _ in 0..DEFAULT_IMPACT_BUDGET {
        match state.step(&run_ctx, &mut heapmend::interp::NoObserver) {
            Ok(Step::Continue) => {}
            Ok(Step::Fault(_)) => {
                state.apply_pending();
            }
            Ok(_) => {
                return Ok(state
                    .heap
                    .tables()
                    .all()
                    .filter(|r| r.sensitive)
                    .map(|r| (r.base, state.heap.read(r.base, r.usable + r.trailer_len())))
                    .collect())
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Err("budget".into())
}

pub const PERTURBATIONS: usize = 8;

fn perturbations(v: u8) -> [u8; PERTURBATIONS] {
    [0, 1, 0x7f, 0x80, 0xff, 0x55, 0xaa, v ^ 1]
}

pub struct ImpactCase {
    pub scenario: &'static str,
    pub label: String,
    pub verdict: ImpactVerdict,
    pub observed_effect: bool,
}

/// Every non-sensitive write fault in a scenario, with the speculative
/// verdict and whether any perturbation of a corrupted byte changed a
/// sensitive byte in a concrete rerun.
pub fn impact_cases(s: &Scenario) -> Result<Vec<ImpactCase>, String> {
    let (program, db) = s.load().map_err(|e| e.to_string())?;
    impact_cases_for(s.name, &program, &db, s.inputs, s.heap_config())
}

fn impact_cases_for(
    name: &'static str,
    program: &Program,
    db: &TypeDb,
    inputs: &[i64],
    heap: HeapConfig,
) -> Result<Vec<ImpactCase>, String> {
    let ctx = ExecContext::new(program, db).with_inputs(inputs.to_vec());
    let mut state = MachineState::new(program, heap).map_err(|e| e.to_string())?;
    let mut cases = Vec::new();
    loop {
        match state.step(&ctx, &mut heapmend::interp::NoObserver) {
            Ok(Step::Continue) => {}
            Ok(Step::Fault(report)) => {
                if state.pending().is_some() && !report.target_sensitive {
                    let mut scratch = state.clone();
                    scratch.apply_pending();
                    if scan_landmarks(&scratch.heap).is_empty() {
                        let corrupted: BTreeSet<u64> =
                            report.corrupted_addrs().into_iter().collect();
                        let verdict = speculative_continue(
                            scratch.clone(),
                            &corrupted,
                            &ctx,
                            DEFAULT_IMPACT_BUDGET,
                            0,
                        );
                        let baseline = concrete_outcome(scratch.clone(), &ctx);
                        let mut observed_effect = false;
                        'bytes: for &a in &corrupted {
                            let v = scratch.heap.read_byte(a);
                            for value in perturbations(v) {
                                let mut p = scratch.clone();
                                p.heap.write(a, &[value]);
                                if concrete_outcome(p, &ctx) != baseline {
                                    observed_effect = true;
                                    break 'bytes;
                                }
                            }
                        }
                        cases.push(ImpactCase {
                            scenario: name,
                            label: report
                                .instr
                                .as_ref()
                                .map_or_else(String::new, |i| i.label.clone()),
                            verdict,
                            observed_effect,
                        });
                    }
                }
                state.discard_pending();
            }
            _ => break,
        }
    }
    Ok(cases)
}

pub fn impact_no_false_negatives() -> Check {
    let mut total = 0;
    let mut effects = 0;
    for s in ALL {
        for case in impact_cases(s)? {
            total += 1;
            if case.observed_effect {
                effects += 1;
                ensure!(
                    case.verdict.affects_sensitive,
                    "{} at {}: perturbation reaches sensitive memory but verdict says no",
                    case.scenario,
                    case.label
                );
            }
        }
    }
    ensure!(
        effects > 0 && total > effects,
        "corpus does not exercise both outcomes ({effects}/{total})"
    );
    Ok(format!(
        "{total} faults, {effects} with observable effect, no false negatives"
    ))
}

/// A straight-line program that overflows from `a` into `b`, then moves
/// bytes of `b` around with random statements. Some of them write into the
/// sensitive chunk `s`.
pub fn random_impact_program(rng: &mut StdRng, statements: usize) -> String {
    let mut lines = vec![
        "a = alloc 16".to_string(),
        "b = alloc 16".into(),
        "toggle_sensitive on".into(),
        "s = alloc 32".into(),
        "toggle_sensitive off".into(),
    ];
    for r in 0..4 {
        lines.push(format!("v{r} = const {}", rng.gen_range(0..4)));
    }
    for off in [0, 8] {
        lines.push(format!("p = add b {off}"));
        lines.push(format!("store8 p {}", rng.gen_range(0..1i64 << 40)));
    }
    let start = rng.gen_range(0..16u64);
    let len = rng.gen_range(33 - start..=48 - start);
    let payload: String = (0..len)
        .map(|_| format!("\\x{:02x}", rng.gen::<u8>()))
        .collect();
    lines.push(format!("p = add a {start}"));
    lines.push(format!("store_bytes p \"{payload}\""));
    let reg = |rng: &mut StdRng| format!("v{}", rng.gen_range(0..4));
    for _ in 0..statements {
        match rng.gen_range(0..7) {
            0 => {
                let w = [1u64, 2, 4, 8][rng.gen_range(0..4)];
                lines.push(format!("p = add b {}", rng.gen_range(0..=16 - w)));
                lines.push(format!("{} = load{w} p", reg(rng)));
            }
            1 => {
                let op = ["add", "sub", "mul", "cmp_lt", "cmp_eq"][rng.gen_range(0..5)];
                let rhs = if rng.gen_bool(0.5) {
                    reg(rng)
                } else {
                    rng.gen_range(-4..300).to_string()
                };
                lines.push(format!("{} = {op} {} {rhs}", reg(rng), reg(rng)));
            }
            2 => {
                lines.push(format!("p = add s {}", rng.gen_range(0..32)));
                lines.push(format!("store1 p {}", reg(rng)));
            }
            3 => {
                lines.push(format!("p = add b {}", reg(rng)));
                lines.push(format!("store1 p {}", rng.gen_range(0..256)));
            }
            4 => {
                lines.push(format!("c = cmp_lt {} {}", reg(rng), rng.gen_range(0..256)));
                let here = lines.len();
                lines.push(format!("br c L{} L{}", here + 1, here + 3));
                lines.push(format!("p = add s {}", rng.gen_range(0..32)));
                lines.push(format!("store1 p {}", rng.gen_range(0..256)));
            }
            5 => {
                let w = [1u64, 2, 4, 8][rng.gen_range(0..4)];
                lines.push(format!("p = add b {}", rng.gen_range(0..=16 - w)));
                lines.push(format!("store{w} p {}", reg(rng)));
            }
            _ => lines.push(format!("print {}", reg(rng))),
        }
    }
    lines.push("halt".into());
    let body: String = lines
        .iter()
        .enumerate()
        .map(|(i, l)| format!("  L{i}: {l}\n"))
        .collect();
    format!("fn main {{\n{body}}}\n")
}

pub fn impact_random_no_false_negatives(programs: usize) -> Check {
    let mut rng = StdRng::seed_from_u64(0x1a9ac7);
    let db = TypeDb::default();
    let (mut total, mut effects, mut flagged) = (0, 0, 0);
    for trial in 0..programs {
        let text = random_impact_program(&mut rng, 12);
        let program =
            heapmend::parse_program(&text).map_err(|e| format!("trial {trial}: {e}\n{text}"))?;
        let heap = HeapConfig {
            landmarks: rng.gen_bool(0.5),
            ..HeapConfig::default()
        };
        for case in impact_cases_for("random", &program, &db, &[], heap)? {
            total += 1;
            flagged += usize::from(case.verdict.affects_sensitive);
            if case.observed_effect {
                effects += 1;
                ensure!(
                    case.verdict.affects_sensitive,
                    "trial {trial} at {}: perturbation reaches sensitive memory but verdict says no\n{text}",
                    case.label
                );
            }
        }
    }
    ensure!(
        effects > 0 && total > flagged,
        "generator too narrow ({effects} effects, {flagged}/{total} flagged)"
    );
    Ok(format!("{programs} programs, {total} faults, {effects} observable, {flagged} flagged, no false negatives"))
}

pub fn determinism() -> Check {
    for s in ALL {
        let (program, db) = s.load().map_err(|e| e.to_string())?;
        let run = || orchestrate(&program, &db, s.inputs.to_vec(), s.session_config());
        let (r1, e1) = run();
        let (r2, e2) = run();
        ensure!(e1 == e2, "{}: event streams differ", s.name);
        ensure!(
            transcript(&e1) == transcript(&e2),
            "{}: transcripts differ",
            s.name
        );
        match (r1, r2) {
            (Ok(a), Ok(b)) => ensure!(
                a.final_state == b.final_state && a.reports == b.reports,
                "{}: final states differ",
                s.name
            ),
            (Err(a), Err(b)) => ensure!(a == b, "{}: errors differ", s.name),
            _ => return Err(format!("{}: outcomes differ", s.name)),
        }
    }
    Ok(format!("{} scenarios", ALL.len()))
}
