//! Dynamic dependence recording and backward slicing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{Program, Site};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SliceError {
    #[error("no recorded instance with seq {0}")]
    UnknownInstance(u64),
}

/// One executed instruction instance and the instances it depends on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepNode {
    pub seq: u64,
    pub site: Site,
    /// Reaching definitions of registers and heap bytes, plus the birth of
    /// any chunk addressed. Sorted, deduplicated.
    pub data: Vec<u64>,
    pub control: Option<u64>,
    /// Value read, for `input` instances.
    pub input: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependenceGraph {
    nodes: Vec<DepNode>,
}

impl DependenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node. Seqs must increase and every edge must point to a
    /// strictly earlier instance.
    pub fn push(&mut self, mut node: DepNode) {
        if let Some(last) = self.nodes.last() {
            assert!(node.seq > last.seq, "instances must arrive in seq order");
        }
        node.data.sort_unstable();
        node.data.dedup();
        assert!(
            node.data
                .iter()
                .chain(node.control.iter())
                .all(|&d| d < node.seq),
            "dependence edge must point backward in time"
        );
        self.nodes.push(node);
    }

    pub fn get(&self, seq: u64) -> Option<&DepNode> {
        self.nodes
            .binary_search_by_key(&seq, |n| n.seq)
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn nodes(&self) -> &[DepNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Online trace collector: the graph plus per-byte last writers and chunk
/// births. Lives inside the machine state so it rewinds with snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recorder {
    enabled: bool,
    graph: DependenceGraph,
    byte_writer: BTreeMap<u64, u64>,
    births: BTreeMap<u64, u64>,
}

impl Default for Recorder {
    fn default() -> Self {
        Self {
            enabled: true,
            graph: DependenceGraph::new(),
            byte_writer: BTreeMap::new(),
            births: BTreeMap::new(),
        }
    }
}

impl Recorder {
    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Disabling drops everything recorded so far.
    pub fn set_enabled(&mut self, enabled: bool) {
        if !enabled {
            *self = Self {
                enabled,
                ..Self::default()
            };
        }
        self.enabled = enabled;
    }

    pub fn graph(&self) -> &DependenceGraph {
        &self.graph
    }

    pub fn record(&mut self, node: DepNode) {
        if self.enabled {
            self.graph.push(node);
        }
    }

    /// Last writers of the bytes in `[addr, addr+len)`; bytes never written
    /// contribute nothing.
    pub fn writers(&self, addr: u64, len: u64) -> Vec<u64> {
        if !self.enabled || len == 0 {
            return Vec::new();
        }
        let end = addr.saturating_add(len);
        self.byte_writer.range(addr..end).map(|(_, &s)| s).collect()
    }

    pub fn set_writer(&mut self, addr: u64, len: u64, seq: u64) {
        if !self.enabled {
            return;
        }
        for a in addr..addr.saturating_add(len) {
            self.byte_writer.insert(a, seq);
        }
    }

    pub fn birth(&self, base: u64) -> Option<u64> {
        self.births.get(&base).copied()
    }

    pub fn set_birth(&mut self, base: u64, seq: u64) {
        if self.enabled {
            self.births.insert(base, seq);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub criterion: u64,
    pub members: BTreeSet<u64>,
}

/// Transitive closure over data and control edges from `criterion`.
pub fn backward_slice(graph: &DependenceGraph, criterion: u64) -> Result<Slice, SliceError> {
    graph
        .get(criterion)
        .ok_or(SliceError::UnknownInstance(criterion))?;
    let mut members = BTreeSet::from([criterion]);
    let mut work = vec![criterion];
    while let Some(seq) = work.pop() {
        let Some(node) = graph.get(seq) else { continue };
        for &dep in node.data.iter().chain(node.control.iter()) {
            if members.insert(dep) {
                work.push(dep);
            }
        }
    }
    Ok(Slice { criterion, members })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootInput {
    pub seq: u64,
    pub value: i64,
    pub site: Site,
}

/// The latest input instance in the slice.
pub fn find_root_input(slice: &Slice, graph: &DependenceGraph) -> Option<RootInput> {
    slice.members.iter().rev().find_map(|&seq| {
        let node = graph.get(seq)?;
        node.input.map(|value| RootInput {
            seq,
            value,
            site: node.site,
        })
    })
}

/// One line per member: `seq fn:label opcode`.
pub fn render_slice(slice: &Slice, graph: &DependenceGraph, program: &Program) -> String {
    let mut out = String::new();
    for &seq in &slice.members {
        if let Some(node) = graph.get(seq) {
            let op = program.instruction(node.site).op.mnemonic();
            let _ = writeln!(out, "{} {} {}", seq, program.site_label(node.site), op);
        }
    }
    out
}
