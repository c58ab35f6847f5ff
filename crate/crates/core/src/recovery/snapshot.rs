use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::interp::MachineState;
use crate::program::Program;

pub const DEFAULT_SNAPSHOT_CAP: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: u64,
    /// Seq of the first instance not covered by the snapshot.
    pub taken_at_seq: u64,
    pub function: String,
    /// `main>f>g`
    pub call_path: String,
    pub state: MachineState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetentionPolicy {
    /// Cap on non-main snapshots.
    pub cap: usize,
    /// Functions whose entries are captured; `None` captures all.
    pub functions: Option<BTreeSet<String>>,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            cap: DEFAULT_SNAPSHOT_CAP,
            functions: None,
        }
    }
}

/// One snapshot per call path, least recently refreshed evicted first. The
/// main-entry snapshot is pinned and does not count against the cap.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    policy: RetentionPolicy,
    main: Option<Snapshot>,
    by_path: BTreeMap<String, Snapshot>,
    next_id: u64,
}

impl SnapshotStore {
    pub fn new(policy: RetentionPolicy) -> Self {
        Self {
            policy,
            main: None,
            by_path: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn policy(&self) -> &RetentionPolicy {
        &self.policy
    }

    /// Captures `state` at the entry of its current frame. Returns `None`
    /// when the policy skips this function.
    pub fn take(&mut self, state: &MachineState, program: &Program) -> Option<&Snapshot> {
        let function = program.function(state.current_frame().func).name.clone();
        let is_main = state.frames().len() == 1;
        if !is_main
            && self
                .policy
                .functions
                .as_ref()
                .is_some_and(|allowed| !allowed.contains(&function))
        {
            return None;
        }
        let snapshot = Snapshot {
            id: self.next_id,
            taken_at_seq: state.seq(),
            call_path: state.call_path(program),
            function,
            state: state.clone(),
        };
        self.next_id += 1;
        if is_main {
            return Some(self.main.insert(snapshot));
        }
        let path = snapshot.call_path.clone();
        self.by_path.insert(path.clone(), snapshot);
        while self.by_path.len() > self.policy.cap {
            let oldest = self
                .by_path
                .values()
                .min_by_key(|s| s.taken_at_seq)
                .map(|s| s.call_path.clone())
                .expect("non-empty");
            log::debug!("evicting snapshot for {oldest}");
            self.by_path.remove(&oldest);
        }
        self.by_path.get(&path)
    }

    pub fn main(&self) -> Option<&Snapshot> {
        self.main.as_ref()
    }

    pub fn len(&self) -> usize {
        self.by_path.len() + usize::from(self.main.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Snapshot> {
        self.main.iter().chain(self.by_path.values())
    }

    pub fn get(&self, call_path: &str) -> Option<&Snapshot> {
        if call_path == "main" {
            self.main.as_ref()
        } else {
            self.by_path.get(call_path)
        }
    }

    /// The latest snapshot captured before instance `root_seq` ran, or the
    /// main-entry snapshot.
    pub fn select(&self, root_seq: Option<u64>) -> Option<&Snapshot> {
        let Some(root) = root_seq else {
            return self.main.as_ref();
        };
        self.iter()
            .filter(|s| s.taken_at_seq <= root)
            .max_by_key(|s| (s.taken_at_seq, s.id))
            .or(self.main.as_ref())
    }

    /// Forgets snapshots taken after `seq`; their futures were abandoned.
    pub fn drop_newer(&mut self, seq: u64) {
        self.by_path.retain(|_, s| s.taken_at_seq <= seq);
    }
}

/// A fresh copy of the captured state.
pub fn restore(snapshot: &Snapshot) -> MachineState {
    snapshot.state.clone()
}
