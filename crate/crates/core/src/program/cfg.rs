//! Control-flow graphs with post-dominators and static control dependence.

use std::collections::BTreeSet;

use super::{Function, Instruction, Op};

/// Successor lists over nodes `0..exit`, plus a virtual exit sink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    succs: Vec<Vec<usize>>,
    exit: usize,
}

impl Cfg {
    /// Builds a graph from explicit successor lists. The exit sink is the
    /// node numbered `succs.len()`; successors equal to it are allowed.
    pub fn new(mut succs: Vec<Vec<usize>>) -> Self {
        let exit = succs.len();
        for s in &mut succs {
            s.dedup();
            assert!(s.iter().all(|&n| n <= exit), "successor out of range");
        }
        succs.push(Vec::new());
        Self { succs, exit }
    }

    /// `ret` and `halt` go to the exit sink. Other non-branching
    /// instructions fall through.
    pub fn from_function(func: &Function) -> Self {
        Self::from_body(&func.body)
    }

    pub(crate) fn from_body(body: &[Instruction]) -> Self {
        let n = body.len();
        let succs = body
            .iter()
            .enumerate()
            .map(|(pc, instr)| match &instr.op {
                Op::Br {
                    then_pc, else_pc, ..
                } => {
                    if then_pc == else_pc {
                        vec![*then_pc]
                    } else {
                        vec![*then_pc, *else_pc]
                    }
                }
                Op::Jmp { target } => vec![*target],
                Op::Ret { .. } | Op::Halt => vec![n],
                _ => vec![pc + 1],
            })
            .collect();
        Self::new(succs)
    }

    /// Number of nodes including the exit sink.
    pub fn len(&self) -> usize {
        self.succs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exit == 0
    }

    pub fn exit(&self) -> usize {
        self.exit
    }

    pub fn succs(&self, node: usize) -> &[usize] {
        &self.succs[node]
    }

    pub fn preds(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.len()];
        for (n, ss) in self.succs.iter().enumerate() {
            for &s in ss {
                preds[s].push(n);
            }
        }
        preds
    }

    /// Nodes that have a path to the exit sink.
    pub fn reaches_exit(&self) -> Vec<bool> {
        let preds = self.preds();
        let mut seen = vec![false; self.len()];
        let mut stack = vec![self.exit];
        seen[self.exit] = true;
        while let Some(n) = stack.pop() {
            for &p in &preds[n] {
                if !seen[p] {
                    seen[p] = true;
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Nodes reachable from `from`, including `from` itself.
    pub fn reachable_from(&self, from: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(n) = stack.pop() {
            for &s in &self.succs[n] {
                if !seen[s] {
                    seen[s] = true;
                    stack.push(s);
                }
            }
        }
        seen
    }
}

/// Immediate post-dominator tree rooted at the exit sink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostDominators {
    ipdom: Vec<Option<usize>>,
}

impl PostDominators {
    /// `None` for the exit sink and for nodes that cannot reach it.
    pub fn ipdom(&self, node: usize) -> Option<usize> {
        self.ipdom[node]
    }

    /// Reflexive post-dominance.
    pub fn post_dominates(&self, by: usize, node: usize) -> bool {
        let mut cur = Some(node);
        while let Some(n) = cur {
            if n == by {
                return true;
            }
            cur = self.ipdom[n];
        }
        false
    }
}

/// Cooper-Harvey-Kennedy iteration on the reversed graph.
pub fn post_dominators(cfg: &Cfg) -> PostDominators {
    let n = cfg.len();
    let exit = cfg.exit();
    let preds = cfg.preds();

    // Postorder of the reverse graph, walked from the exit sink.
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut stack = vec![(exit, 0usize)];
    visited[exit] = true;
    while let Some((node, idx)) = stack.last_mut() {
        let node = *node;
        if let Some(&p) = preds[node].get(*idx) {
            *idx += 1;
            if !visited[p] {
                visited[p] = true;
                stack.push((p, 0));
            }
        } else {
            order.push(node);
            stack.pop();
        }
    }
    let mut po_num = vec![usize::MAX; n];
    for (i, &node) in order.iter().enumerate() {
        po_num[node] = i;
    }

    let mut ipdom: Vec<Option<usize>> = vec![None; n];
    ipdom[exit] = Some(exit);
    let mut changed = true;
    while changed {
        changed = false;
        for &node in order.iter().rev() {
            if node == exit {
                continue;
            }
            let mut new_idom: Option<usize> = None;
            for &s in cfg.succs(node) {
                if ipdom[s].is_none() {
                    continue;
                }
                new_idom = Some(match new_idom {
                    None => s,
                    Some(cur) => intersect(&ipdom, &po_num, s, cur),
                });
            }
            if new_idom.is_some() && ipdom[node] != new_idom {
                ipdom[node] = new_idom;
                changed = true;
            }
        }
    }
    ipdom[exit] = None;
    PostDominators { ipdom }
}

fn intersect(ipdom: &[Option<usize>], po_num: &[usize], mut a: usize, mut b: usize) -> usize {
    while a != b {
        while po_num[a] < po_num[b] {
            a = ipdom[a].expect("processed node");
        }
        while po_num[b] < po_num[a] {
            b = ipdom[b].expect("processed node");
        }
    }
    a
}

/// For every node, the branch nodes it is control dependent on.
pub fn control_dependence(cfg: &Cfg, pdoms: &PostDominators) -> Vec<BTreeSet<usize>> {
    let mut deps = vec![BTreeSet::new(); cfg.len()];
    for branch in 0..cfg.len() {
        let succs = cfg.succs(branch);
        if succs.len() < 2 {
            continue;
        }
        let stop = pdoms.ipdom(branch);
        for &s in succs {
            let mut runner = Some(s);
            while runner.is_some() && runner != stop {
                let r = runner.unwrap();
                deps[r].insert(branch);
                runner = pdoms.ipdom(r);
            }
        }
    }
    deps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line() {
        // a -> b -> c -> exit
        let cfg = Cfg::new(vec![vec![1], vec![2], vec![3]]);
        let pd = post_dominators(&cfg);
        assert_eq!(pd.ipdom(0), Some(1));
        assert_eq!(pd.ipdom(1), Some(2));
        assert_eq!(pd.ipdom(2), Some(3));
        assert_eq!(pd.ipdom(3), None);
        assert!(control_dependence(&cfg, &pd).iter().all(|s| s.is_empty()));
    }

    #[test]
    fn diamond() {
        // 0: br -> {1, 2}; 1 -> 3; 2 -> 3; 3 -> exit
        let cfg = Cfg::new(vec![vec![1, 2], vec![3], vec![3], vec![4]]);
        let pd = post_dominators(&cfg);
        assert_eq!(pd.ipdom(0), Some(3));
        let cd = control_dependence(&cfg, &pd);
        assert_eq!(cd[1], BTreeSet::from([0]));
        assert_eq!(cd[2], BTreeSet::from([0]));
        assert!(cd[3].is_empty());
    }

    #[test]
    fn loop_body_depends_on_loop_branch() {
        // 0: init; 1: br -> {2, 4}; 2: body; 3: jmp 1; 4: ret
        let cfg = Cfg::new(vec![vec![1], vec![2, 4], vec![3], vec![1], vec![5]]);
        let pd = post_dominators(&cfg);
        let cd = control_dependence(&cfg, &pd);
        assert_eq!(cd[2], BTreeSet::from([1]));
        assert_eq!(cd[3], BTreeSet::from([1]));
        assert_eq!(cd[1], BTreeSet::from([1]));
        assert!(cd[4].is_empty());
        assert!(cd[0].is_empty());
    }
}
