use crate::interp::MachineState;
use crate::program::{Op, Program};

/// For each program point, whether a heap access can still execute from it.
/// A call counts when its callee can reach one.
#[derive(Debug, Clone)]
pub struct Clearance {
    risky_from: Vec<Vec<bool>>,
}

fn accesses_heap(op: &Op) -> bool {
    matches!(
        op,
        Op::Store { .. } | Op::StoreBytes { .. } | Op::Load { .. }
    )
}

impl Clearance {
    pub fn new(program: &Program) -> Self {
        let funcs = program.functions();
        let mut risky_fn = vec![false; funcs.len()];
        let mut risky_from: Vec<Vec<bool>> =
            funcs.iter().map(|f| vec![false; f.body.len()]).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for (fi, func) in funcs.iter().enumerate() {
                let cfg = func.cfg();
                for pc in (0..func.body.len()).rev() {
                    if risky_from[fi][pc] {
                        continue;
                    }
                    let here = match &func.body[pc].op {
                        Op::Call { callee, .. } => risky_fn[callee.0 as usize],
                        op => accesses_heap(op),
                    };
                    let later = cfg
                        .succs(pc)
                        .iter()
                        .any(|&s| s < func.body.len() && risky_from[fi][s]);
                    if here || later {
                        risky_from[fi][pc] = true;
                        changed = true;
                    }
                }
                let any = risky_from[fi].first().copied().unwrap_or(false);
                if any && !risky_fn[fi] {
                    risky_fn[fi] = true;
                    changed = true;
                }
            }
        }
        Self { risky_from }
    }

    /// No frame on the stack can reach another heap access.
    pub fn is_clear(&self, state: &MachineState) -> bool {
        state.is_halted()
            || state.frames().iter().all(|f| {
                !self.risky_from[f.func.0 as usize]
                    .get(f.pc)
                    .copied()
                    .unwrap_or(false)
            })
    }
}
