//! Cost accounting for factory invocations.
//!
//! Cost is counted in three units because merge loops, leaf 2-coin loops and
//! leaf elementary flips scale differently: the merge overhead divides leaf
//! *outputs* by root flips while the loop overhead divides leaf *loops* by
//! root flips. A single deterministic `work_units` accumulator additionally
//! sums every recorded event; experiment drivers use it as a reproducible
//! stand-in for wall time.

use std::time::Duration;

/// Tree-node label in heap encoding: root is 1, the children of `i` are
/// `2i` and `2i + 1`, so a label identifies both the level and the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub u64);

impl NodeId {
    pub fn root() -> Self {
        NodeId(1)
    }

    /// `which` is 0 for the first child, 1 for the second.
    pub fn child(self, which: u64) -> Self {
        NodeId(2 * self.0 + which)
    }

    /// Depth below the root; the root has level 0.
    pub fn level(self) -> u32 {
        63 - self.0.leading_zeros()
    }
}

#[derive(Debug, Default, Clone)]
pub struct CostLedger {
    merge_loops: Vec<u64>,
    leaf_loops: Vec<u64>,
    leaf_outputs: Vec<u64>,
    elementary_flips: u64,
    path_evals: u64,
    root_flips: u64,
    work_units: u64,
    pub elapsed: Duration,
}

fn bump(v: &mut Vec<u64>, idx: usize) {
    if v.len() <= idx {
        v.resize(idx + 1, 0);
    }
    v[idx] += 1;
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_merge_loop(&mut self, node: NodeId) {
        bump(&mut self.merge_loops, node.0 as usize);
        self.work_units += 1;
    }

    pub fn record_leaf_loop(&mut self, node: NodeId) {
        bump(&mut self.leaf_loops, node.0 as usize);
        self.work_units += 1;
    }

    pub fn record_leaf_output(&mut self, node: NodeId) {
        bump(&mut self.leaf_outputs, node.0 as usize);
    }

    pub fn record_elementary_flip(&mut self) {
        self.elementary_flips += 1;
        self.work_units += 1;
    }

    pub fn record_path_eval(&mut self) {
        self.path_evals += 1;
        self.work_units += 1;
    }

    pub fn record_root_flip(&mut self) {
        self.root_flips += 1;
    }

    /// Auxiliary deterministic work outside the factory (lattice site
    /// proposals, auxiliary-process points, oracle evaluations).
    pub fn record_aux_work(&mut self, units: u64) {
        self.work_units += units;
    }

    pub fn merge_loops_at(&self, node: NodeId) -> u64 {
        self.merge_loops.get(node.0 as usize).copied().unwrap_or(0)
    }

    pub fn leaf_loops_at(&self, node: NodeId) -> u64 {
        self.leaf_loops.get(node.0 as usize).copied().unwrap_or(0)
    }

    pub fn leaf_outputs_at(&self, node: NodeId) -> u64 {
        self.leaf_outputs.get(node.0 as usize).copied().unwrap_or(0)
    }

    pub fn merge_loop_total(&self) -> u64 {
        self.merge_loops.iter().sum()
    }

    pub fn leaf_loop_total(&self) -> u64 {
        self.leaf_loops.iter().sum()
    }

    pub fn leaf_output_total(&self) -> u64 {
        self.leaf_outputs.iter().sum()
    }

    pub fn elementary_flips(&self) -> u64 {
        self.elementary_flips
    }

    pub fn path_evals(&self) -> u64 {
        self.path_evals
    }

    pub fn root_flips(&self) -> u64 {
        self.root_flips
    }

    pub fn work_units(&self) -> u64 {
        self.work_units
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Folds counts from a child ledger in, used at fork-join boundaries.
    pub fn absorb(&mut self, other: &CostLedger) {
        if self.merge_loops.len() < other.merge_loops.len() {
            self.merge_loops.resize(other.merge_loops.len(), 0);
        }
        for (i, c) in other.merge_loops.iter().enumerate() {
            self.merge_loops[i] += c;
        }
        if self.leaf_loops.len() < other.leaf_loops.len() {
            self.leaf_loops.resize(other.leaf_loops.len(), 0);
        }
        for (i, c) in other.leaf_loops.iter().enumerate() {
            self.leaf_loops[i] += c;
        }
        if self.leaf_outputs.len() < other.leaf_outputs.len() {
            self.leaf_outputs.resize(other.leaf_outputs.len(), 0);
        }
        for (i, c) in other.leaf_outputs.iter().enumerate() {
            self.leaf_outputs[i] += c;
        }
        self.elementary_flips += other.elementary_flips;
        self.path_evals += other.path_evals;
        self.root_flips += other.root_flips;
        self.work_units += other.work_units;
        self.elapsed += other.elapsed;
    }
}
