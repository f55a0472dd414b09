//! Balanced binary partition trees over factor indices, per-iteration random
//! reshuffling, and closed-form merge-overhead predictions.

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Assignment of `n` factors to the `2^depth` leaves of a balanced binary
/// tree. Leaf labels are bit paths: bit `k` of a leaf index (from the top)
/// records the branch taken at level `k`, so truncating the index gives the
/// node labels of every ancestor and prefix consistency holds by
/// construction.
#[derive(Debug, Clone)]
pub struct PartitionTree {
    n: usize,
    depth: u32,
    assignment: Vec<u32>,
}

impl PartitionTree {
    /// Deterministic contiguous-block assignment with equal splits at every
    /// node: at each internal node the left child receives `ceil(m / 2)` of
    /// the node's `m` factors, so sibling batch sizes differ by at most one
    /// on every level.
    pub fn build(n: usize, depth: u32) -> Result<Self> {
        if depth >= usize::BITS || (1usize << depth) > n {
            return Err(Error::InvalidInput(format!(
                "partition needs 2^depth <= n, got depth {depth} for n {n}"
            )));
        }
        let mut assignment = vec![0u32; n];
        fn fill(assignment: &mut [u32], leaf_base: u32, levels_left: u32) {
            if levels_left == 0 {
                for slot in assignment.iter_mut() {
                    *slot = leaf_base;
                }
                return;
            }
            let mid = assignment.len().div_ceil(2);
            let (left, right) = assignment.split_at_mut(mid);
            fill(left, leaf_base << 1, levels_left - 1);
            fill(right, (leaf_base << 1) | 1, levels_left - 1);
        }
        fill(&mut assignment, 0, depth);
        Ok(Self {
            n,
            depth,
            assignment,
        })
    }

    /// Tree depth `floor(log4 n)`, the default for the experiment drivers.
    pub fn default_depth(n: usize) -> u32 {
        let mut depth = 0u32;
        while 4usize.pow(depth + 1) <= n {
            depth += 1;
        }
        depth
    }

    /// Uniformly random permutation of the factor-to-slot mapping; batch
    /// sizes are unchanged.
    pub fn shuffled(&self, stream: &mut RandomStream) -> PartitionTree {
        let mut perm: Vec<usize> = (0..self.n).collect();
        stream.shuffle(&mut perm);
        let assignment = perm.iter().map(|&slot| self.assignment[slot]).collect();
        PartitionTree {
            n: self.n,
            depth: self.depth,
            assignment,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    /// Leaf index of a factor.
    pub fn leaf_of(&self, factor: usize) -> u32 {
        self.assignment[factor]
    }

    /// Node label of the factor's ancestor at `level` (the first `level`
    /// branch bits of its leaf label).
    pub fn label_at_level(&self, factor: usize, level: u32) -> u32 {
        self.assignment[factor] >> (self.depth - level)
    }

    /// Factor indices per leaf, in leaf order.
    pub fn batches(&self) -> Vec<Vec<usize>> {
        let mut batches = vec![Vec::new(); self.leaf_count()];
        for (factor, &leaf) in self.assignment.iter().enumerate() {
            batches[leaf as usize].push(factor);
        }
        batches
    }

    pub fn leaf_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.leaf_count()];
        for &leaf in &self.assignment {
            sizes[leaf as usize] += 1;
        }
        sizes
    }
}

/// Merge overhead of the balanced tree with identical batch odds: `4^depth`.
pub fn predicted_overhead_balanced(depth: u32) -> f64 {
    4f64.powi(depth as i32)
}

fn check_factors(f_cur: &[f64], f_prop: &[f64], depth: u32) -> Result<()> {
    if f_cur.len() != f_prop.len() || f_cur.is_empty() {
        return Err(Error::InvalidInput(
            "factor value slices must be nonempty and of equal length".into(),
        ));
    }
    if f_cur
        .iter()
        .chain(f_prop.iter())
        .any(|&v| !(v.is_finite() && v > 0.0))
    {
        return Err(Error::InvalidInput(
            "factor values must be finite and positive".into(),
        ));
    }
    let n = f_cur.len();
    if depth >= usize::BITS || n % (1usize << depth) != 0 {
        return Err(Error::InvalidInput(format!(
            "overhead formula requires n divisible by 2^depth, got n {n}, depth {depth}"
        )));
    }
    Ok(())
}

/// The randomized-assignment overhead expression
/// `2^depth * (1 + 2 r0 * sum_j E[prod of the first n*j/2^depth shuffled
/// factor ratios])` where `r0` is the reverse-direction root coin
/// probability. The subset expectations are evaluated exactly through
/// elementary symmetric polynomials, which equals the average over all `n!`
/// permutations.
pub fn predicted_overhead_randomized_exact(
    f_cur: &[f64],
    f_prop: &[f64],
    depth: u32,
) -> Result<f64> {
    check_factors(f_cur, f_prop, depth)?;
    let n = f_cur.len();
    let ratios: Vec<f64> = f_prop.iter().zip(f_cur).map(|(p, c)| p / c).collect();
    // elem[m] = e_m(ratios) after processing all ratios.
    let mut elem = vec![0.0f64; n + 1];
    elem[0] = 1.0;
    for (count, &r) in ratios.iter().enumerate() {
        for m in (1..=count + 1).rev() {
            elem[m] += r * elem[m - 1];
        }
    }
    let mut binom = vec![0.0f64; n + 1];
    binom[0] = 1.0;
    for m in 1..=n {
        binom[m] = binom[m - 1] * (n - m + 1) as f64 / m as f64;
    }
    let h_cur: f64 = f_cur.iter().product();
    let h_prop: f64 = f_prop.iter().product();
    let r0_rev = h_cur / (h_cur + h_prop);
    let leaves = 1usize << depth;
    let batch = n / leaves;
    let sum: f64 = (1..leaves).map(|j| elem[j * batch] / binom[j * batch]).sum();
    Ok(leaves as f64 * (1.0 + 2.0 * r0_rev * sum))
}

/// Monte Carlo version of [`predicted_overhead_randomized_exact`], averaging
/// the expression over `permutations` uniformly random shuffles.
pub fn predicted_overhead_randomized(
    f_cur: &[f64],
    f_prop: &[f64],
    depth: u32,
    permutations: u32,
    stream: &mut RandomStream,
) -> Result<f64> {
    check_factors(f_cur, f_prop, depth)?;
    if permutations == 0 {
        return Err(Error::InvalidInput("need at least one permutation".into()));
    }
    let n = f_cur.len();
    let mut ratios: Vec<f64> = f_prop.iter().zip(f_cur).map(|(p, c)| p / c).collect();
    let h_cur: f64 = f_cur.iter().product();
    let h_prop: f64 = f_prop.iter().product();
    let r0_rev = h_cur / (h_cur + h_prop);
    let leaves = 1usize << depth;
    let batch = n / leaves;
    let mut total = 0.0;
    for _ in 0..permutations {
        stream.shuffle(&mut ratios);
        let mut prefix = 1.0;
        let mut sum = 0.0;
        for j in 1..leaves {
            for &r in &ratios[(j - 1) * batch..j * batch] {
                prefix *= r;
            }
            sum += prefix;
        }
        total += leaves as f64 * (1.0 + 2.0 * r0_rev * sum);
    }
    Ok(total / permutations as f64)
}
