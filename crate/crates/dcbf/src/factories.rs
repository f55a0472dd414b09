//! Bernoulli factory primitives: 2-coin, flipped 2-coin, coin merge, and the
//! recursive divide-and-conquer factory, each with optional Portkey escapes.
//!
//! The 2-coin algorithm turns a pair of weighted coins `(c1, p1)`, `(c2, p2)`
//! into a coin with success probability `c1 p1 / (c1 p1 + c2 p2)`: pick side
//! 1 with probability `c1 / (c1 + c2)`, flip that side's coin, return on
//! success, loop otherwise. The merge algorithm turns two coins with odds
//! `h1(b):h1(a)` and `h2(b):h2(a)` into one with odds of the products by
//! looping until both inputs agree. Applied recursively over a balanced
//! binary partition of the factors with 2-coin leaves, the merge produces a
//! Barker acceptance coin whose expected cost is polynomial in the factor
//! count instead of exponential.
//!
//! A Portkey continue-probability below 1 makes a node abort to `Escaped`
//! before doing work; the induced extra rejection mass is symmetric in the
//! two parameter roles, so reversibility of the embedding MCMC chain is
//! preserved.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::coin::{FlipOutcome, WeightedCoin};
use crate::error::{Error, Result};
use crate::ledger::{CostLedger, NodeId};
use crate::rng::RandomStream;

/// Two weighted coins carrying the odds of one factor: `numer` represents
/// the proposed-parameter weight and `denom` the current-parameter weight.
pub struct FactorPair {
    numer: WeightedCoin,
    denom: WeightedCoin,
}

impl FactorPair {
    /// Either side may carry weight zero, but not both: a 2-coin on an
    /// all-zero pair would loop forever.
    pub fn new(numer: WeightedCoin, denom: WeightedCoin) -> Result<Self> {
        if numer.scale() == 0.0 && denom.scale() == 0.0 {
            return Err(Error::DegenerateInput);
        }
        Ok(Self { numer, denom })
    }

    /// Pair of coins with known success probabilities.
    pub fn tractable(c_numer: f64, p_numer: f64, c_denom: f64, p_denom: f64) -> Result<Self> {
        Self::new(
            WeightedCoin::tractable(c_numer, p_numer)?,
            WeightedCoin::tractable(c_denom, p_denom)?,
        )
    }

    pub fn swapped(self) -> Self {
        Self {
            numer: self.denom,
            denom: self.numer,
        }
    }

    /// Batch pair: numerator weights and coins multiply across the parts,
    /// and likewise for the denominators.
    pub fn product(pairs: Vec<FactorPair>) -> Result<Self> {
        let mut numers = Vec::with_capacity(pairs.len());
        let mut denoms = Vec::with_capacity(pairs.len());
        for pair in pairs {
            numers.push(pair.numer);
            denoms.push(pair.denom);
        }
        Self::new(WeightedCoin::product(numers)?, WeightedCoin::product(denoms)?)
    }

    pub fn numer(&self) -> &WeightedCoin {
        &self.numer
    }

    pub fn denom(&self) -> &WeightedCoin {
        &self.denom
    }
}

impl std::fmt::Debug for FactorPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactorPair")
            .field("numer", &self.numer)
            .field("denom", &self.denom)
            .finish()
    }
}

/// Which 2-coin variant realizes a leaf's odds coin.
///
/// `Direct` leaves carry coins for the factor weights themselves; `Flipped`
/// leaves carry coins for the reciprocals (a lower-bound factorization), and
/// are run by exchanging the two roles inside the 2-coin loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoCoinForm {
    Direct,
    Flipped,
}

/// One leaf of the divide-and-conquer factory.
pub struct DcbfLeaf {
    pub pair: FactorPair,
    pub form: TwoCoinForm,
}

impl DcbfLeaf {
    pub fn direct(pair: FactorPair) -> Self {
        Self {
            pair,
            form: TwoCoinForm::Direct,
        }
    }

    pub fn flipped(pair: FactorPair) -> Self {
        Self {
            pair,
            form: TwoCoinForm::Flipped,
        }
    }
}

/// Per-node Portkey continue-probabilities. A value `varpi` in (0, 1] is the
/// probability of *continuing* at each visit; the node escapes with
/// probability `1 - varpi`. Defaults keep everything at 1 (no escapes);
/// setting only the leaf level is sufficient in practice because a slow node
/// near the root multiplies work at all of its descendants.
#[derive(Debug, Clone)]
pub struct PortkeyConfig {
    leaf: f64,
    nodes: BTreeMap<u32, f64>,
}

fn check_varpi(varpi: f64) -> Result<()> {
    if !(varpi > 0.0 && varpi <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "portkey continue-probability must lie in (0, 1], got {varpi}"
        )));
    }
    Ok(())
}

impl PortkeyConfig {
    /// No escapes anywhere.
    pub fn off() -> Self {
        Self {
            leaf: 1.0,
            nodes: BTreeMap::new(),
        }
    }

    /// Escapes only at the leaf level, with continue-probability `varpi`.
    pub fn with_leaf(varpi: f64) -> Result<Self> {
        check_varpi(varpi)?;
        Ok(Self {
            leaf: varpi,
            nodes: BTreeMap::new(),
        })
    }

    /// Sets the continue-probability for every merge node at `level`
    /// (root is level 0).
    pub fn with_node_level(mut self, level: u32, varpi: f64) -> Result<Self> {
        check_varpi(varpi)?;
        self.nodes.insert(level, varpi);
        Ok(self)
    }

    pub fn leaf_keep(&self) -> f64 {
        self.leaf
    }

    pub fn node_keep(&self, level: u32) -> f64 {
        self.nodes.get(&level).copied().unwrap_or(1.0)
    }
}

impl Default for PortkeyConfig {
    fn default() -> Self {
        Self::off()
    }
}

/// Factory execution options.
#[derive(Debug, Clone)]
pub struct FactoryOpts {
    /// Abort guard per root invocation, counting loop events plus elementary
    /// flips. The algorithms terminate almost surely on valid input, but
    /// degenerate inputs (for instance two children that disagree with
    /// certainty) would spin forever.
    pub work_cap: u64,
    /// Run the two child subtrees of each merge node as a fork-join pair,
    /// each on its own split stream. The output law is identical to the
    /// sequential mode; only the bit-level trace differs.
    pub parallel: bool,
}

impl Default for FactoryOpts {
    fn default() -> Self {
        Self {
            work_cap: 1_000_000_000,
            parallel: false,
        }
    }
}

struct WorkBudget {
    cap: u64,
    used: AtomicU64,
}

impl WorkBudget {
    fn new(cap: u64) -> Self {
        Self {
            cap,
            used: AtomicU64::new(0),
        }
    }

    #[inline]
    fn spend(&self, node: NodeId, amount: u64) -> Result<()> {
        let used = self.used.fetch_add(amount, Ordering::Relaxed) + amount;
        if used > self.cap {
            return Err(Error::LoopCapExceeded {
                cap: self.cap,
                node: node.0,
            });
        }
        Ok(())
    }
}

fn two_coin_core(
    node: NodeId,
    pair: &mut FactorPair,
    form: TwoCoinForm,
    keep: f64,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
    budget: &WorkBudget,
) -> Result<FlipOutcome> {
    let (first, second) = match form {
        TwoCoinForm::Direct => (&mut pair.numer, &mut pair.denom),
        TwoCoinForm::Flipped => (&mut pair.denom, &mut pair.numer),
    };
    let (c1, c2) = (first.scale(), second.scale());
    if c1 == 0.0 && c2 == 0.0 {
        return Err(Error::DegenerateInput);
    }
    let pick_first = c1 / (c1 + c2);
    let escape = 1.0 - keep;
    loop {
        ledger.record_leaf_loop(node);
        if escape > 0.0 && stream.coin(escape) {
            ledger.record_leaf_output(node);
            return Ok(FlipOutcome::Escaped);
        }
        let flips_before = ledger.elementary_flips();
        let outcome = if stream.coin(pick_first) {
            first.flip(stream, ledger)?.then_some(FlipOutcome::Heads)
        } else {
            second.flip(stream, ledger)?.then_some(FlipOutcome::Tails)
        };
        budget.spend(node, 1 + ledger.elementary_flips() - flips_before)?;
        if let Some(out) = outcome {
            ledger.record_leaf_output(node);
            return Ok(out);
        }
    }
}

/// One flip of the 2-coin algorithm on `pair` with Portkey
/// continue-probability `keep`.
///
/// With `keep = 1` the result is heads with probability
/// `c1 p1 / (c1 p1 + c2 p2)` and the loop count is geometric with mean
/// `(c1 + c2) / (c1 p1 + c2 p2)`. With `keep < 1` the three outcomes have
/// probabilities proportional to `(c1 p1, c2 p2, b)` for the symmetric slack
/// `b = (1/keep - 1)(c1 + c2)`.
pub fn flip_two_coin(
    pair: &mut FactorPair,
    keep: f64,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<FlipOutcome> {
    check_varpi(keep)?;
    let budget = WorkBudget::new(FactoryOpts::default().work_cap);
    let out = two_coin_core(
        NodeId::root(),
        pair,
        TwoCoinForm::Direct,
        keep,
        stream,
        ledger,
        &budget,
    )?;
    ledger.record_root_flip();
    Ok(out)
}

/// The flipped 2-coin: `pair` encodes a lower-bound factorization (its coins
/// represent reciprocals of the factor weights), realized by running the
/// 2-coin loop with the two roles exchanged.
pub fn flip_two_coin_flipped(
    pair: &mut FactorPair,
    keep: f64,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<FlipOutcome> {
    check_varpi(keep)?;
    let budget = WorkBudget::new(FactoryOpts::default().work_cap);
    let out = two_coin_core(
        NodeId::root(),
        pair,
        TwoCoinForm::Flipped,
        keep,
        stream,
        ledger,
        &budget,
    )?;
    ledger.record_root_flip();
    Ok(out)
}

fn merge_loop<L, R>(
    node: NodeId,
    keep: f64,
    mut left: L,
    mut right: R,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
    budget: &WorkBudget,
) -> Result<FlipOutcome>
where
    L: FnMut(u64, &mut RandomStream, &mut CostLedger) -> Result<FlipOutcome>,
    R: FnMut(u64, &mut RandomStream, &mut CostLedger) -> Result<FlipOutcome>,
{
    let escape = 1.0 - keep;
    let mut iter = 0u64;
    loop {
        ledger.record_merge_loop(node);
        budget.spend(node, 1)?;
        if escape > 0.0 && stream.coin(escape) {
            return Ok(FlipOutcome::Escaped);
        }
        let a = left(iter, stream, ledger)?;
        if a == FlipOutcome::Escaped {
            return Ok(FlipOutcome::Escaped);
        }
        let b = right(iter, stream, ledger)?;
        if b == FlipOutcome::Escaped {
            return Ok(FlipOutcome::Escaped);
        }
        if a == b {
            return Ok(a);
        }
        iter += 1;
    }
}

/// One flip of the coin-merge algorithm on two child flip procedures.
///
/// Without escapes the output is heads with probability
/// `r1 r2 / (r1 r2 + (1 - r1)(1 - r2))` — odds equal to the product of the
/// children's odds — and the expected number of loops is `r0 / (r1 r2)`.
/// Any child escape, or an own escape draw with probability `1 - keep`,
/// yields `Escaped`. Children that disagree with certainty would loop
/// forever; the default work cap turns that into a diagnosable error.
pub fn flip_merge<L, R>(
    left: L,
    right: R,
    keep: f64,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<FlipOutcome>
where
    L: FnMut(&mut RandomStream, &mut CostLedger) -> Result<FlipOutcome>,
    R: FnMut(&mut RandomStream, &mut CostLedger) -> Result<FlipOutcome>,
{
    check_varpi(keep)?;
    let budget = WorkBudget::new(FactoryOpts::default().work_cap);
    let mut left = left;
    let mut right = right;
    merge_loop(
        NodeId::root(),
        keep,
        |_, s, l| left(s, l),
        |_, s, l| right(s, l),
        stream,
        ledger,
        &budget,
    )
}

struct DcbfCtx<'a> {
    portkey: &'a PortkeyConfig,
    depth: u32,
    budget: &'a WorkBudget,
    parallel: bool,
}

fn flip_node(
    ctx: &DcbfCtx<'_>,
    node: NodeId,
    level: u32,
    leaves: &mut [DcbfLeaf],
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<FlipOutcome> {
    if level == ctx.depth {
        let leaf = &mut leaves[0];
        return two_coin_core(
            node,
            &mut leaf.pair,
            leaf.form,
            ctx.portkey.leaf_keep(),
            stream,
            ledger,
            ctx.budget,
        );
    }
    let keep = ctx.portkey.node_keep(level);
    let (left_half, right_half) = leaves.split_at_mut(leaves.len() / 2);
    if ctx.parallel {
        let escape = 1.0 - keep;
        loop {
            ledger.record_merge_loop(node);
            ctx.budget.spend(node, 1)?;
            if escape > 0.0 && stream.coin(escape) {
                return Ok(FlipOutcome::Escaped);
            }
            // Fresh child streams per loop iteration, keyed off the node
            // stream so repeated invocations stay independent.
            let key = stream.next_u64();
            let base = stream.split(key);
            let mut ls = base.split(0);
            let mut rs = base.split(1);
            let mut ll = CostLedger::new();
            let mut rl = CostLedger::new();
            let (ra, rb) = rayon::join(
                || flip_node(ctx, node.child(0), level + 1, left_half, &mut ls, &mut ll),
                || flip_node(ctx, node.child(1), level + 1, right_half, &mut rs, &mut rl),
            );
            ledger.absorb(&ll);
            ledger.absorb(&rl);
            let (a, b) = (ra?, rb?);
            if a == FlipOutcome::Escaped || b == FlipOutcome::Escaped {
                return Ok(FlipOutcome::Escaped);
            }
            if a == b {
                return Ok(a);
            }
        }
    } else {
        merge_loop(
            node,
            keep,
            |_, s, l| flip_node(ctx, node.child(0), level + 1, left_half, s, l),
            |_, s, l| flip_node(ctx, node.child(1), level + 1, right_half, s, l),
            stream,
            ledger,
            ctx.budget,
        )
    }
}

/// One flip of the divide-and-conquer Bernoulli factory over `leaves`
/// (length must be a power of two; a single leaf degenerates to one 2-coin
/// call).
///
/// Without escapes the output is heads with probability equal to the Barker
/// acceptance probability of the product odds,
/// `h0(b) / (h0(a) + h0(b))`. The ledger accumulates per-node loop counts
/// and leaf outputs from which [`merge_overhead`] computes the overhead
/// statistics.
pub fn flip_dcbf(
    leaves: &mut [DcbfLeaf],
    portkey: &PortkeyConfig,
    opts: &FactoryOpts,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<FlipOutcome> {
    if leaves.is_empty() || !leaves.len().is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "leaf count must be a nonzero power of two, got {}",
            leaves.len()
        )));
    }
    let depth = leaves.len().trailing_zeros();
    let budget = WorkBudget::new(opts.work_cap);
    let ctx = DcbfCtx {
        portkey,
        depth,
        budget: &budget,
        parallel: opts.parallel,
    };
    let out = flip_node(&ctx, NodeId::root(), 0, leaves, stream, ledger)?;
    ledger.record_root_flip();
    Ok(out)
}

/// Overhead estimates from accumulated ledger totals: the expected number of
/// leaf 2-coin outputs per root flip and the expected number of leaf 2-coin
/// loops per root flip. Ratios of totals are used rather than per-flip
/// averages so the estimators stay unbiased when counts accumulate over a
/// chain.
pub fn merge_overhead(ledger: &CostLedger) -> Result<(f64, f64)> {
    let flips = ledger.root_flips();
    if flips == 0 {
        return Err(Error::EmptyLedger);
    }
    let omega = ledger.leaf_output_total() as f64 / flips as f64;
    let phi = ledger.leaf_loop_total() as f64 / flips as f64;
    Ok((omega, phi))
}
