//! Exact Bayesian inference for the unit-volatility tanh-drift diffusion
//! `dX_t = tanh(theta - X_t) dt + dW_t` observed at discrete times.
//!
//! The complete-data likelihood of one observation segment relative to
//! Wiener measure is `exp{B_theta(x1) - B_theta(x0) - ∫ phi_theta(x_s) ds}`
//! with `B_theta(x) = -log cosh(theta - x)` and
//! `phi_theta(a) = (tanh^2(theta - a) - sech^2(theta - a)) / 2`, so each
//! segment contributes one factor to the posterior odds. The intractable
//! integral terms become Poisson coins over lazily revealed bridge paths,
//! which is exactly the input format the divide-and-conquer factory needs.

use std::sync::{Arc, Mutex};

use rand_distr::Distribution;
use rayon::prelude::*;

use crate::coin::{CoinSource, FlipOutcome, WeightedCoin};
use crate::error::{Error, Result};
use crate::factories::{DcbfLeaf, FactorPair, FactoryOpts, PortkeyConfig};
use crate::ledger::CostLedger;
use crate::mcmc::{barker_step, ChainConfig, ChainTrace, TraceRow};
use crate::partition::PartitionTree;
use crate::poisson::{batch_first_success, flip_poisson_coin, BatchOutcome, BoundedPath};
use crate::rng::RandomStream;

/// Global bounds of `phi_theta`: `tanh^2 - 1/2` lies in [-1/2, 1/2).
pub const PHI_MIN: f64 = -0.5;
pub const PHI_MAX: f64 = 0.5;

/// `sup |d phi_theta(a) / d theta| = 4 / (3 sqrt 3)`.
pub fn dphi_bound() -> f64 {
    4.0 / (3.0 * 3f64.sqrt())
}

pub fn drift(theta: f64, x: f64) -> f64 {
    (theta - x).tanh()
}

/// Stable `log cosh`.
fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Drift potential `B_theta(x) = -log cosh(theta - x)`; always <= 0 with
/// maximum 0 at `x = theta`.
pub fn potential(theta: f64, x: f64) -> f64 {
    -ln_cosh(theta - x)
}

/// Girsanov integrand `(beta^2 + beta') / 2 = tanh^2(theta - a) - 1/2`.
pub fn phi(theta: f64, a: f64) -> f64 {
    let t = (theta - a).tanh();
    t * t - 0.5
}

/// `d phi_theta(a) / d theta = 2 tanh(theta - a) sech^2(theta - a)`.
pub fn phi_theta_grad(theta: f64, a: f64) -> f64 {
    let t = (theta - a).tanh();
    2.0 * t * (1.0 - t * t)
}

fn standard_normal(stream: &mut RandomStream) -> f64 {
    rand_distr::StandardNormal.sample(stream)
}

/// One observation segment of the latent path: fixed endpoints plus the
/// interior points revealed so far. Conditional on the revealed skeleton the
/// unrevealed remainder follows Brownian bridge interpolation, so evaluation
/// at a new time draws from that conditional and records the reveal.
#[derive(Debug, Clone)]
pub struct Segment {
    pub t0: f64,
    pub x0: f64,
    pub t1: f64,
    pub x1: f64,
    interior: Vec<(f64, f64)>,
}

impl Segment {
    pub fn new(t0: f64, x0: f64, t1: f64, x1: f64) -> Self {
        Self {
            t0,
            x0,
            t1,
            x1,
            interior: Vec::new(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn interior(&self) -> &[(f64, f64)] {
        &self.interior
    }

    /// Path value at absolute time `t`, revealing a new point by Brownian
    /// bridge interpolation between the nearest revealed neighbours if
    /// needed.
    pub fn eval(&mut self, t: f64, stream: &mut RandomStream) -> f64 {
        if t <= self.t0 {
            return self.x0;
        }
        if t >= self.t1 {
            return self.x1;
        }
        let idx = self.interior.partition_point(|&(s, _)| s < t);
        if idx < self.interior.len() && self.interior[idx].0 == t {
            return self.interior[idx].1;
        }
        let (s, xs) = if idx == 0 {
            (self.t0, self.x0)
        } else {
            self.interior[idx - 1]
        };
        let (u, xu) = if idx == self.interior.len() {
            (self.t1, self.x1)
        } else {
            self.interior[idx]
        };
        let frac = (t - s) / (u - s);
        let mean = xs + frac * (xu - xs);
        let var = (t - s) * (u - t) / (u - s);
        let x = mean + var.sqrt() * standard_normal(stream);
        self.interior.insert(idx, (t, x));
        x
    }
}

/// Shared handle used when the two coins of a factor pair must reveal the
/// same underlying path.
pub type SharedSegment = Arc<Mutex<Segment>>;

/// Discrete observations of the diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDataset {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl DiffusionDataset {
    pub fn segment_count(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "t,x")?;
        for (t, x) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t},{x}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(h)) if h == "t,x" => {}
            other => {
                return Err(Error::Parse {
                    what: "diffusion dataset",
                    detail: format!("expected header t,x, got {other:?}"),
                })
            }
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (t, x) = line.split_once(',').ok_or(Error::Parse {
                what: "diffusion dataset",
                detail: line.clone(),
            })?;
            let bad = |e: std::num::ParseFloatError| Error::Parse {
                what: "diffusion dataset",
                detail: e.to_string(),
            };
            times.push(t.parse().map_err(bad)?);
            values.push(x.parse().map_err(bad)?);
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parse {
                what: "diffusion dataset",
                detail: "times must be strictly increasing".into(),
            });
        }
        Ok(Self { times, values })
    }
}

/// Observation grid `0, dt, 2dt, ..., n*dt`.
pub fn regular_grid(n: usize, dt: f64) -> Vec<f64> {
    (0..=n).map(|i| i as f64 * dt).collect()
}

struct PhiBridgeView<'a> {
    seg: &'a mut Segment,
    theta: f64,
}

impl BoundedPath for PhiBridgeView<'_> {
    fn horizon(&self) -> f64 {
        self.seg.horizon()
    }
    fn lower(&self) -> f64 {
        0.0
    }
    fn upper(&self) -> f64 {
        1.0
    }
    fn eval(&mut self, t: f64, stream: &mut RandomStream) -> Result<f64> {
        let x = self.seg.eval(self.seg.t0 + t, stream);
        Ok(phi(self.theta, x) - PHI_MIN)
    }
}

const REJECTION_CAP: u64 = 1_000_000;

/// Exact draw from the diffusion bridge between fixed endpoints under
/// `theta`: Brownian bridge proposals accepted by a Poisson coin on
/// `phi_theta - phi_min`. Returns the accepted skeleton together with the
/// number of proposals used.
pub fn sample_bridge_counted(
    t0: f64,
    x0: f64,
    t1: f64,
    x1: f64,
    theta: f64,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<(Segment, u64)> {
    for attempt in 1..=REJECTION_CAP {
        let mut seg = Segment::new(t0, x0, t1, x1);
        let mut view = PhiBridgeView {
            seg: &mut seg,
            theta,
        };
        if flip_poisson_coin(&mut view, stream, ledger)? {
            return Ok((seg, attempt));
        }
    }
    Err(Error::RejectionCapExceeded {
        cap: REJECTION_CAP,
        context: "diffusion bridge sampling",
    })
}

pub fn sample_bridge(
    t0: f64,
    x0: f64,
    t1: f64,
    x1: f64,
    theta: f64,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<Segment> {
    sample_bridge_counted(t0, x0, t1, x1, theta, stream, ledger).map(|(seg, _)| seg)
}

/// Exact draws from the tanh diffusion at the given times, starting at
/// `x_0 = 0`: per segment, propose a Brownian increment, accept with the
/// tractable endpoint weight `exp(B_theta(y))` times a Poisson coin on
/// `phi_theta - phi_min` along a proposal bridge.
pub fn simulate_tanh_path(
    theta: f64,
    times: &[f64],
    stream: &mut RandomStream,
) -> Result<DiffusionDataset> {
    if times.is_empty() {
        return Err(Error::InvalidInput("need at least one time point".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "times must be strictly increasing".into(),
        ));
    }
    let mut ledger = CostLedger::new();
    let mut values = vec![0.0f64];
    for i in 1..times.len() {
        let (t_prev, t_next) = (times[i - 1], times[i]);
        let x = values[i - 1];
        let dt = t_next - t_prev;
        let mut accepted = None;
        for _ in 0..REJECTION_CAP {
            let y = x + dt.sqrt() * standard_normal(stream);
            if !stream.coin(potential(theta, y).exp()) {
                continue;
            }
            let mut seg = Segment::new(t_prev, x, t_next, y);
            let mut view = PhiBridgeView {
                seg: &mut seg,
                theta,
            };
            if flip_poisson_coin(&mut view, stream, &mut ledger)? {
                accepted = Some(y);
                break;
            }
        }
        match accepted {
            Some(y) => values.push(y),
            None => {
                return Err(Error::RejectionCapExceeded {
                    cap: REJECTION_CAP,
                    context: "tanh path simulation",
                })
            }
        }
    }
    Ok(DiffusionDataset {
        times: times.to_vec(),
        values,
    })
}

struct QPathView<'a> {
    seg: &'a mut Segment,
    from: f64,
    to: f64,
    cap: f64,
}

impl BoundedPath for QPathView<'_> {
    fn horizon(&self) -> f64 {
        self.seg.horizon()
    }
    fn lower(&self) -> f64 {
        0.0
    }
    fn upper(&self) -> f64 {
        self.cap
    }
    fn eval(&mut self, t: f64, stream: &mut RandomStream) -> Result<f64> {
        let x = self.seg.eval(self.seg.t0 + t, stream);
        Ok((phi(self.to, x) - phi(self.from, x)).max(0.0))
    }
}

/// Poisson coin for `q(from, to) = exp{-∫ 0 ∨ (phi_to - phi_from)(x_s) ds}`
/// on a shared segment. With batching enabled, runs of all-heads flips are
/// drawn in one shot from the geometric law of the first nonempty point
/// process; the flip stream's law is unchanged.
struct QCoinSource {
    seg: SharedSegment,
    from: f64,
    to: f64,
    cap: f64,
    batched: bool,
    pending_heads: u64,
    pending_outcome: Option<bool>,
}

impl QCoinSource {
    fn new(seg: SharedSegment, from: f64, to: f64, batched: bool) -> Self {
        let cap = (to - from).abs() * dphi_bound();
        Self {
            seg,
            from,
            to,
            cap,
            batched,
            pending_heads: 0,
            pending_outcome: None,
        }
    }
}

impl CoinSource for QCoinSource {
    fn flip(&mut self, stream: &mut RandomStream, ledger: &mut CostLedger) -> Result<bool> {
        ledger.record_elementary_flip();
        if self.pending_heads > 0 {
            self.pending_heads -= 1;
            return Ok(true);
        }
        if let Some(out) = self.pending_outcome.take() {
            return Ok(out);
        }
        let mut seg = self.seg.lock().expect("segment lock");
        let mut view = QPathView {
            seg: &mut seg,
            from: self.from,
            to: self.to,
            cap: self.cap,
        };
        if !self.batched {
            return flip_poisson_coin(&mut view, stream, ledger);
        }
        match batch_first_success(&mut view, stream, ledger)? {
            BatchOutcome::AllHeads => Ok(true),
            BatchOutcome::At { index, outcome } => {
                if index == 1 {
                    Ok(outcome)
                } else {
                    self.pending_heads = index - 2;
                    self.pending_outcome = Some(outcome);
                    Ok(true)
                }
            }
        }
    }
}

/// Factor pair for one observation segment: the numerator carries
/// `d_i(theta, vartheta) = exp{B_vartheta(x1) - B_vartheta(x0)}` times the
/// prior share `pi(vartheta)^{prior_exponent}` with a `q_i(theta, vartheta)`
/// Poisson coin, and the denominator is the same with the roles swapped.
/// The pair's odds equal the segment likelihood ratio times the prior-share
/// ratio.
pub fn girsanov_leaf_pair(
    seg: &SharedSegment,
    theta: f64,
    vartheta: f64,
    prior_exponent: f64,
    batched: bool,
) -> Result<FactorPair> {
    let (x0, x1) = {
        let guard = seg.lock().expect("segment lock");
        (guard.x0, guard.x1)
    };
    let weight = |at: f64| {
        (potential(at, x1) - potential(at, x0)).exp() * (-at * at / 2.0 * prior_exponent).exp()
    };
    let numer = WeightedCoin::new(
        weight(vartheta),
        Box::new(QCoinSource::new(Arc::clone(seg), theta, vartheta, batched)),
    )?;
    let denom = WeightedCoin::new(
        weight(theta),
        Box::new(QCoinSource::new(Arc::clone(seg), vartheta, theta, batched)),
    )?;
    FactorPair::new(numer, denom)
}

/// Sampler configuration; defaults follow the experiment protocol
/// (`delta = 8`, depth `floor(log4 n)`, leaf escape probability `1/n`).
#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub delta: f64,
    pub depth: u32,
    pub portkey: PortkeyConfig,
    pub opts: FactoryOpts,
    /// Batch the per-segment coin-toss streams (geometric first-success
    /// draws). Off by default; the plain per-flip mode is the representative
    /// cost measurement.
    pub batch_coin_optimization: bool,
}

impl DiffusionConfig {
    pub fn for_data_size(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        // Escape probability 1/n, kept below 1 so tiny datasets stay valid.
        let escape = (1.0 / n as f64).min(0.5);
        Ok(Self {
            delta: 8.0,
            depth: PartitionTree::default_depth(n),
            portkey: PortkeyConfig::with_leaf(1.0 - escape)?,
            opts: FactoryOpts::default(),
            batch_coin_optimization: false,
        })
    }
}

/// Latent state: the scalar parameter and one shared segment per
/// observation interval.
pub struct DiffusionState {
    pub theta: f64,
    pub segments: Vec<SharedSegment>,
}

impl DiffusionState {
    pub fn init(dataset: &DiffusionDataset, theta: f64) -> Result<Self> {
        if dataset.segment_count() == 0 {
            return Err(Error::InvalidInput("dataset has no segments".into()));
        }
        let segments = (1..dataset.times.len())
            .map(|i| {
                Arc::new(Mutex::new(Segment::new(
                    dataset.times[i - 1],
                    dataset.values[i - 1],
                    dataset.times[i],
                    dataset.values[i],
                )))
            })
            .collect();
        Ok(Self { theta, segments })
    }
}

/// Barker-within-Gibbs sampler: bridge refresh block plus one DCBF
/// parameter update per sweep, with the factor-to-leaf assignment
/// reshuffled every iteration from a stream separate from the flip stream.
pub struct DiffusionSampler {
    pub state: DiffusionState,
    cfg: DiffusionConfig,
    base_tree: PartitionTree,
    flip_stream: RandomStream,
    shuffle_stream: RandomStream,
    bridge_stream: RandomStream,
    pub ledger: CostLedger,
}

impl DiffusionSampler {
    pub fn new(dataset: &DiffusionDataset, cfg: DiffusionConfig, seed: u64) -> Result<Self> {
        let n = dataset.segment_count();
        let root = RandomStream::new(seed, 0);
        let base_tree = PartitionTree::build(n, cfg.depth)?;
        Ok(Self {
            state: DiffusionState::init(dataset, 0.0)?,
            cfg,
            base_tree,
            flip_stream: root.split(1),
            shuffle_stream: root.split(2),
            bridge_stream: root.split(3),
            ledger: CostLedger::new(),
        })
    }

    pub fn theta(&self) -> f64 {
        self.state.theta
    }

    fn refresh_bridges(&mut self) -> Result<()> {
        let theta = self.state.theta;
        if self.cfg.opts.parallel {
            let key = self.bridge_stream.next_u64();
            let base = self.bridge_stream.split(key);
            let results: Vec<Result<CostLedger>> = self
                .state
                .segments
                .par_iter()
                .enumerate()
                .map(|(i, seg)| {
                    let mut stream = base.split(i as u64);
                    let mut ledger = CostLedger::new();
                    let (t0, x0, t1, x1) = {
                        let guard = seg.lock().expect("segment lock");
                        (guard.t0, guard.x0, guard.t1, guard.x1)
                    };
                    let fresh = sample_bridge(t0, x0, t1, x1, theta, &mut stream, &mut ledger)?;
                    *seg.lock().expect("segment lock") = fresh;
                    Ok(ledger)
                })
                .collect();
            for r in results {
                self.ledger.absorb(&r?);
            }
        } else {
            for seg in &self.state.segments {
                let (t0, x0, t1, x1) = {
                    let guard = seg.lock().expect("segment lock");
                    (guard.t0, guard.x0, guard.t1, guard.x1)
                };
                let fresh = sample_bridge(
                    t0,
                    x0,
                    t1,
                    x1,
                    theta,
                    &mut self.bridge_stream,
                    &mut self.ledger,
                )?;
                *seg.lock().expect("segment lock") = fresh;
            }
        }
        Ok(())
    }

    /// One full sweep; returns the parameter update's flip outcome.
    pub fn sweep(&mut self) -> Result<FlipOutcome> {
        self.refresh_bridges()?;
        let n = self.state.segments.len();
        let tree = self.base_tree.shuffled(&mut self.shuffle_stream);
        let halfwidth = self.cfg.delta / (n as f64).sqrt();
        let prior_exponent = 1.0 / n as f64;
        let segments = &self.state.segments;
        let batched = self.cfg.batch_coin_optimization;
        let step = barker_step(
            self.state.theta,
            |t, stream| t + stream.uniform_in(-halfwidth, halfwidth),
            |theta, vartheta| {
                let leaves = tree
                    .batches()
                    .into_iter()
                    .map(|batch| {
                        let pairs = batch
                            .into_iter()
                            .map(|i| {
                                girsanov_leaf_pair(
                                    &segments[i],
                                    theta,
                                    vartheta,
                                    prior_exponent,
                                    batched,
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(DcbfLeaf::direct(FactorPair::product(pairs)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Some(leaves))
            },
            &self.cfg.portkey,
            &self.cfg.opts,
            &mut self.flip_stream,
            &mut self.ledger,
        )?;
        self.state.theta = step.next;
        Ok(step.outcome)
    }
}

/// Runs the sampler for `chain.iterations` sweeps and records the
/// post-burn-in trace.
pub fn run_diffusion_chain(
    dataset: &DiffusionDataset,
    cfg: DiffusionConfig,
    chain: &ChainConfig,
) -> Result<ChainTrace> {
    chain.validate()?;
    let mut sampler = DiffusionSampler::new(dataset, cfg, chain.seed)?;
    let mut trace = ChainTrace::new(1);
    let mut recorded = 0u64;
    for iter in 0..chain.iterations {
        let before = (
            sampler.ledger.leaf_output_total(),
            sampler.ledger.leaf_loop_total(),
            sampler.ledger.merge_loop_total(),
        );
        let outcome = sampler.sweep()?;
        if iter < chain.burn_in || (iter - chain.burn_in) % chain.thin != 0 {
            continue;
        }
        recorded += 1;
        trace.rows.push(TraceRow {
            iter: recorded,
            params: vec![sampler.theta()],
            outcome,
            leaf_outputs: sampler.ledger.leaf_output_total() - before.0,
            leaf_loops: sampler.ledger.leaf_loop_total() - before.1,
            merge_loops: sampler.ledger.merge_loop_total() - before.2,
            time_ns: sampler.ledger.work_units(),
        });
    }
    Ok(trace)
}
