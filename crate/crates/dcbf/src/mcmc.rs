//! Generic Barker-within-Gibbs driver, chain traces, and diagnostics.

use std::io::{BufRead, Write};

use crate::coin::FlipOutcome;
use crate::error::{Error, Result};
use crate::factories::{flip_dcbf, DcbfLeaf, FactoryOpts, PortkeyConfig};
use crate::ledger::CostLedger;
use crate::rng::RandomStream;

/// Settings shared by the chain drivers.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub iterations: u64,
    pub burn_in: u64,
    /// Proposal half-width scale; drivers use a window of `delta / sqrt(n)`.
    pub delta: f64,
    pub portkey: PortkeyConfig,
    /// Tree depth; `None` selects `floor(log4 n)`.
    pub depth: Option<u32>,
    pub seed: u64,
    pub thin: u64,
    pub parallel: bool,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.iterations <= self.burn_in {
            return Err(Error::InvalidInput(format!(
                "need iterations > burn_in >= 0, got {} and {}",
                self.iterations, self.burn_in
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "proposal scale must be positive, got {}",
                self.delta
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidInput("thinning must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 1_000,
            delta: 8.0,
            portkey: PortkeyConfig::off(),
            depth: None,
            seed: 0,
            thin: 1,
            parallel: false,
        }
    }
}

/// One recorded iteration: parameter values, the factory outcome, the
/// iteration's ledger deltas and the cumulative deterministic work counter
/// (used as a reproducible stand-in for wall time).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub params: Vec<f64>,
    pub outcome: FlipOutcome,
    pub leaf_outputs: u64,
    pub leaf_loops: u64,
    pub merge_loops: u64,
    pub time_ns: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ChainTrace {
    pub params_per_iter: usize,
    pub rows: Vec<TraceRow>,
}

impl ChainTrace {
    pub fn new(params_per_iter: usize) -> Self {
        Self {
            params_per_iter,
            rows: Vec::new(),
        }
    }

    pub fn param_series(&self, index: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.params[index]).collect()
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["iter".to_string()];
        for k in 0..self.params_per_iter {
            cols.push(format!("theta_{}", k + 1));
        }
        cols.extend(
            ["outcome", "leaf_outputs", "leaf_loops", "merge_loops", "time_ns"]
                .map(String::from),
        );
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", self.header())?;
        for row in &self.rows {
            write!(out, "{}", row.iter)?;
            for p in &row.params {
                write!(out, ",{p}")?;
            }
            writeln!(
                out,
                ",{},{},{},{},{}",
                row.outcome.as_str(),
                row.leaf_outputs,
                row.leaf_loops,
                row.merge_loops,
                row.time_ns
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or(Error::Parse {
                what: "trace csv",
                detail: "empty file".into(),
            })??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 6 || cols[0] != "iter" {
            return Err(Error::Parse {
                what: "trace csv",
                detail: format!("unexpected header {header}"),
            });
        }
        let params_per_iter = cols.len() - 6;
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse {
                    what: "trace csv",
                    detail: format!("row width {} != header {}", fields.len(), cols.len()),
                });
            }
            let bad = |detail: String| Error::Parse {
                what: "trace csv",
                detail,
            };
            let iter = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
            let params = fields[1..1 + params_per_iter]
                .iter()
                .map(|f| f.parse().map_err(|e| bad(format!("{e}"))))
                .collect::<Result<Vec<f64>>>()?;
            let outcome: FlipOutcome = fields[1 + params_per_iter].parse()?;
            let tail: Vec<u64> = fields[2 + params_per_iter..]
                .iter()
                .map(|f| f.parse().map_err(|e| bad(format!("{e}"))))
                .collect::<std::result::Result<_, _>>()?;
            rows.push(TraceRow {
                iter,
                params,
                outcome,
                leaf_outputs: tail[0],
                leaf_loops: tail[1],
                merge_loops: tail[2],
                time_ns: tail[3],
            });
        }
        Ok(Self {
            params_per_iter,
            rows,
        })
    }
}

/// Per-configuration summary row emitted by the experiment harness.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub n: u64,
    pub ell: u32,
    pub omega_hat: f64,
    pub phi_hat: f64,
    pub acf1: f64,
    pub acf4: f64,
    pub acf16: f64,
    pub ess: f64,
    pub mean_time_ns: f64,
}

pub const SUMMARY_HEADER: &str = "n,ell,omega_hat,phi_hat,acf1,acf4,acf16,ess,mean_time_ns";

impl Summary {
    /// Computes the summary from a recorded trace. `root_flips_per_iter` is
    /// the number of factory invocations each iteration performed (one per
    /// updated parameter block); `param_index` selects the series used for
    /// the autocorrelation and effective-sample-size columns.
    pub fn from_trace(
        trace: &ChainTrace,
        n: u64,
        ell: u32,
        root_flips_per_iter: u64,
        param_index: usize,
    ) -> Result<Summary> {
        if trace.rows.is_empty() {
            return Err(Error::EmptyLedger);
        }
        let iters = trace.rows.len() as f64;
        let flips = iters * root_flips_per_iter as f64;
        let leaf_outputs: u64 = trace.rows.iter().map(|r| r.leaf_outputs).sum();
        let leaf_loops: u64 = trace.rows.iter().map(|r| r.leaf_loops).sum();
        let series = trace.param_series(param_index);
        let acf_or_zero = |lag: usize| acf(&series, lag).unwrap_or(0.0);
        Ok(Summary {
            n,
            ell,
            omega_hat: leaf_outputs as f64 / flips,
            phi_hat: leaf_loops as f64 / flips,
            acf1: acf_or_zero(1),
            acf4: acf_or_zero(4),
            acf16: acf_or_zero(16),
            ess: ess(&series).unwrap_or(0.0),
            mean_time_ns: trace.rows.last().unwrap().time_ns as f64 / iters,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n,
            self.ell,
            self.omega_hat,
            self.phi_hat,
            self.acf1,
            self.acf4,
            self.acf16,
            self.ess,
            self.mean_time_ns
        )
    }
}

pub fn write_summary_csv<W: Write>(out: &mut W, rows: &[Summary]) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_row())?;
    }
    Ok(())
}

/// Result of one Barker accept/reject step.
#[derive(Debug, Clone, Copy)]
pub struct BarkerStep {
    pub next: f64,
    pub proposal: f64,
    pub outcome: FlipOutcome,
}

/// One Barker step for a scalar parameter with a symmetric proposal: the
/// move is accepted iff the divide-and-conquer factory over the leaves built
/// for `(current, proposal)` returns heads; tails and escapes both leave the
/// chain in place.
///
/// `build_leaves` may return `Ok(None)` to signal that the proposal has zero
/// posterior odds (outside prior support), which rejects without running the
/// factory.
pub fn barker_step<Prop, Build>(
    current: f64,
    propose: Prop,
    build_leaves: Build,
    portkey: &PortkeyConfig,
    opts: &FactoryOpts,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<BarkerStep>
where
    Prop: FnOnce(f64, &mut RandomStream) -> f64,
    Build: FnOnce(f64, f64) -> Result<Option<Vec<DcbfLeaf>>>,
{
    let proposal = propose(current, stream);
    let Some(mut leaves) = build_leaves(current, proposal)? else {
        return Ok(BarkerStep {
            next: current,
            proposal,
            outcome: FlipOutcome::Tails,
        });
    };
    let outcome = flip_dcbf(&mut leaves, portkey, opts, stream, ledger)?;
    let next = if outcome.is_heads() { proposal } else { current };
    Ok(BarkerStep {
        next,
        proposal,
        outcome,
    })
}

/// Sample autocorrelation at `lag`.
pub fn acf(series: &[f64], lag: usize) -> Result<f64> {
    if series.len() < 10 * lag.max(1) {
        return Err(Error::InvalidInput(format!(
            "series of length {} too short for lag {lag}",
            series.len()
        )));
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return Err(Error::ConstantTrace);
    }
    let ck: f64 = series[..n - lag]
        .iter()
        .zip(&series[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum::<f64>()
        / n as f64;
    Ok(ck / c0)
}

/// Effective sample size via Geyer's initial positive sequence: the
/// autocorrelation time sums consecutive lag pairs until the first
/// nonpositive pair.
pub fn ess(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 10 {
        return Err(Error::InvalidInput("series too short for ess".into()));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return Err(Error::ConstantTrace);
    }
    let auto = |lag: usize| -> f64 {
        if lag >= n {
            return 0.0;
        }
        series[..n - lag]
            .iter()
            .zip(&series[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut m = 0usize;
    loop {
        let gamma = auto(2 * m) + auto(2 * m + 1);
        if gamma <= 0.0 || 2 * m + 1 >= n {
            break;
        }
        tau += 2.0 * gamma;
        m += 1;
    }
    Ok(n as f64 / tau.max(1e-12))
}

/// Empirical ENL of the monolithic 2-coin over `n_factors` i.i.d. synthetic
/// factors with known per-factor coin probability `p` and unit weights: the
/// baseline whose cost grows like `p^{-n}`.
pub fn vanilla_two_coin_benchmark(
    n_factors: usize,
    p: f64,
    flips: u64,
    stream: &mut RandomStream,
) -> Result<f64> {
    use crate::coin::WeightedCoin;
    use crate::factories::FactorPair;

    let mut ledger = CostLedger::new();
    let opts = FactoryOpts::default();
    for _ in 0..flips {
        let side = |_s: &mut RandomStream| -> Result<WeightedCoin> {
            let parts = (0..n_factors)
                .map(|_| WeightedCoin::tractable(1.0, p))
                .collect::<Result<Vec<_>>>()?;
            WeightedCoin::product(parts)
        };
        let pair = FactorPair::new(side(stream)?, side(stream)?)?;
        let mut leaves = vec![DcbfLeaf::direct(pair)];
        flip_dcbf(&mut leaves, &PortkeyConfig::off(), &opts, stream, &mut ledger)?;
    }
    let (_, phi) = crate::factories::merge_overhead(&ledger)?;
    Ok(phi)
}
