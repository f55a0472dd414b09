//! The Poisson coin: exact simulation of events with probability
//! `exp{ integral of (w̲ - w_t) dt over [0, T] }` for a bounded evaluable
//! path `w`.
//!
//! A unit-rate Poisson process is thrown on the bounding rectangle
//! `[0, T] x [0, w̄ - w̲]`; the event holds iff no point lands in the
//! epigraph of `w - w̲`, which is decided by evaluating the path only at the
//! finitely many point abscissae. The expected number of path evaluations
//! per flip equals the rectangle area `T (w̄ - w̲)`.

use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::rng::RandomStream;

/// A path `t -> w_t` on `[0, T]` with declared bounds `w̲ <= w_t <= w̄`.
///
/// `eval` may lazily extend underlying stochastic state (hence the stream);
/// evaluations outside the declared bounds falsify the factorization that
/// the bounds certify and are reported as hard errors by the flip, never
/// clamped.
pub trait BoundedPath {
    fn horizon(&self) -> f64;
    fn lower(&self) -> f64;
    fn upper(&self) -> f64;
    fn eval(&mut self, t: f64, stream: &mut RandomStream) -> Result<f64>;
}

/// Constant-height path: the Poisson coin on it has success probability
/// `exp(-height * horizon)` relative to a zero lower bound.
#[derive(Debug, Clone)]
pub struct ConstantPath {
    pub height: f64,
    pub horizon: f64,
}

impl BoundedPath for ConstantPath {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn lower(&self) -> f64 {
        0.0
    }

    fn upper(&self) -> f64 {
        self.height
    }

    fn eval(&mut self, _t: f64, _stream: &mut RandomStream) -> Result<f64> {
        Ok(self.height)
    }
}

fn rect_rate<P: BoundedPath + ?Sized>(path: &P) -> Result<f64> {
    let (t, lo, hi) = (path.horizon(), path.lower(), path.upper());
    if !(t.is_finite() && t >= 0.0) || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(Error::InvalidInput(format!(
            "bad path geometry: T={t}, bounds [{lo}, {hi}]"
        )));
    }
    Ok(t * (hi - lo))
}

fn draw_poisson(rate: f64, stream: &mut RandomStream) -> u64 {
    // rand_distr rejects rate 0; callers handle that case first.
    Poisson::new(rate).expect("positive rate").sample(stream) as u64
}

/// Points of the bounding-rectangle Poisson process, sorted by abscissa so
/// lazily extended paths are revealed in time order.
fn rectangle_points(
    count: u64,
    horizon: f64,
    band: f64,
    stream: &mut RandomStream,
) -> Vec<(f64, f64)> {
    let mut points: Vec<(f64, f64)> = (0..count)
        .map(|_| (stream.uniform_in(0.0, horizon), stream.uniform_in(0.0, band)))
        .collect();
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    points
}

fn check_bounds<P: BoundedPath + ?Sized>(path: &P, t: f64, value: f64) -> Result<()> {
    let (lo, hi) = (path.lower(), path.upper());
    let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    if value < lo - slack || value > hi + slack {
        return Err(Error::BoundViolation {
            t,
            value,
            lower: lo,
            upper: hi,
        });
    }
    Ok(())
}

/// One Poisson-coin flip: returns `true` with probability
/// `exp{-∫ (w_t - w̲) dt}`.
///
/// Every thrown point is evaluated (no early exit), so the mean number of
/// path evaluations per flip is exactly the rectangle area.
pub fn flip_poisson_coin<P: BoundedPath + ?Sized>(
    path: &mut P,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<bool> {
    let rate = rect_rate(path)?;
    if rate == 0.0 {
        return Ok(true);
    }
    let count = draw_poisson(rate, stream);
    let band = path.upper() - path.lower();
    let mut heads = true;
    for (t, a) in rectangle_points(count, path.horizon(), band, stream) {
        let value = path.eval(t, stream)?;
        ledger.record_path_eval();
        check_bounds(path, t, value)?;
        if a <= value - path.lower() {
            heads = false;
        }
    }
    Ok(heads)
}

/// Result of a batched run of Poisson-coin flips on one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOutcome {
    /// Zero-rate process: every flip is heads, forever.
    AllHeads,
    /// Flips `1..index` were heads with an empty point process; flip `index`
    /// was the first with a nonempty process and came out as `outcome`.
    At { index: u64, outcome: bool },
}

/// Simulates the first flip whose bounding-rectangle process is nonempty,
/// together with the implied run of all-heads outcomes before it.
///
/// The nonempty-process index is geometric with success probability
/// `1 - exp(-rate)`; conditional on it, the point count is Poisson
/// conditioned to be at least one. The induced flip stream is
/// distributionally identical to repeated [`flip_poisson_coin`] calls but
/// evaluates the path only for the one nonempty process.
pub fn batch_first_success<P: BoundedPath + ?Sized>(
    path: &mut P,
    stream: &mut RandomStream,
    ledger: &mut CostLedger,
) -> Result<BatchOutcome> {
    let rate = rect_rate(path)?;
    if rate == 0.0 {
        return Ok(BatchOutcome::AllHeads);
    }
    let empty_prob = (-rate).exp();
    let mut u = stream.uniform();
    while u == 0.0 {
        u = stream.uniform();
    }
    let index = if empty_prob == 0.0 {
        1
    } else {
        (u.ln() / empty_prob.ln()).ceil().max(1.0) as u64
    };
    let count = poisson_at_least_one(rate, stream);
    let band = path.upper() - path.lower();
    let mut heads = true;
    for (t, a) in rectangle_points(count, path.horizon(), band, stream) {
        let value = path.eval(t, stream)?;
        ledger.record_path_eval();
        check_bounds(path, t, value)?;
        if a <= value - path.lower() {
            heads = false;
        }
    }
    Ok(BatchOutcome::At {
        index,
        outcome: heads,
    })
}

/// Adapter turning a bounded path into a reusable coin source; each flip is
/// one Poisson-coin draw on the owned path.
pub struct PoissonCoinSource<P> {
    pub path: P,
}

impl<P: BoundedPath + Send> crate::coin::CoinSource for PoissonCoinSource<P> {
    fn flip(&mut self, stream: &mut RandomStream, ledger: &mut CostLedger) -> Result<bool> {
        ledger.record_elementary_flip();
        flip_poisson_coin(&mut self.path, stream, ledger)
    }
}

fn poisson_at_least_one(rate: f64, stream: &mut RandomStream) -> u64 {
    if rate > 30.0 {
        // Empty draws are vanishingly rare here; plain rejection.
        loop {
            let k = draw_poisson(rate, stream);
            if k >= 1 {
                return k;
            }
        }
    }
    // Inverse-CDF walk on the zero-truncated distribution.
    let p0 = (-rate).exp();
    let u = stream.uniform_in(p0, 1.0);
    let mut k = 0u64;
    let mut pk = p0;
    let mut cdf = p0;
    while cdf < u {
        k += 1;
        pk *= rate / k as f64;
        cdf += pk;
    }
    k.max(1)
}
