//! Weighted coins: a tractable scale constant paired with a flip source for
//! an unknown success probability.

use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::rng::RandomStream;

/// Result of one factory flip. `Escaped` can occur only when a Portkey
/// continue-probability below 1 is configured somewhere in the tree; the
/// MCMC driver maps it to rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipOutcome {
    Heads,
    Tails,
    Escaped,
}

impl FlipOutcome {
    pub fn is_heads(self) -> bool {
        self == FlipOutcome::Heads
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FlipOutcome::Heads => "heads",
            FlipOutcome::Tails => "tails",
            FlipOutcome::Escaped => "escaped",
        }
    }
}

impl std::str::FromStr for FlipOutcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(FlipOutcome::Heads),
            "tails" => Ok(FlipOutcome::Tails),
            "escaped" => Ok(FlipOutcome::Escaped),
            other => Err(Error::Parse {
                what: "flip outcome",
                detail: other.to_string(),
            }),
        }
    }
}

/// A procedure drawing one Bernoulli outcome whose probability need not be
/// known to the caller. Repeated flips must be i.i.d. conditional on fixed
/// model state; implementations backed by an atomic draw record one
/// elementary flip on the ledger per call.
pub trait CoinSource: Send {
    fn flip(&mut self, stream: &mut RandomStream, ledger: &mut CostLedger) -> Result<bool>;
}

struct BernoulliSource {
    p: f64,
}

impl CoinSource for BernoulliSource {
    fn flip(&mut self, stream: &mut RandomStream, ledger: &mut CostLedger) -> Result<bool> {
        ledger.record_elementary_flip();
        Ok(stream.coin(self.p))
    }
}

struct CertainSource;

impl CoinSource for CertainSource {
    fn flip(&mut self, _stream: &mut RandomStream, ledger: &mut CostLedger) -> Result<bool> {
        ledger.record_elementary_flip();
        Ok(true)
    }
}

/// A nonnegative tractable weight `c` together with a flip source for an
/// unknown probability `p`; the coin represents the quantity `c * p`.
pub struct WeightedCoin {
    scale: f64,
    source: Box<dyn CoinSource>,
}

impl WeightedCoin {
    pub fn new(scale: f64, source: Box<dyn CoinSource>) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "coin weight must be finite and nonnegative, got {scale}"
            )));
        }
        Ok(Self { scale, source })
    }

    /// Coin whose success probability is known; used for synthetic factors
    /// and for the tractable part of application factorizations.
    pub fn tractable(scale: f64, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        Self::new(scale, Box::new(BernoulliSource { p }))
    }

    /// Coin with `p = 1`: the weight alone.
    pub fn certain(scale: f64) -> Result<Self> {
        Self::new(scale, Box::new(CertainSource))
    }

    /// Product coin: the weight is the product of the parts' weights and a
    /// flip succeeds iff every part's flip succeeds. Flips short-circuit on
    /// the first failure, which leaves the law unchanged.
    pub fn product(parts: Vec<WeightedCoin>) -> Result<Self> {
        let scale = parts.iter().map(|c| c.scale).product();
        Self::new(scale, Box::new(ProductSource { parts }))
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn flip(&mut self, stream: &mut RandomStream, ledger: &mut CostLedger) -> Result<bool> {
        self.source.flip(stream, ledger)
    }
}

impl std::fmt::Debug for WeightedCoin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeightedCoin")
            .field("scale", &self.scale)
            .finish_non_exhaustive()
    }
}

struct ProductSource {
    parts: Vec<WeightedCoin>,
}

impl CoinSource for ProductSource {
    fn flip(&mut self, stream: &mut RandomStream, ledger: &mut CostLedger) -> Result<bool> {
        for part in &mut self.parts {
            if !part.flip(stream, ledger)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        assert!(WeightedCoin::tractable(-1.0, 0.5).is_err());
        assert!(WeightedCoin::tractable(1.0, 1.5).is_err());
        assert!(WeightedCoin::certain(f64::NAN).is_err());
    }

    #[test]
    fn product_multiplies_scales_and_ands_flips() {
        let parts = vec![
            WeightedCoin::tractable(2.0, 1.0).unwrap(),
            WeightedCoin::tractable(0.5, 1.0).unwrap(),
            WeightedCoin::tractable(3.0, 0.0).unwrap(),
        ];
        let mut coin = WeightedCoin::product(parts).unwrap();
        assert_eq!(coin.scale(), 3.0);
        let mut stream = RandomStream::new(0, 0);
        let mut ledger = CostLedger::new();
        assert!(!coin.flip(&mut stream, &mut ledger).unwrap());
    }

    #[test]
    fn product_flip_rate_matches_probability_product() {
        let mut stream = RandomStream::new(5, 0);
        let mut ledger = CostLedger::new();
        let mut coin = WeightedCoin::product(vec![
            WeightedCoin::tractable(1.0, 0.9).unwrap(),
            WeightedCoin::tractable(1.0, 0.8).unwrap(),
        ])
        .unwrap();
        let n = 50_000;
        let mut heads = 0u64;
        for _ in 0..n {
            if coin.flip(&mut stream, &mut ledger).unwrap() {
                heads += 1;
            }
        }
        let p = 0.72;
        let rate = heads as f64 / n as f64;
        let tol = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() < tol, "{rate} vs {p} +/- {tol}");
    }
}
