//! Divide-and-conquer Bernoulli factory MCMC.
//!
//! This crate implements exact accept/reject Markov chains for posteriors
//! whose odds factorize over observations but cannot be evaluated. The
//! acceptance decision is simulated, never computed: weighted coins with
//! unknown success probabilities are combined by the 2-coin algorithm at the
//! leaves of a binary partition tree and merged pairwise towards the root,
//! which produces a Barker acceptance coin at polynomial rather than
//! exponential cost in the number of factors.
//!
//! The building blocks are organized bottom-up:
//!
//! * [`rng`] — splittable counter-based random streams,
//! * [`coin`] / [`ledger`] — weighted coins, ternary flip outcomes and cost
//!   accounting,
//! * [`factories`] — 2-coin, flipped 2-coin, coin merge and the recursive
//!   divide-and-conquer factory, all with optional early-abort (Portkey)
//!   escapes,
//! * [`partition`] — balanced binary partition trees, per-iteration
//!   reshuffling and closed-form overhead predictions,
//! * [`poisson`] — the Poisson coin for events of probability
//!   `exp{-∫ (w_t - w̲) dt}`,
//! * [`mcmc`] — a generic Barker-within-Gibbs driver, chain traces and
//!   diagnostics,
//! * [`diffusion`] — exact Bayesian inference for a tanh-drift diffusion
//!   observed at discrete times,
//! * [`cox`] — a level-set Cox process with an augmented Gibbs benchmark and
//!   a partially collapsed sampler driven by the factory.

pub mod coin;
pub mod cox;
pub mod diffusion;
mod error;
pub mod factories;
pub mod ledger;
pub mod mcmc;
pub mod partition;
pub mod poisson;
pub mod rng;

pub use coin::{CoinSource, FlipOutcome, WeightedCoin};
pub use error::{Error, Result};
pub use factories::{
    flip_dcbf, flip_merge, flip_two_coin, flip_two_coin_flipped, merge_overhead, DcbfLeaf,
    FactorPair, FactoryOpts, PortkeyConfig, TwoCoinForm,
};
pub use ledger::{CostLedger, NodeId};
pub use rng::RandomStream;
