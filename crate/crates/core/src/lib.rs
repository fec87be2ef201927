//! Super-replication of game (Israeli) options under proportional transaction
//! costs.
//!
//! The seller of a game option with convex payoff `F` and constant
//! cancellation penalty `Δ` can super-replicate with a buy-and-hold position
//! and a hitting-time cancellation rule. The cheapest such hedge costs
//! `R(s)`, the game variant of the concave envelope of `F`, and no dynamic
//! strategy does better once transaction costs are present.
//!
//! Modules:
//!
//! * [`payoff`]: max-affine payoffs, coordinate sections, subgradients and the
//!   discounted game reward.
//! * [`envelope`]: tangent coefficients, the envelope `R`, membership checks and
//!   a brute-force minimality oracle ([`oracle`]).
//! * [`hedge`]: transaction-cost portfolio values, the cheapest trivial hedge,
//!   pathwise verification and the static search for a non-constant penalty.
//! * [`market`]: seeded scenario generation (GBM, exponential fBM, unbounded
//!   rate counterexample) and CSV exchange.
//! * [`stopping`]: multinomial tree martingales and the backward induction that
//!   bounds the robust stopping value from below.
//! * [`cps`]: Esscher reweighting, path-to-tree projection and the relative
//!   band check behind consistent price systems.
//!
//! Data-parallel loops go through [`Execution`]; with the `parallel` feature
//! (on by default) they run on rayon, otherwise sequentially.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cps;
pub mod envelope;
mod error;
mod exec;
pub mod hedge;
mod linear;
pub mod market;
pub mod oracle;
pub mod payoff;
pub mod stopping;

pub use envelope::{tangent_coefficients, Branch, EnvelopeData};
pub use error::{Error, Result};
pub use exec::Execution;
pub use hedge::{build_trivial_hedge, verify_perfect_hedge, HedgeReport, TrivialHedge};
pub use market::{simulate, MarketModel, MarketPath};
pub use payoff::{GameOption, MaxAffinePayoff};
