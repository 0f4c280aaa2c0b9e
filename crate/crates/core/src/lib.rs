//! Pricing and hedging in incomplete markets with entropy-adjusted means.
//!
//! The crate covers the full pipeline: calibrating a price measure and a
//! funding rate to traded assets, hedging a payoff for a risk-averse
//! investor, the sensitivity of prices to the real-world measure, PDE
//! pricing in continuous time, a trace (operator) formulation of markets,
//! and margined trades between two counterparties.

pub mod calibrate;
pub mod engine;
pub mod error;
pub mod hedge;
pub mod measure;
pub mod model_risk;
pub mod numeric;
pub mod pde;
pub mod quantum;
pub mod xva;

pub use error::{Error, Result};
