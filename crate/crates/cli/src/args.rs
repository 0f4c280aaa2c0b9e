//! Command-line grammar.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::output::Format;
use crate::studies::SampleDist;

/// Inclusive grid `a:b:n` of `n` evenly spaced points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl GridSpec {
    pub const fn new(start: f64, end: f64, points: usize) -> Self {
        Self { start, end, points }
    }

    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start];
        }
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|i| self.start + (self.end - self.start) * i as f64 / last)
            .collect()
    }
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, n] = parts.as_slice() else {
            return Err(format!("expected a:b:n, found '{s}'"));
        };
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("'{x}' is not a number"));
        let (start, end) = (num(a)?, num(b)?);
        let points: usize = n.trim().parse().map_err(|_| format!("'{n}' is not a point count"))?;
        if !(start.is_finite() && end.is_finite()) {
            return Err("grid bounds must be finite".into());
        }
        if points == 0 || (points == 1 && start != end) {
            return Err("a grid needs at least two points unless its bounds agree".into());
        }
        Ok(Self { start, end, points })
    }
}

#[derive(Debug, Parser)]
#[command(name = "entropic", version, about = "Entropic pricing and hedging in incomplete markets")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Residual tolerance of the solvers.
    #[arg(long, allow_hyphen_values = true, global = true, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, global = true, default_value_t = 100)]
    pub max_iter: usize,
    /// Seed of sampled markets.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file; tables also get a `<stem>.meta.json` sidecar.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct MarketArgs {
    /// Market JSON: {"q": [...], "Q": [[...], ...], "weights": [...], "dt": 1}.
    #[arg(long)]
    pub market: PathBuf,
    /// `call:K[@j]`, `put:K[@j]`, `digital:K[@j]`, `forward:K[@j]` or a JSON
    /// file of payoff values. The asset index defaults to the last asset.
    #[arg(long)]
    pub payoff: Option<String>,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyName {
    FundingRateNormal,
    FundingRateBinomial,
    Options,
    Quantum,
    Xva,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Entropy-adjusted mean of a payoff under the market's measure.
    RiskMetric {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, allow_hyphen_values = true)]
        alpha_grid: Option<GridSpec>,
    },
    /// Price measure and funding rate.
    Calibrate {
        #[arg(long)]
        market: PathBuf,
    },
    /// Hedge and price of a payoff, optionally over notionals and strikes.
    Price {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, allow_hyphen_values = true)]
        lambda_grid: Option<GridSpec>,
        #[arg(long, allow_hyphen_values = true)]
        strike_grid: Option<GridSpec>,
    },
    /// Mid price and first-order half-spread.
    OrderBook {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long, allow_hyphen_values = true)]
        strike_grid: Option<GridSpec>,
    },
    /// Sensitivity of the funding rate, tilt and price to the measure.
    ModelRisk {
        #[command(flatten)]
        market: MarketArgs,
        /// `asset:j`, `payoff`, or a JSON file with one value per outcome.
        #[arg(long)]
        direction: String,
        /// Finite-difference step of the cross-check.
        #[arg(long, allow_hyphen_values = true, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Finite-difference price and hedge surfaces.
    Pde {
        #[arg(long)]
        model: PathBuf,
        /// Overrides the risk aversion of the model file.
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
    },
    /// Operator market, or the two-state market when no market is given.
    Quantum {
        /// Operator market JSON: {"q": [...], "finals": [{"re": ..., "im": ...}], "dt": 1}.
        #[arg(long)]
        market: Option<PathBuf>,
        /// Operator JSON for an operator market; `call`, `put` or `digital`
        /// for the two-state market.
        #[arg(long)]
        payoff: Option<String>,
        #[arg(long, allow_hyphen_values = true, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = std::f64::consts::FRAC_PI_4)]
        theta: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = 1.0)]
        eps_gap: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        strike: f64,
        #[arg(long, allow_hyphen_values = true)]
        strike_grid: Option<GridSpec>,
    },
    /// Threshold prices, default statistics and viability window of a
    /// margined trade.
    Xva {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        price_grid: Option<GridSpec>,
    },
    /// Parameter sweeps written as tables.
    Study(StudyArgs),
    /// Checks a market, operator, scenario or PDE model file.
    Validate { file: PathBuf },
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[arg(value_enum)]
    pub name: StudyName,
    #[arg(long, value_enum, default_value_t = SampleDist::Uniform)]
    pub dist: SampleDist,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// `call` or `digital` (also `put` for the quantum study).
    #[arg(long, default_value = "call")]
    pub payoff: String,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1.0)]
    pub alpha: f64,
    /// Funding rate of the riskless asset.
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub r: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub strike_grid: Option<GridSpec>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_grid: Option<GridSpec>,
    #[arg(long, allow_hyphen_values = true, default_value_t = std::f64::consts::FRAC_PI_4)]
    pub theta: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1.0)]
    pub eps_gap: f64,
    /// Swept parameter of the funding-rate studies: the second asset's
    /// volatility or default probability.
    #[arg(long, allow_hyphen_values = true)]
    pub sweep: Option<GridSpec>,
    #[arg(long, allow_hyphen_values = true)]
    pub price_grid: Option<GridSpec>,
}
