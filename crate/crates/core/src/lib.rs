//! Natural-gas storage valuation and hedging.

pub mod calendar;
pub mod error;
pub mod futures;
pub mod hedging;
pub mod intrinsic;
pub mod linalg;
pub mod market_data;
pub mod model_risk;
pub mod optimize;
pub mod params_io;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod scalar;
pub mod spot;
pub mod stats;
pub mod storage;
pub mod valuation;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases for the common entry points.
pub mod f64 {
    pub type StorageSpec = crate::storage::StorageSpec<f64>;
    pub type GabillonParams = crate::futures::GabillonParams<f64>;
    pub type SpotParams = crate::spot::SpotParams<f64>;
    pub type PriceHistory = crate::market_data::PriceHistory<f64>;
    pub type CurvePathSet = crate::futures::CurvePathSet<f64>;
    pub type SpotPathSet = crate::spot::SpotPathSet<f64>;
    pub type MarketScenarios = crate::valuation::MarketScenarios<f64>;
    pub type Policy = crate::valuation::Policy<f64>;
    pub type ValuationReport = crate::valuation::ValuationReport<f64>;
    pub type HedgePlan = crate::hedging::HedgePlan<f64>;
    pub type Experiment = crate::pipeline::Experiment<f64>;
    pub type IntrinsicSolution = crate::intrinsic::IntrinsicSolution<f64>;
    pub type ModelFamily = crate::model_risk::ModelFamily<f64>;
}

pub use storage::{Action, StorageSpec};
