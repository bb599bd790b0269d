//! Discrete-time airspace simulation of UAM lanes among conventional
//! traffic, with optional speed adjustment, and its report tables.

mod report;
mod run;
mod scenario;
mod traffic;

use thiserror::Error;

pub use report::{
    cdf_dominates, empirical_quantile, quantile_linear, report, write_bundle, CdfRow, DelayRow, HistogramRow, PolarRow,
    ReportBundle, ReportConfig, BUNDLE_FILES,
};
pub use run::{encounter_pairs, run, run_all, CpaRecord, Diagnostics, FlightRecord, SimMode, SimResult, Snapshot};
pub use scenario::{
    EncounterCriteria, GeneratorConfig, LaneConfig, PredictionConfig, PredictorKind, Procedure, ScenarioConfig,
    ScriptedIntruder, SpeedProfile, TrafficSource,
};
pub use traffic::{build_traffic, truth_tracks, TrafficTrack};

use crate::controller::ControllerError;
use crate::geo::GeoError;
use crate::predictor::PredictError;
use crate::trajdata::DataError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("prediction: {0}")]
    Predict(#[from] PredictError),
    #[error("controller: {0}")]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("traffic data: {0}")]
    Data(#[from] DataError),
    #[error("no results to report")]
    NoResults,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
