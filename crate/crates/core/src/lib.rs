//! Wall-to-wall aboveground-biomass (AGB) mapping from sparse spaceborne
//! lidar footprints and co-registered SAR, optical and terrain rasters.
//!
//! The crate is organised as a batch pipeline:
//!
//! * [`ingest`] loads footprint tables, field-plot inventories and rasters.
//! * [`quality`] applies flag-based footprint screening.
//! * [`sar`] fits backscatter-vs-height curves and drops footprints outside
//!   the tolerance band around them.
//! * [`calibration`] turns field plots into AGB densities and fits the local
//!   height-to-AGB model used to label footprints.
//! * [`stack`] builds the 25-layer feature stack and the forest mask.
//! * [`learners`] holds the random forest and histogram GBDT regressors.
//! * [`ensemble`] runs k-fold training and combines fold maps into mean and
//!   uncertainty rasters.
//! * [`evaluation`] computes accuracy metrics and slope-stratified reports.
//! * [`pipeline`] wires everything together behind one JSON config.

pub mod calibration;
pub mod crs;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod learners;
pub mod pipeline;
pub mod quality;
pub mod sar;
pub mod stack;
pub mod synth;

pub use error::{Error, Result};
pub use ingest::{FootprintRecord, PlotMeasurement, RasterGrid, TreeRecord};

/// A record that failed a screening step, with every reason it failed.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Rejected<T> {
    pub record: T,
    pub reasons: Vec<String>,
}
