//! Loading and writing of footprint tables, field inventories and rasters.

mod footprints;
mod geotiff;
mod plots;
mod raster;

pub use footprints::{
    load_footprints, read_footprints, write_footprints, write_rejected_footprints, ColumnMap,
    FootprintLoad, FootprintRecord,
};
pub use plots::{load_plots, read_plots, save_plots, write_plots, PlotLoad, PlotMeasurement, TreeRecord};
pub use raster::{load_raster, write_raster, GridSpec, RasterGrid};

/// A row the loader could not turn into a record.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RowReject {
    /// 1-based data line number (header excluded).
    pub line: usize,
    pub reason: String,
}
