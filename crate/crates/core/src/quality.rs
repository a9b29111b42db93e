//! Flag-based footprint screening.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FootprintRecord;
use crate::Rejected;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityCriteria {
    pub require_quality_flag: u8,
    pub exclude_degrade: bool,
    /// Shots must have sensitivity strictly greater than this.
    pub min_sensitivity: f64,
    pub require_night: bool,
    pub require_power_beam: bool,
}

impl Default for QualityCriteria {
    fn default() -> Self {
        QualityCriteria {
            require_quality_flag: 1,
            exclude_degrade: true,
            min_sensitivity: 0.98,
            require_night: true,
            require_power_beam: true,
        }
    }
}

impl QualityCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_sensitivity) {
            return Err(Error::invalid("min_sensitivity must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFailure {
    QualityFlag,
    Degrade,
    Sensitivity,
    Daytime,
    CoverageBeam,
}

impl fmt::Display for QualityFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityFailure::QualityFlag => "quality_flag",
            QualityFailure::Degrade => "degrade",
            QualityFailure::Sensitivity => "sensitivity",
            QualityFailure::Daytime => "daytime",
            QualityFailure::CoverageBeam => "coverage_beam",
        })
    }
}

/// Every criterion `record` fails, in a fixed order.
pub fn failures(record: &FootprintRecord, criteria: &QualityCriteria) -> Vec<QualityFailure> {
    let mut out = Vec::new();
    if record.quality_flag != criteria.require_quality_flag {
        out.push(QualityFailure::QualityFlag);
    }
    if criteria.exclude_degrade && record.degrade_flag {
        out.push(QualityFailure::Degrade);
    }
    if record.sensitivity <= criteria.min_sensitivity {
        out.push(QualityFailure::Sensitivity);
    }
    if criteria.require_night && !record.night_acquisition {
        out.push(QualityFailure::Daytime);
    }
    if criteria.require_power_beam && !record.power_beam {
        out.push(QualityFailure::CoverageBeam);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct QualityOutcome {
    pub retained: Vec<FootprintRecord>,
    pub rejected: Vec<Rejected<FootprintRecord>>,
}

/// Partition footprints into those passing every enabled criterion and those
/// failing at least one. Input order is preserved on both sides.
pub fn filter_quality(footprints: Vec<FootprintRecord>, criteria: &QualityCriteria) -> QualityOutcome {
    let verdicts: Vec<Vec<QualityFailure>> = footprints.par_iter().map(|r| failures(r, criteria)).collect();
    let mut out = QualityOutcome::default();
    for (record, fails) in footprints.into_iter().zip(verdicts) {
        if fails.is_empty() {
            out.retained.push(record);
        } else {
            out.rejected.push(Rejected {
                record,
                reasons: fails.iter().map(ToString::to_string).collect(),
            });
        }
    }
    out
}
