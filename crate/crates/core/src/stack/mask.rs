use rayon::prelude::*;
use serde::Serialize;

use super::NODATA;
use crate::error::Result;
use crate::ingest::RasterGrid;

pub const DEFAULT_COVER_THRESHOLD_PCT: f64 = 30.0;

/// Loss years outside this window do not remove forest.
const LOSS_WINDOW: std::ops::RangeInclusive<i32> = 2001..=2021;

#[derive(Debug, Clone, Serialize)]
pub struct ForestMask {
    /// 1 = forest, 0 = not forest.
    pub grid: RasterGrid,
    pub provenance: String,
}

impl ForestMask {
    pub fn forest_count(&self) -> usize {
        self.grid.values.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Loss-year cells may hold either calendar years or year offsets from 2000
/// (1 = 2001); 0 and nodata mean no loss.
fn loss_year(v: f32) -> Option<i32> {
    let y = v.round() as i32;
    match y {
        1..=99 => Some(2000 + y),
        y if y > 1900 => Some(y),
        _ => None,
    }
}

/// (cover ≥ threshold AND no loss in 2001–2021) OR gain.
pub fn build_forest_mask(
    cover2000: &RasterGrid,
    loss_year_grid: &RasterGrid,
    gain: &RasterGrid,
    cover_threshold_pct: f64,
) -> Result<ForestMask> {
    cover2000.ensure_aligned(loss_year_grid, "loss_year")?;
    cover2000.ensure_aligned(gain, "gain")?;
    let values = (0..cover2000.values.len())
        .into_par_iter()
        .map(|i| {
            let c = cover2000.values[i];
            let covered = cover2000.is_valid(c) && c as f64 >= cover_threshold_pct;
            let l = loss_year_grid.values[i];
            let lost = loss_year_grid.is_valid(l) && loss_year(l).is_some_and(|y| LOSS_WINDOW.contains(&y));
            let g = gain.values[i];
            let gained = gain.is_valid(g) && g == 1.0;
            if (covered && !lost) || gained {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(ForestMask {
        grid: cover2000.with_values(values, 255.0, "forest_mask")?,
        provenance: format!(
            "cover2000 >= {cover_threshold_pct}% without loss in {}-{}, plus gain",
            LOSS_WINDOW.start(),
            LOSS_WINDOW.end()
        ),
    })
}

/// AGB where the mask is 1, nodata elsewhere.
pub fn apply_mask(agb: &RasterGrid, mask: &ForestMask) -> Result<RasterGrid> {
    agb.ensure_aligned(&mask.grid, "forest_mask")?;
    let values = agb
        .values
        .par_iter()
        .zip(&mask.grid.values)
        .map(|(&v, &m)| if m == 1.0 && agb.is_valid(v) { v } else { NODATA })
        .collect();
    agb.with_values(values, NODATA, agb.semantic.clone())
}
