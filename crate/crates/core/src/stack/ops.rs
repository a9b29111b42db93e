//! Per-pixel and per-window raster transforms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::NODATA;
use crate::error::{Error, Result};
use crate::ingest::{GridSpec, RasterGrid};

/// γ₀ = 10·log₁₀(DN²) − 83.0 dB; non-positive DN is a void and maps to None.
pub fn dn_to_gamma0(dn: f64) -> Option<f64> {
    (dn > 0.0 && dn.is_finite()).then(|| 10.0 * (dn * dn).log10() - 83.0)
}

pub fn dn_grid_to_gamma0(dn: &RasterGrid, semantic: &str) -> Result<RasterGrid> {
    let values = dn
        .values
        .par_iter()
        .map(|&v| {
            if dn.is_valid(v) {
                dn_to_gamma0(v as f64).map_or(NODATA, |g| g as f32)
            } else {
                NODATA
            }
        })
        .collect();
    dn.with_values(values, NODATA, semantic)
}

fn zip_map(
    a: &RasterGrid,
    b: &RasterGrid,
    b_name: &str,
    semantic: &str,
    f: impl Fn(f32, f32) -> Option<f32> + Sync,
) -> Result<RasterGrid> {
    a.ensure_aligned(b, b_name)?;
    let values = a
        .values
        .par_iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            if a.is_valid(x) && b.is_valid(y) {
                f(x, y).filter(|v| v.is_finite()).unwrap_or(NODATA)
            } else {
                NODATA
            }
        })
        .collect();
    a.with_values(values, NODATA, semantic)
}

/// Ratio of two backscatter bands expressed in dB (a − b).
pub fn band_ratio_db(a_db: &RasterGrid, b_db: &RasterGrid, semantic: &str) -> Result<RasterGrid> {
    zip_map(a_db, b_db, semantic, semantic, |a, b| Some(a - b))
}

pub fn ndvi_value(nir: f64, red: f64) -> Option<f64> {
    let den = nir + red;
    (den != 0.0).then(|| (nir - red) / den)
}

pub fn ndvi(nir: &RasterGrid, red: &RasterGrid) -> Result<RasterGrid> {
    zip_map(nir, red, "red", "NDVI", |n, r| ndvi_value(n as f64, r as f64).map(|v| v as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    Mean,
    Max,
}

/// Per-pixel reduction over the valid values of aligned grids.
pub fn temporal_reduce(grids: &[RasterGrid], reducer: Reducer, semantic: &str) -> Result<RasterGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::invalid("temporal_reduce needs at least one grid"))?;
    for (i, g) in grids.iter().enumerate().skip(1) {
        first.ensure_aligned(g, &format!("{semantic}[{i}]"))?;
    }
    let values = (0..first.values.len())
        .into_par_iter()
        .map(|i| {
            let mut n = 0usize;
            let mut acc = match reducer {
                Reducer::Mean => 0.0f64,
                Reducer::Max => f64::NEG_INFINITY,
            };
            for g in grids {
                let v = g.values[i];
                if g.is_valid(v) {
                    n += 1;
                    match reducer {
                        Reducer::Mean => acc += v as f64,
                        Reducer::Max => acc = acc.max(v as f64),
                    }
                }
            }
            match (n, reducer) {
                (0, _) => NODATA,
                (_, Reducer::Mean) => (acc / n as f64) as f32,
                (_, Reducer::Max) => acc as f32,
            }
        })
        .collect();
    first.with_values(values, NODATA, semantic)
}

/// Pixel offsets whose centres lie within `radius_m` of the centre pixel.
pub fn disc_offsets(radius_m: f64, pixel_size: f64) -> Vec<(isize, isize)> {
    let r = radius_m / pixel_size;
    let ri = r.floor() as isize;
    let r2 = r * r + 1e-9;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Circular moving-window mean. Nodata and out-of-grid neighbours are left
/// out of the mean; a window with no valid value yields nodata.
pub fn focal_mean(grid: &RasterGrid, radius_m: f64) -> Result<RasterGrid> {
    let g = &grid.grid;
    if !(radius_m >= g.pixel_size) {
        return Err(Error::invalid(format!(
            "focal radius {radius_m} m is smaller than the {} m pixel",
            g.pixel_size
        )));
    }
    let offsets = disc_offsets(radius_m, g.pixel_size);
    let (rows, cols) = (g.n_rows as isize, g.n_cols as isize);
    let mut values = vec![NODATA; g.len()];
    values.par_chunks_mut(g.n_cols).enumerate().for_each(|(r, out)| {
        let r = r as isize;
        for (c, slot) in out.iter_mut().enumerate() {
            let c = c as isize;
            let (mut sum, mut n) = (0.0f64, 0usize);
            for &(dy, dx) in &offsets {
                let (rr, cc) = (r + dy, c + dx);
                if rr < 0 || cc < 0 || rr >= rows || cc >= cols {
                    continue;
                }
                let v = grid.values[(rr * cols + cc) as usize];
                if grid.is_valid(v) {
                    sum += v as f64;
                    n += 1;
                }
            }
            if n > 0 {
                *slot = (sum / n as f64) as f32;
            }
        }
    });
    grid.with_values(values, NODATA, grid.semantic.clone())
}

/// Horn 3×3 gradients (dz/dx eastward, dz/dy northward) with edge
/// replication; None where any window cell is nodata.
fn horn_gradients(dem: &RasterGrid) -> Result<Vec<Option<(f64, f64)>>> {
    let g = &dem.grid;
    if g.n_rows < 3 || g.n_cols < 3 {
        return Err(Error::invalid("DEM must be at least 3x3"));
    }
    let (rows, cols) = (g.n_rows as isize, g.n_cols as isize);
    let ps = g.pixel_size;
    let mut out = vec![None; g.len()];
    out.par_chunks_mut(g.n_cols).enumerate().for_each(|(r, line)| {
        let r = r as isize;
        for (c, slot) in line.iter_mut().enumerate() {
            let c = c as isize;
            let mut w = [[0.0f64; 3]; 3];
            let mut ok = true;
            for (i, dy) in (-1..=1).enumerate() {
                for (j, dx) in (-1..=1).enumerate() {
                    let rr = (r + dy).clamp(0, rows - 1);
                    let cc = (c + dx).clamp(0, cols - 1);
                    let v = dem.values[(rr * cols + cc) as usize];
                    if !dem.is_valid(v) {
                        ok = false;
                    }
                    w[i][j] = v as f64;
                }
            }
            if !ok {
                continue;
            }
            let dzdx = ((w[0][2] + 2.0 * w[1][2] + w[2][2]) - (w[0][0] + 2.0 * w[1][0] + w[2][0])) / (8.0 * ps);
            // rows run south, so north-facing difference is top minus bottom
            let dzdy = ((w[0][0] + 2.0 * w[0][1] + w[0][2]) - (w[2][0] + 2.0 * w[2][1] + w[2][2])) / (8.0 * ps);
            *slot = Some((dzdx, dzdy));
        }
    });
    Ok(out)
}

/// Slope in degrees from Horn's 3×3 gradient.
pub fn slope_from_dem(dem: &RasterGrid) -> Result<RasterGrid> {
    let values = horn_gradients(dem)?
        .into_iter()
        .map(|g| g.map_or(NODATA, |(gx, gy)| gx.hypot(gy).atan().to_degrees() as f32))
        .collect();
    dem.with_values(values, NODATA, "SLOPE")
}

/// Downslope direction in degrees clockwise from north; flat cells get −1.
pub fn aspect_from_dem(dem: &RasterGrid) -> Result<RasterGrid> {
    let values = horn_gradients(dem)?
        .into_iter()
        .map(|g| match g {
            None => NODATA,
            Some((gx, gy)) if gx == 0.0 && gy == 0.0 => -1.0,
            Some((gx, gy)) => {
                // downslope vector is (−gx, −gy) in (east, north)
                let a = (-gx).atan2(-gy).to_degrees();
                (if a < 0.0 { a + 360.0 } else { a }) as f32
            }
        })
        .collect();
    dem.with_values(values, NODATA, "ASPECT")
}

/// Latitude and longitude of every pixel centre.
pub fn coordinate_grids(spec: &GridSpec) -> Result<(RasterGrid, RasterGrid)> {
    spec.validate()?;
    let crs = spec.crs()?;
    let pairs: Vec<(f64, f64)> = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = spec.cell_center(i / spec.n_cols, i % spec.n_cols);
            crs.inverse(x, y)
        })
        .collect();
    let lat = pairs.iter().map(|p| p.0 as f32).collect();
    let lon = pairs.iter().map(|p| p.1 as f32).collect();
    Ok((
        RasterGrid::new(spec.clone(), NODATA, lat, "LAT")?,
        RasterGrid::new(spec.clone(), NODATA, lon, "LON")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(rows: usize, cols: usize, ps: f64) -> GridSpec {
        GridSpec {
            origin_x: 500_000.0,
            origin_y: 4_800_000.0,
            pixel_size: ps,
            n_rows: rows,
            n_cols: cols,
            crs_id: "EPSG:32651".into(),
        }
    }

    fn grid(rows: usize, cols: usize, ps: f64, mut f: impl FnMut(usize, usize) -> f32) -> RasterGrid {
        let values = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        RasterGrid::new(spec(rows, cols, ps), NODATA, values, "t").unwrap()
    }

    #[test]
    fn gamma0_values() {
        assert_eq!(dn_to_gamma0(1.0), Some(-83.0));
        assert!((dn_to_gamma0(10_000.0).unwrap() + 3.0).abs() < 1e-12);
        assert_eq!(dn_to_gamma0(0.0), None);
        assert_eq!(dn_to_gamma0(-5.0), None);
    }

    #[test]
    fn gamma0_grid_marks_voids() {
        let dn = grid(1, 3, 25.0, |_, c| [0.0, 1.0, 10_000.0][c]);
        let g = dn_grid_to_gamma0(&dn, "P2_HV").unwrap();
        assert_eq!(g.value(0, 0), None);
        assert_eq!(g.value(0, 1), Some(-83.0));
        assert!((g.value(0, 2).unwrap() + 3.0).abs() < 1e-5);
    }

    #[test]
    fn ratio_and_ndvi_values() {
        let vv = grid(1, 1, 25.0, |_, _| -10.0);
        let vh = grid(1, 1, 25.0, |_, _| -16.0);
        assert_eq!(band_ratio_db(&vv, &vh, "r").unwrap().get(0, 0), 6.0);
        assert!((ndvi_value(0.5, 0.1).unwrap() - 0.4 / 0.6).abs() < 1e-12);
        assert_eq!(ndvi_value(0.3, 0.3), Some(0.0));
        assert_eq!(ndvi_value(0.0, 0.0), None);
    }

    #[test]
    fn ratio_matches_linear_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = grid(20, 20, 25.0, |_, _| rng.random_range(-30.0..5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = grid(20, 20, 25.0, |_, _| rng.random_range(-30.0..5.0));
        let r = band_ratio_db(&a, &b, "r").unwrap();
        for i in 0..400 {
            let la = 10f64.powf(a.values[i] as f64 / 10.0);
            let lb = 10f64.powf(b.values[i] as f64 / 10.0);
            assert!((r.values[i] as f64 - 10.0 * (la / lb).log10()).abs() < 1e-5);
        }
        assert!(band_ratio_db(&a, &a, "r").unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn misaligned_ratio_rejected() {
        let a = grid(2, 2, 25.0, |_, _| 1.0);
        let mut b = grid(2, 2, 25.0, |_, _| 1.0);
        b.grid.origin_x += 12.5;
        let err = band_ratio_db(&a, &b, "S1_VVVH_ratio").unwrap_err();
        assert_eq!(err.to_string(), "misaligned: S1_VVVH_ratio");
    }

    #[test]
    fn temporal_reducers() {
        let a = grid(2, 2, 25.0, |_, _| 2.0);
        let b = grid(2, 2, 25.0, |r, _| if r == 0 { 4.0 } else { NODATA });
        let m = temporal_reduce(&[a.clone(), b.clone()], Reducer::Mean, "m").unwrap();
        assert_eq!(m.values, vec![3.0, 3.0, 2.0, 2.0]);
        let x = temporal_reduce(&[a.clone(), b], Reducer::Max, "m").unwrap();
        assert_eq!(x.values, vec![4.0, 4.0, 2.0, 2.0]);
        assert_eq!(temporal_reduce(&[a.clone()], Reducer::Max, "m").unwrap().values, a.values);
        assert!(temporal_reduce(&[], Reducer::Mean, "m").is_err());
    }

    #[test]
    fn max_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grids: Vec<RasterGrid> = (0..12)
            .map(|_| grid(16, 16, 25.0, |_, _| if rng.random_bool(0.1) { NODATA } else { rng.random_range(-1.0..1.0) }))
            .collect();
        let out = temporal_reduce(&grids, Reducer::Max, "m").unwrap();
        for i in 0..256 {
            let best = grids
                .iter()
                .map(|g| g.values[i])
                .filter(|&v| v != NODATA)
                .fold(None, |acc: Option<f32>, v| Some(acc.map_or(v, |a| a.max(v))));
            assert_eq!(out.values[i], best.unwrap_or(NODATA));
        }
    }

    #[test]
    fn disc_has_thirteen_cells() {
        assert_eq!(disc_offsets(50.0, 25.0).len(), 13);
        assert_eq!(disc_offsets(25.0, 25.0).len(), 5);
    }

    #[test]
    fn impulse_response_sums_to_one() {
        // interior impulse on a zero background: every window that sees it
        // has 13 valid cells, and 13 windows see it
        let g = grid(11, 11, 25.0, |r, c| if (r, c) == (5, 5) { 1.0 } else { 0.0 });
        let f = focal_mean(&g, 50.0).unwrap();
        let total: f64 = f.values.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn focal_constant_and_isolated() {
        let g = grid(7, 9, 25.0, |_, _| 4.5);
        assert!(focal_mean(&g, 50.0).unwrap().values.iter().all(|&v| v == 4.5));
        let lone = grid(5, 5, 25.0, |r, c| if (r, c) == (2, 2) { 7.0 } else { NODATA });
        let f = focal_mean(&lone, 50.0).unwrap();
        assert_eq!(f.get(2, 2), 7.0);
        assert_eq!(f.get(0, 0), NODATA);
        assert!(focal_mean(&g, 10.0).is_err());
    }

    #[test]
    fn focal_preserves_mean_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, pad) = (40, 4);
        let inner: Vec<f32> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
        let g = grid(n + 2 * pad, n + 2 * pad, 25.0, |r, c| {
            if r < pad || c < pad || r >= n + pad || c >= n + pad {
                0.0
            } else {
                inner[(r - pad) * n + (c - pad)]
            }
        });
        let f = focal_mean(&g, 50.0).unwrap();
        let before: f64 = g.values.iter().map(|&v| v as f64).sum();
        let after: f64 = f.values.iter().map(|&v| v as f64).sum();
        assert!((before - after).abs() / before < 1e-6);
    }

    #[test]
    fn slope_of_planes() {
        let flat = grid(5, 5, 25.0, |_, _| 100.0);
        assert!(slope_from_dem(&flat).unwrap().values.iter().all(|&v| v == 0.0));
        let ramp = grid(6, 6, 1.0, |_, c| c as f32);
        let s = slope_from_dem(&ramp).unwrap();
        assert!((s.get(2, 2) - 45.0).abs() < 1e-4);
        let k = 15f64.to_radians().tan();
        let p = grid(6, 6, 10.0, |r, _| (r as f64 * 10.0 * k) as f32);
        assert!((slope_from_dem(&p).unwrap().get(3, 3) as f64 - 15.0).abs() < 0.01);
        assert!(slope_from_dem(&grid(2, 5, 1.0, |_, _| 0.0)).is_err());
    }

    #[test]
    fn slope_nodata_window() {
        let d = grid(5, 5, 1.0, |r, c| if (r, c) == (2, 2) { NODATA } else { 0.0 });
        let s = slope_from_dem(&d).unwrap();
        assert_eq!(s.get(1, 1), NODATA);
        assert_eq!(s.get(4, 4), 0.0);
    }

    #[test]
    fn slope_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f32> = (0..9 * 9).map(|_| rng.random_range(0.0..50.0)).collect();
        let d = grid(9, 9, 25.0, |r, c| vals[r * 9 + c]);
        let dt = grid(9, 9, 25.0, |r, c| vals[c * 9 + r]);
        let (s, st) = (slope_from_dem(&d).unwrap(), slope_from_dem(&dt).unwrap());
        for r in 0..9 {
            for c in 0..9 {
                assert!((s.get(r, c) - st.get(c, r)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn aspect_directions() {
        // rises eastward → faces west
        let east = grid(5, 5, 1.0, |_, c| c as f32);
        assert!((aspect_from_dem(&east).unwrap().get(2, 2) - 270.0).abs() < 1e-4);
        // rises southward (rows) → faces north
        let south = grid(5, 5, 1.0, |r, _| r as f32);
        assert!(aspect_from_dem(&south).unwrap().get(2, 2).abs() < 1e-4);
        assert_eq!(aspect_from_dem(&grid(3, 3, 1.0, |_, _| 1.0)).unwrap().get(1, 1), -1.0);
    }

    #[test]
    fn coordinates_follow_geotransform() {
        let s = spec(4, 5, 25.0);
        let (lat, lon) = coordinate_grids(&s).unwrap();
        let crs = s.crs().unwrap();
        for &(r, c) in &[(0, 0), (3, 4), (0, 4), (3, 0)] {
            let (x, y) = (s.origin_x + (c as f64 + 0.5) * 25.0, s.origin_y - (r as f64 + 0.5) * 25.0);
            let (la, lo) = crs.inverse(x, y);
            assert_eq!(lat.get(r, c), la as f32);
            assert_eq!(lon.get(r, c), lo as f32);
        }
        for r in 0..4 {
            for c in 1..5 {
                assert!(lon.get(r, c) > lon.get(r, c - 1));
            }
        }
        for c in 0..5 {
            for r in 1..4 {
                assert!(lat.get(r, c) < lat.get(r - 1, c));
            }
        }
        let mut bad = s.clone();
        bad.crs_id = "EPSG:1234".into();
        assert!(coordinate_grids(&bad).is_err());
    }

    #[test]
    fn geographic_single_pixel() {
        let s = GridSpec {
            origin_x: 120.0,
            origin_y: 46.0,
            pixel_size: 0.5,
            n_rows: 1,
            n_cols: 1,
            crs_id: "EPSG:4326".into(),
        };
        let (lat, lon) = coordinate_grids(&s).unwrap();
        assert_eq!((lat.get(0, 0), lon.get(0, 0)), (45.75, 120.25));
    }
}
