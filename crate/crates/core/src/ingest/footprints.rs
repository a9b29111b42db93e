use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::RowReject;
use crate::error::{Error, Result};
use crate::Rejected;

/// One lidar shot with its screening flags and relative-height metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintRecord {
    pub shot_id: String,
    pub lat: f64,
    pub lon: f64,
    pub beam_id: String,
    pub power_beam: bool,
    pub quality_flag: u8,
    pub degrade_flag: bool,
    pub sensitivity: f64,
    pub night_acquisition: bool,
    /// (percentile, height in metres), sorted by percentile.
    pub rh: Vec<(u8, f64)>,
    pub acquisition_time: Option<DateTime<Utc>>,
    /// Unmapped numeric columns carried through unchanged (e.g. `gamma_hv`).
    pub extras: BTreeMap<String, f64>,
}

impl FootprintRecord {
    pub fn rh_at(&self, percentile: u8) -> Option<f64> {
        self.rh
            .binary_search_by_key(&percentile, |&(p, _)| p)
            .ok()
            .map(|i| self.rh[i].1)
    }

    /// Every invariant violation, empty when the record is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.sensitivity) {
            out.push("sensitivity out of range".to_string());
        }
        if self.quality_flag > 1 {
            out.push("quality_flag out of range".to_string());
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            out.push("lat out of range".to_string());
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            out.push("lon out of range".to_string());
        }
        if self.rh.is_empty() {
            out.push("no rh metrics".to_string());
        }
        if self.rh.iter().any(|&(p, h)| p > 100 || !h.is_finite()) {
            out.push("invalid rh value".to_string());
        }
        if self.rh.windows(2).any(|w| w[1].1 < w[0].1) {
            out.push("rh not monotonic".to_string());
        }
        out
    }
}

/// Maps record fields to column names in the input table.
///
/// Columns named `<rh_prefix><int>` (e.g. `rh98`) are read as RH metrics.
/// Night is taken from `night` when present, otherwise derived from
/// `solar_elevation < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub shot_id: String,
    pub lat: String,
    pub lon: String,
    pub beam_id: String,
    pub power_beam: String,
    pub quality_flag: String,
    pub degrade_flag: String,
    pub sensitivity: String,
    pub night: String,
    pub solar_elevation: String,
    pub acquisition_time: String,
    pub rh_prefix: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            shot_id: "shot_id".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            beam_id: "beam".into(),
            power_beam: "power_beam".into(),
            quality_flag: "quality_flag".into(),
            degrade_flag: "degrade_flag".into(),
            sensitivity: "sensitivity".into(),
            night: "night".into(),
            solar_elevation: "solar_elevation".into(),
            acquisition_time: "acquisition_time".into(),
            rh_prefix: "rh".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FootprintLoad {
    pub records: Vec<FootprintRecord>,
    pub rejects: Vec<RowReject>,
}

enum NightSource {
    Flag(usize),
    SolarElevation(usize),
}

struct Columns {
    shot_id: usize,
    lat: usize,
    lon: usize,
    beam_id: usize,
    power_beam: usize,
    quality_flag: usize,
    degrade_flag: usize,
    sensitivity: usize,
    night: NightSource,
    acquisition_time: Option<usize>,
    rh: Vec<(u8, usize)>,
    extras: Vec<(String, usize)>,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord, map: &ColumnMap) -> Result<Columns> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let need = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
        let night = match find(&map.night) {
            Some(i) => NightSource::Flag(i),
            None => match find(&map.solar_elevation) {
                Some(i) => NightSource::SolarElevation(i),
                None => return Err(Error::MissingColumn(map.night.clone())),
            },
        };
        let mapped: HashSet<&str> = [
            &map.shot_id,
            &map.lat,
            &map.lon,
            &map.beam_id,
            &map.power_beam,
            &map.quality_flag,
            &map.degrade_flag,
            &map.sensitivity,
            &map.night,
            &map.solar_elevation,
            &map.acquisition_time,
        ]
        .into_iter()
        .map(String::as_str)
        .collect();
        let mut rh = Vec::new();
        let mut extras = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            let h = h.trim();
            if mapped.contains(h) {
                continue;
            }
            match h
                .strip_prefix(map.rh_prefix.as_str())
                .and_then(|p| p.parse::<u8>().ok())
            {
                Some(p) if p <= 100 => rh.push((p, i)),
                _ => extras.push((h.to_string(), i)),
            }
        }
        if rh.is_empty() {
            return Err(Error::MissingColumn(format!("{}<percentile>", map.rh_prefix)));
        }
        rh.sort_unstable();
        Ok(Columns {
            shot_id: need(&map.shot_id)?,
            lat: need(&map.lat)?,
            lon: need(&map.lon)?,
            beam_id: need(&map.beam_id)?,
            power_beam: need(&map.power_beam)?,
            quality_flag: need(&map.quality_flag)?,
            degrade_flag: need(&map.degrade_flag)?,
            sensitivity: need(&map.sensitivity)?,
            night,
            acquisition_time: find(&map.acquisition_time),
            rh,
            extras,
        })
    }
}

fn field<'a>(row: &'a csv::StringRecord, idx: usize, name: &str) -> std::result::Result<&'a str, String> {
    row.get(idx)
        .map(str::trim)
        .ok_or_else(|| format!("missing field {name}"))
}

fn parse_f64(row: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<f64, String> {
    let s = field(row, idx, name)?;
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("non-numeric {name}"))
}

fn parse_bool(row: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<bool, String> {
    match field(row, idx, name)?.to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Ok(true),
        "0" | "false" | "f" | "no" => Ok(false),
        _ => Err(format!("non-boolean {name}")),
    }
}

fn parse_row(row: &csv::StringRecord, cols: &Columns, map: &ColumnMap) -> std::result::Result<FootprintRecord, String> {
    let quality = parse_f64(row, cols.quality_flag, &map.quality_flag)?;
    if quality.fract() != 0.0 || !(0.0..=255.0).contains(&quality) {
        return Err("quality_flag out of range".into());
    }
    let night_acquisition = match cols.night {
        NightSource::Flag(i) => parse_bool(row, i, &map.night)?,
        NightSource::SolarElevation(i) => parse_f64(row, i, &map.solar_elevation)? < 0.0,
    };
    let acquisition_time = match cols.acquisition_time {
        Some(i) => {
            let s = field(row, i, &map.acquisition_time)?;
            if s.is_empty() {
                None
            } else {
                Some(
                    DateTime::parse_from_rfc3339(s)
                        .map_err(|_| "invalid acquisition_time".to_string())?
                        .with_timezone(&Utc),
                )
            }
        }
        None => None,
    };
    let mut rh = Vec::with_capacity(cols.rh.len());
    for &(p, i) in &cols.rh {
        let s = field(row, i, "rh")?;
        if s.is_empty() {
            continue;
        }
        let h = s
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("non-numeric {}{p}", map.rh_prefix))?;
        rh.push((p, h));
    }
    let mut extras = BTreeMap::new();
    for (name, i) in &cols.extras {
        if let Some(v) = row.get(*i).and_then(|s| s.trim().parse::<f64>().ok()) {
            if v.is_finite() {
                extras.insert(name.clone(), v);
            }
        }
    }
    Ok(FootprintRecord {
        shot_id: field(row, cols.shot_id, &map.shot_id)?.to_string(),
        lat: parse_f64(row, cols.lat, &map.lat)?,
        lon: parse_f64(row, cols.lon, &map.lon)?,
        beam_id: field(row, cols.beam_id, &map.beam_id)?.to_string(),
        power_beam: parse_bool(row, cols.power_beam, &map.power_beam)?,
        quality_flag: quality as u8,
        degrade_flag: parse_bool(row, cols.degrade_flag, &map.degrade_flag)?,
        sensitivity: parse_f64(row, cols.sensitivity, &map.sensitivity)?,
        night_acquisition,
        rh,
        acquisition_time,
        extras,
    })
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("tsv") || e.eq_ignore_ascii_case("tab") => b'\t',
        _ => b',',
    }
}

/// Load a footprint table. Malformed or invariant-violating rows are
/// rejected individually; only file-level problems are errors.
pub fn load_footprints(path: impl AsRef<Path>, column_map: &ColumnMap) -> Result<FootprintLoad> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_footprints(file, delimiter_for(path), column_map)
}

pub fn read_footprints<R: Read>(reader: R, delimiter: u8, column_map: &ColumnMap) -> Result<FootprintLoad> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = Columns::resolve(&headers, column_map)?;
    let mut out = FootprintLoad::default();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(RowReject {
                    line,
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        if row.len() != headers.len() {
            out.rejects.push(RowReject {
                line,
                reason: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
            continue;
        }
        match parse_row(&row, &cols, column_map) {
            Ok(rec) => {
                let mut reasons = rec.violations();
                if !seen.insert(rec.shot_id.clone()) {
                    reasons.push("duplicate shot_id".into());
                }
                if reasons.is_empty() {
                    out.records.push(rec);
                } else {
                    out.rejects.push(RowReject {
                        line,
                        reason: reasons.join("; "),
                    });
                }
            }
            Err(reason) => out.rejects.push(RowReject { line, reason }),
        }
    }
    Ok(out)
}

fn header_for(records: &[&FootprintRecord]) -> (Vec<u8>, Vec<String>) {
    let percentiles: BTreeSet<u8> = records.iter().flat_map(|r| r.rh.iter().map(|&(p, _)| p)).collect();
    let extras: BTreeSet<String> = records.iter().flat_map(|r| r.extras.keys().cloned()).collect();
    (percentiles.into_iter().collect(), extras.into_iter().collect())
}

fn record_fields(r: &FootprintRecord, percentiles: &[u8], extras: &[String]) -> Vec<String> {
    let b = |v: bool| if v { "1" } else { "0" }.to_string();
    let mut f = vec![
        r.shot_id.clone(),
        r.lat.to_string(),
        r.lon.to_string(),
        r.beam_id.clone(),
        b(r.power_beam),
        r.quality_flag.to_string(),
        b(r.degrade_flag),
        r.sensitivity.to_string(),
        b(r.night_acquisition),
        r.acquisition_time
            .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true))
            .unwrap_or_default(),
    ];
    f.extend(percentiles.iter().map(|&p| r.rh_at(p).map(|h| h.to_string()).unwrap_or_default()));
    f.extend(extras.iter().map(|k| r.extras.get(k).map(|v| v.to_string()).unwrap_or_default()));
    f
}

fn write_table<W: Write>(
    writer: W,
    records: &[&FootprintRecord],
    reasons: Option<&[&[String]]>,
) -> Result<()> {
    let map = ColumnMap::default();
    let (percentiles, extras) = header_for(records);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        map.shot_id,
        map.lat,
        map.lon,
        map.beam_id,
        map.power_beam,
        map.quality_flag,
        map.degrade_flag,
        map.sensitivity,
        map.night,
        map.acquisition_time,
    ];
    header.extend(percentiles.iter().map(|p| format!("{}{p}", map.rh_prefix)));
    header.extend(extras.iter().cloned());
    if reasons.is_some() {
        header.push("reasons".into());
    }
    w.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let mut f = record_fields(r, &percentiles, &extras);
        if let Some(reasons) = reasons {
            f.push(reasons[i].join(";"));
        }
        w.write_record(&f)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Write records in the default column layout; readable by [`load_footprints`]
/// with [`ColumnMap::default`].
pub fn write_footprints(path: impl AsRef<Path>, records: &[FootprintRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let refs: Vec<&FootprintRecord> = records.iter().collect();
    write_table(file, &refs, None)
}

/// Write rejected records with a trailing `reasons` column (`;`-separated).
pub fn write_rejected_footprints(path: impl AsRef<Path>, rejected: &[Rejected<FootprintRecord>]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let refs: Vec<&FootprintRecord> = rejected.iter().map(|r| &r.record).collect();
    let reasons: Vec<&[String]> = rejected.iter().map(|r| r.reasons.as_slice()).collect();
    write_table(file, &refs, Some(&reasons))
}
