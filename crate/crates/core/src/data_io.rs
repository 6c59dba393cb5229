//! Wide CSV tables (`timestamp,power_<id>...,forecast_<id>...`), manifests, the
//! synthetic wind-like generator and the vertical partition into per-farm slices.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{sample, GmmParams};
use crate::rng::derive_indexed;
use crate::topology::CASE_STUDY_COORDINATES;

pub const WIND_LIKE: &str = "wind-like";
pub const MALFORMED_ROW_LIMIT: f64 = 0.01;

/// `N` rows of `M` power columns followed by `M` forecast columns.
#[derive(Clone, Debug, PartialEq)]
pub struct WideTable {
    pub timestamps: Vec<String>,
    pub farm_ids: Vec<String>,
    /// Per-farm capacity the values are currently expressed against; all ones once normalized.
    pub capacities: Vec<f64>,
    pub data: DMatrix<f64>,
}

impl WideTable {
    pub fn new(timestamps: Vec<String>, farm_ids: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        let m = farm_ids.len();
        if data.ncols() != 2 * m || data.nrows() != timestamps.len() {
            return Err(Error::Dimension(format!(
                "{} x {} data for {} timestamps and {m} farms",
                data.nrows(),
                data.ncols(),
                timestamps.len()
            )));
        }
        Ok(Self {
            timestamps,
            farm_ids,
            capacities: vec![1.0; m],
            data,
        })
    }

    pub fn farms(&self) -> usize {
        self.farm_ids.len()
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn power(&self, m: usize) -> Vec<f64> {
        self.data.column(m).iter().copied().collect()
    }

    pub fn forecast(&self, m: usize) -> Vec<f64> {
        self.data.column(self.farms() + m).iter().copied().collect()
    }

    /// Row `n`'s forecast vector.
    pub fn forecast_row(&self, n: usize) -> Vec<f64> {
        (0..self.farms())
            .map(|m| self.data[(n, self.farms() + m)])
            .collect()
    }

    /// Divides each farm's columns by its capacity; a second call changes nothing.
    pub fn normalize(&mut self) {
        let m = self.farms();
        for f in 0..m {
            let cap = self.capacities[f];
            if cap != 1.0 {
                for c in [f, m + f] {
                    self.data.column_mut(c).iter_mut().for_each(|v| *v /= cap);
                }
                self.capacities[f] = 1.0;
            }
        }
    }

    pub fn header(&self) -> Vec<String> {
        std::iter::once("timestamp".to_string())
            .chain(self.farm_ids.iter().map(|id| format!("power_{id}")))
            .chain(self.farm_ids.iter().map(|id| format!("forecast_{id}")))
            .collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for n in 0..self.rows() {
            let mut rec = vec![self.timestamps[n].clone()];
            rec.extend(self.data.row(n).iter().map(|v| v.to_string()));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    /// Per-farm capacities used for normalization; values are taken as already
    /// normalized when absent.
    pub capacities: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_missing: usize,
    pub dropped_malformed: usize,
    pub warnings: Vec<String>,
}

fn parse_header(header: &csv::StringRecord) -> Result<Vec<String>> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.first().map(|c| c.trim()) != Some("timestamp") || cols.len() % 2 != 1 {
        return Err(Error::Data(
            "header must be timestamp followed by equal numbers of power and forecast columns"
                .into(),
        ));
    }
    let m = (cols.len() - 1) / 2;
    let mut ids = Vec::with_capacity(m);
    for k in 0..m {
        let p = cols[1 + k].trim().strip_prefix("power_");
        let f = cols[1 + m + k].trim().strip_prefix("forecast_");
        match (p, f) {
            (Some(p), Some(f)) if p == f => ids.push(p.to_string()),
            _ => {
                return Err(Error::Data(format!(
                    "columns {} and {} do not name the same farm",
                    cols[1 + k],
                    cols[1 + m + k]
                )))
            }
        }
    }
    Ok(ids)
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Parses a wide CSV, drops rows with missing cells and normalizes by capacity.
pub fn read_csv(input: impl Read, schema: &CsvSchema) -> Result<(WideTable, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let ids = parse_header(reader.headers()?)?;
    let m = ids.len();
    let mut report = LoadReport::default();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                report.dropped_malformed += 1;
                continue;
            }
        };
        if record.len() != 2 * m + 1 {
            report.dropped_malformed += 1;
            continue;
        }
        if record.iter().skip(1).any(is_missing) {
            report.dropped_missing += 1;
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record
            .iter()
            .skip(1)
            .map(|c| c.trim().parse::<f64>())
            .collect();
        match parsed {
            Ok(row) if row.iter().all(|v| v.is_finite()) => {
                timestamps.push(record[0].trim().to_string());
                values.extend(row);
            }
            _ => report.dropped_malformed += 1,
        }
    }
    if report.rows_read > 0
        && report.dropped_malformed as f64 > MALFORMED_ROW_LIMIT * report.rows_read as f64
    {
        return Err(Error::Data(format!(
            "{} of {} rows are malformed (limit 1%)",
            report.dropped_malformed, report.rows_read
        )));
    }
    if report.dropped_missing > 0 {
        report.warnings.push(format!(
            "dropped {} rows with missing cells",
            report.dropped_missing
        ));
    }
    if report.dropped_malformed > 0 {
        report.warnings.push(format!(
            "dropped {} malformed rows",
            report.dropped_malformed
        ));
    }
    if !timestamps_monotone(&timestamps) {
        report.warnings.push("timestamps are not monotone".into());
    }
    let n = timestamps.len();
    let data = DMatrix::from_row_slice(n, 2 * m, &values);
    let mut table = WideTable::new(timestamps, ids, data)?;
    if let Some(caps) = &schema.capacities {
        if caps.len() != m || caps.iter().any(|c| c.is_nan() || *c <= 0.0) {
            return Err(Error::Data(format!("need {m} positive capacities")));
        }
        table.capacities = caps.clone();
        table.normalize();
    }
    Ok((table, report))
}

fn timestamps_monotone(ts: &[String]) -> bool {
    let numeric: Option<Vec<f64>> = ts.iter().map(|t| t.parse::<f64>().ok()).collect();
    match numeric {
        Some(v) => v.windows(2).all(|w| w[0] < w[1]),
        None => ts.windows(2).all(|w| w[0] < w[1]),
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(WideTable, LoadReport)> {
    read_csv(File::open(path)?, schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub farms: usize,
    pub rows: usize,
    pub farm_ids: Vec<String>,
    pub capacities: Vec<f64>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub provenance: String,
}

impl Manifest {
    pub fn for_table(
        table: &WideTable,
        seed: Option<u64>,
        preset: Option<String>,
        provenance: impl Into<String>,
    ) -> Self {
        Self {
            farms: table.farms(),
            rows: table.rows(),
            farm_ids: table.farm_ids.clone(),
            capacities: table.capacities.clone(),
            seed,
            preset,
            provenance: provenance.into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Farm layout for the synthetic preset: the case-study layout for nine farms, a
/// regular grid with 1.1 spacing otherwise.
pub fn farm_coordinates(farms: usize) -> Vec<[f64; 2]> {
    if farms == CASE_STUDY_COORDINATES.len() {
        return CASE_STUDY_COORDINATES.to_vec();
    }
    let side = (farms as f64).sqrt().ceil().max(1.0) as usize;
    (0..farms)
        .map(|k| [1.1 * (k % side) as f64, 1.1 * (k / side) as f64])
        .collect()
}

const REGIME_WEIGHTS: [f64; 3] = [0.35, 0.4, 0.25];
const REGIME_LEVELS: [f64; 3] = [0.2, 0.5, 0.8];
const POWER_SPREAD: [f64; 3] = [0.035, 0.09, 0.05];
const FORECAST_ERROR_SPREAD: [f64; 3] = [0.015, 0.05, 0.025];
const POWER_CORRELATION_LENGTH: f64 = 0.8;
const ERROR_CORRELATION_LENGTH: f64 = 0.3;

fn spatial_correlation(coords: &[[f64; 2]], length: f64) -> DMatrix<f64> {
    let m = coords.len();
    DMatrix::from_fn(m, m, |a, b| {
        let d =
            ((coords[a][0] - coords[b][0]).powi(2) + (coords[a][1] - coords[b][1]).powi(2)).sqrt();
        (-d / length).exp()
    })
}

/// Three-regime mixture over `(power, forecast)` of `farms` farms. Within a regime,
/// power has spatially correlated spread and the forecast equals power plus a
/// smaller, more locally correlated error.
pub fn wind_like_truth(farms: usize) -> Result<GmmParams> {
    if farms == 0 {
        return Err(Error::InvalidInput(
            "the preset needs at least one farm".into(),
        ));
    }
    let coords = farm_coordinates(farms);
    let rp = spatial_correlation(&coords, POWER_CORRELATION_LENGTH);
    let re = spatial_correlation(&coords, ERROR_CORRELATION_LENGTH);
    let m = farms;
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for j in 0..3 {
        let offsets: Vec<f64> = (0..m)
            .map(|f| 0.03 * ((f as f64 + 1.0) * 1.7 + j as f64).sin())
            .collect();
        let mut mean = DVector::zeros(2 * m);
        for f in 0..m {
            mean[f] = REGIME_LEVELS[j] + offsets[f];
            mean[m + f] = REGIME_LEVELS[j] + offsets[f];
        }
        let sp = &rp * POWER_SPREAD[j].powi(2);
        let se = &re * FORECAST_ERROR_SPREAD[j].powi(2);
        let mut cov = DMatrix::zeros(2 * m, 2 * m);
        cov.view_mut((0, 0), (m, m)).copy_from(&sp);
        cov.view_mut((0, m), (m, m)).copy_from(&sp);
        cov.view_mut((m, 0), (m, m)).copy_from(&sp);
        cov.view_mut((m, m), (m, m)).copy_from(&(&sp + &se));
        means.push(mean);
        covs.push(cov);
    }
    GmmParams::new(REGIME_WEIGHTS.to_vec(), means, covs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticSource {
    Preset(String),
    Truth(GmmParams),
}

/// Samples `rows` hourly rows. Preset rows outside `[0, 1]` are redrawn.
pub fn make_synthetic(
    farms: usize,
    rows: usize,
    source: &SyntheticSource,
    seed: u64,
) -> Result<(WideTable, GmmParams)> {
    let (truth, bounded) = match source {
        SyntheticSource::Preset(name) if name == WIND_LIKE => (wind_like_truth(farms)?, true),
        SyntheticSource::Preset(name) => {
            return Err(Error::UnknownStrategy {
                kind: "preset",
                name: name.clone(),
                known: WIND_LIKE.into(),
            })
        }
        SyntheticSource::Truth(p) => {
            if p.dim() != 2 * farms {
                return Err(Error::Dimension(format!(
                    "truth has dimension {}, expected {}",
                    p.dim(),
                    2 * farms
                )));
            }
            (p.clone(), false)
        }
    };
    let d = 2 * farms;
    let mut values: Vec<f64> = Vec::with_capacity(rows * d);
    let mut batch = 0u64;
    while values.len() < rows * d {
        let draws = sample(
            &truth,
            rows.max(16),
            derive_indexed(seed, "synthetic/batch", batch),
        );
        batch += 1;
        for r in 0..draws.nrows() {
            if values.len() == rows * d {
                break;
            }
            let row = draws.row(r);
            if !bounded || row.iter().all(|v| (0.0..=1.0).contains(v)) {
                values.extend(row.iter());
            }
        }
        if batch > 1000 {
            return Err(Error::Data("the preset rejected too many samples".into()));
        }
    }
    let data = DMatrix::from_row_slice(rows, d, &values);
    let table = WideTable::new(
        (0..rows).map(|n| n.to_string()).collect(),
        (1..=farms).map(|f| f.to_string()).collect(),
        data,
    )?;
    Ok((table, truth))
}

/// One farm's private columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerticalSlice {
    pub node: usize,
    pub power: Vec<f64>,
    pub forecast: Vec<f64>,
}

impl VerticalSlice {
    pub fn rows(&self) -> usize {
        self.power.len()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        vec![self.power.clone(), self.forecast.clone()]
    }
}

pub fn partition_vertical(table: &WideTable) -> Vec<VerticalSlice> {
    (0..table.farms())
        .map(|m| VerticalSlice {
            node: m,
            power: table.power(m),
            forecast: table.forecast(m),
        })
        .collect()
}

/// Inverse of [`partition_vertical`] on the data columns.
pub fn reassemble(slices: &[VerticalSlice]) -> Result<DMatrix<f64>> {
    let m = slices.len();
    let n = slices.first().map_or(0, VerticalSlice::rows);
    if slices
        .iter()
        .any(|s| s.power.len() != n || s.forecast.len() != n)
    {
        return Err(Error::Dimension("slices have different row counts".into()));
    }
    Ok(DMatrix::from_fn(n, 2 * m, |r, c| {
        if c < m {
            slices[c].power[r]
        } else {
            slices[c - m].forecast[r]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn two_row_file() {
        let text = "timestamp,power_a,power_b,forecast_a,forecast_b\n0,0.1,0.2,0.15,0.25\n1,0.3,0.4,0.35,0.45\n";
        let (t, r) = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.farm_ids, vec!["a", "b"]);
        assert_eq!(t.forecast(1), vec![0.25, 0.45]);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn missing_cell_drops_row() {
        let mut text = String::from("timestamp,power_1,forecast_1\n");
        for n in 0..200 {
            text.push_str(&format!("{n},0.5,{}\n", if n == 7 { "" } else { "0.4" }));
        }
        let (t, r) = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(t.rows(), 199);
        assert_eq!(r.dropped_missing, 1);
        assert!(r.warnings[0].contains("missing"));
    }

    #[test]
    fn too_many_malformed_rows_is_an_error() {
        let mut text = String::from("timestamp,power_1,forecast_1\n");
        for n in 0..50 {
            text.push_str(&format!("{n},0.5,{}\n", if n < 2 { "abc" } else { "0.4" }));
        }
        assert!(matches!(
            read_csv(text.as_bytes(), &CsvSchema::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn non_monotone_timestamps_warn() {
        let text = "timestamp,power_1,forecast_1\n1,0.1,0.1\n0,0.2,0.2\n";
        let (_, r) = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("monotone")));
    }

    #[test]
    fn mismatched_header_is_rejected() {
        let text = "timestamp,power_1,forecast_2\n0,0.1,0.1\n";
        assert!(read_csv(text.as_bytes(), &CsvSchema::default()).is_err());
    }

    #[test]
    fn capacity_normalization_is_idempotent() {
        let text = "timestamp,power_1,forecast_1\n0,50,40\n";
        let schema = CsvSchema {
            capacities: Some(vec![100.0]),
        };
        let (mut t, _) = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(t.power(0), vec![0.5]);
        let before = t.clone();
        t.normalize();
        assert_eq!(t, before);
    }

    #[test]
    fn synthetic_round_trip_is_bit_identical() {
        let (t, _) = make_synthetic(3, 40, &SyntheticSource::Preset(WIND_LIKE.into()), 5).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let (back, _) = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = make_synthetic(2, 12, &SyntheticSource::Preset(WIND_LIKE.into()), 9).unwrap();
        let csv = dir.path().join("data.csv");
        t.save_csv(&csv).unwrap();
        assert_eq!(load_csv(&csv, &CsvSchema::default()).unwrap().0, t);
        let manifest = Manifest::for_table(&t, Some(9), Some(WIND_LIKE.into()), "synthetic");
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), manifest);
        assert!(load_csv(&dir.path().join("absent.csv"), &CsvSchema::default()).is_err());
    }

    #[test]
    fn empty_and_deterministic() {
        let src = SyntheticSource::Preset(WIND_LIKE.into());
        let (t, _) = make_synthetic(4, 0, &src, 1).unwrap();
        assert_eq!(t.rows(), 0);
        assert_eq!(
            make_synthetic(4, 30, &src, 2).unwrap(),
            make_synthetic(4, 30, &src, 2).unwrap()
        );
        assert!(make_synthetic(4, 3, &SyntheticSource::Preset("tidal".into()), 1).is_err());
    }

    #[test]
    fn preset_power_and_forecast_are_correlated() {
        let (t, truth) =
            make_synthetic(9, 480, &SyntheticSource::Preset(WIND_LIKE.into()), 1).unwrap();
        assert_eq!(truth.dim(), 18);
        assert!(t.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for m in 0..9 {
            let r = correlation(&t.power(m), &t.forecast(m));
            assert!(r >= 0.8, "farm {m}: {r}");
        }
    }

    #[test]
    fn partition_round_trip() {
        let (t, _) = make_synthetic(9, 480, &SyntheticSource::Preset(WIND_LIKE.into()), 3).unwrap();
        let slices = partition_vertical(&t);
        assert_eq!(slices.len(), 9);
        assert!(slices
            .iter()
            .all(|s| s.rows() == 480 && s.columns().len() == 2));
        assert_eq!(reassemble(&slices).unwrap(), t.data);
        let (one, _) = make_synthetic(1, 5, &SyntheticSource::Preset(WIND_LIKE.into()), 3).unwrap();
        let s = partition_vertical(&one);
        assert_eq!(s[0].power, one.power(0));
        assert_eq!(reassemble(&s).unwrap(), one.data);
    }

    #[test]
    fn truth_dimension_is_checked() {
        let p = wind_like_truth(2).unwrap();
        assert!(make_synthetic(3, 5, &SyntheticSource::Truth(p.clone()), 1).is_err());
        assert_eq!(
            make_synthetic(2, 5, &SyntheticSource::Truth(p), 1)
                .unwrap()
                .0
                .rows(),
            5
        );
    }
}
