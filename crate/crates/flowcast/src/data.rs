//! Dataset ingestion and case construction: CSV loading with capacity
//! normalization, lag-feature windows, chronological splits, and the four
//! case layouts (day-ahead NWP, very-short-term lags, temporal joint window,
//! spatial joint vector).
//!
//! Input CSV schema: `timestamp,power[,power_site2..power_site5][,ws10,wd10,ws100,wd100]`,
//! decimal floats, UTF-8, comma-separated, header row mandatory.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const NWP_COLUMNS: [&str; 4] = ["ws10", "wd10", "ws100", "wd100"];

/// Fraction above 1.0 (or below 0.0) tolerated and clamped after capacity
/// normalization; beyond it the row is an error.
pub const CLAMP_TOLERANCE: f64 = 0.05;

/// Expected column layout of an input file.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    /// Number of power columns (1 to 5).
    pub sites: usize,
    /// Whether the four NWP feature columns are present.
    pub nwp: bool,
    /// Nominal capacity; power columns are divided by it.
    pub capacity: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { sites: 1, nwp: false, capacity: 1.0 }
    }
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["timestamp".to_string(), "power".to_string()];
        for s in 2..=self.sites {
            cols.push(format!("power_site{s}"));
        }
        if self.nwp {
            cols.extend(NWP_COLUMNS.iter().map(|c| c.to_string()));
        }
        cols
    }

    fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.sites) {
            return Err(Error::Config(format!("sites must be 1..=5, got {}", self.sites)));
        }
        if !(self.capacity > 0.0) {
            return Err(Error::Config("capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Uniformly sampled series of per-unit power (one column per site) with
/// optional NWP feature columns.
#[derive(Debug, Clone)]
pub struct SeriesFrame {
    timestamps: Vec<f64>,
    power: Vec<Vec<f64>>,
    nwp: Vec<Vec<f64>>,
    capacity: f64,
    /// Rows discarded for missing fields.
    pub dropped_rows: usize,
    /// Power values clamped back into [0, 1].
    pub clamped_values: usize,
}

impl SeriesFrame {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn sites(&self) -> usize {
        self.power.len()
    }

    pub fn has_nwp(&self) -> bool {
        !self.nwp.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn power(&self, site: usize) -> &[f64] {
        &self.power[site]
    }

    /// Per-unit value back to the original power unit.
    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.capacity
    }

    /// Build directly from columns (synthetic data, tests). Power must
    /// already be per-unit in [0, 1].
    pub fn from_columns(
        timestamps: Vec<f64>,
        power: Vec<Vec<f64>>,
        nwp: Vec<Vec<f64>>,
    ) -> Result<SeriesFrame> {
        let n = timestamps.len();
        if power.is_empty() || power.iter().any(|c| c.len() != n) || nwp.iter().any(|c| c.len() != n)
        {
            return Err(Error::Shape("column lengths differ".into()));
        }
        check_uniform(&timestamps, 0)?;
        Ok(SeriesFrame {
            timestamps,
            power,
            nwp,
            capacity: 1.0,
            dropped_rows: 0,
            clamped_values: 0,
        })
    }
}

fn check_uniform(timestamps: &[f64], dropped: usize) -> Result<()> {
    if timestamps.len() < 2 {
        return Ok(());
    }
    let step = timestamps[1] - timestamps[0];
    if !(step > 0.0) {
        return Err(Error::Data("timestamps must be strictly increasing".into()));
    }
    let tol = 1e-6 * step.abs().max(1.0);
    for (i, w) in timestamps.windows(2).enumerate() {
        let d = w[1] - w[0];
        if !(d > 0.0) {
            return Err(Error::Data(format!("timestamps not increasing at row {}", i + 1)));
        }
        if (d - step).abs() > tol {
            let hint = if dropped > 0 {
                format!(" ({dropped} rows were dropped for missing fields)")
            } else {
                String::new()
            };
            return Err(Error::Data(format!(
                "nonuniform timestamp step at row {}: {d} vs {step}{hint}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Load and normalize a series CSV. Rows with any empty field are dropped
/// and counted; malformed values are an error naming the line; the remaining
/// timestamps must form a uniform grid.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesFrame> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;

    let expected = schema.header();
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header in {}: {e}", path.display())))?;
    let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if got != expected {
        return Err(Error::Data(format!(
            "header mismatch in {}: expected {expected:?}, got {got:?}",
            path.display()
        )));
    }

    let n_cols = expected.len();
    let mut timestamps = Vec::new();
    let mut power: Vec<Vec<f64>> = vec![Vec::new(); schema.sites];
    let mut nwp: Vec<Vec<f64>> = if schema.nwp { vec![Vec::new(); 4] } else { Vec::new() };
    let mut dropped = 0usize;
    let mut clamped = 0usize;

    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("malformed row: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != n_cols {
            return Err(Error::Data(format!(
                "row at line {line} has {} fields, expected {n_cols}",
                record.len()
            )));
        }
        if record.iter().any(|f| f.is_empty()) {
            dropped += 1;
            continue;
        }
        let mut parsed = Vec::with_capacity(n_cols);
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "malformed value '{field}' in column '{}' at line {line}",
                    expected[col]
                ))
            })?;
            parsed.push(v);
        }
        timestamps.push(parsed[0]);
        for s in 0..schema.sites {
            let raw = parsed[1 + s] / schema.capacity;
            let v = if (0.0..=1.0).contains(&raw) {
                raw
            } else if raw > 1.0 && raw <= 1.0 + CLAMP_TOLERANCE {
                clamped += 1;
                1.0
            } else if raw < 0.0 && raw >= -CLAMP_TOLERANCE {
                clamped += 1;
                0.0
            } else {
                return Err(Error::Data(format!(
                    "normalized power {raw} outside [-{CLAMP_TOLERANCE}, 1+{CLAMP_TOLERANCE}] at line {line}"
                )));
            };
            power[s].push(v);
        }
        if schema.nwp {
            for c in 0..4 {
                nwp[c].push(parsed[1 + schema.sites + c]);
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{} holds no usable rows", path.display())));
    }
    check_uniform(&timestamps, dropped)?;
    Ok(SeriesFrame {
        timestamps,
        power,
        nwp,
        capacity: schema.capacity,
        dropped_rows: dropped,
        clamped_values: clamped,
    })
}

/// The four case layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseId {
    /// Day-ahead: NWP features at the target time, scalar target.
    Case1,
    /// Very-short-term: lagged power features, scalar target H steps ahead.
    Case2,
    /// Temporal interdependence: lagged features, joint window of the next
    /// `horizon` values.
    Case3,
    /// Spatial interdependence: all sites' lags, joint across-site vector at
    /// t+1.
    Case4,
}

impl CaseId {
    pub fn from_index(i: usize) -> Result<CaseId> {
        match i {
            1 => Ok(CaseId::Case1),
            2 => Ok(CaseId::Case2),
            3 => Ok(CaseId::Case3),
            4 => Ok(CaseId::Case4),
            _ => Err(Error::Config(format!("unknown case {i}, expected 1..=4"))),
        }
    }

    pub fn index(&self) -> usize {
        match self {
            CaseId::Case1 => 1,
            CaseId::Case2 => 2,
            CaseId::Case3 => 3,
            CaseId::Case4 => 4,
        }
    }
}

/// Feature matrix, target matrix, and the target timestamp of every row.
/// Every feature timestamp is at or before the issue time; every target
/// strictly after it (Case 1 features are exogenous forecasts for the target
/// time itself).
#[derive(Debug, Clone)]
pub struct SupervisedSet {
    pub x: Matrix,
    pub y: Matrix,
    pub times: Vec<f64>,
    pub case: CaseId,
}

impl SupervisedSet {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Build the supervised layout for a case. `lag` is the feature window
/// length (6 in the case studies); `horizon` is the steps-ahead for Case 2
/// and Case 4 and the joint window length for Case 3; Case 1 ignores both.
pub fn make_case(frame: &SeriesFrame, case: CaseId, lag: usize, horizon: usize) -> Result<SupervisedSet> {
    match case {
        CaseId::Case1 => {
            if !frame.has_nwp() {
                return Err(Error::Data("case 1 needs NWP feature columns".into()));
            }
            let n = frame.len();
            let mut x = Vec::with_capacity(n * 4);
            for t in 0..n {
                for c in 0..4 {
                    x.push(frame.nwp[c][t]);
                }
            }
            Ok(SupervisedSet {
                x: Matrix::new(n, 4, x)?,
                y: Matrix::new(n, 1, frame.power[0].clone())?,
                times: frame.timestamps.clone(),
                case,
            })
        }
        CaseId::Case2 | CaseId::Case3 => {
            let (h_first, d) = match case {
                CaseId::Case2 => (horizon.max(1), 1),
                _ => (1, horizon.max(1)),
            };
            let span = lag + h_first + d - 1;
            let n = frame.len();
            if lag < 1 || n < span {
                return Err(Error::Data(format!(
                    "series of {n} rows is too short for lag {lag} plus horizon"
                )));
            }
            let rows = n - span + 1;
            let series = &frame.power[0];
            let mut x = Vec::with_capacity(rows * lag);
            let mut y = Vec::with_capacity(rows * d);
            let mut times = Vec::with_capacity(rows);
            for r in 0..rows {
                let t = r + lag - 1; // issue time index
                x.extend_from_slice(&series[t + 1 - lag..=t]);
                for k in 0..d {
                    y.push(series[t + h_first + k]);
                }
                times.push(frame.timestamps[t + h_first]);
            }
            Ok(SupervisedSet {
                x: Matrix::new(rows, lag, x)?,
                y: Matrix::new(rows, d, y)?,
                times,
                case,
            })
        }
        CaseId::Case4 => {
            let h = horizon.max(1);
            let sites = frame.sites();
            let n = frame.len();
            if sites < 2 {
                return Err(Error::Data("case 4 needs at least two sites".into()));
            }
            if lag < 1 || n < lag + h {
                return Err(Error::Data(format!(
                    "series of {n} rows is too short for lag {lag} plus horizon {h}"
                )));
            }
            let rows = n - lag - h + 1;
            let mut x = Vec::with_capacity(rows * lag * sites);
            let mut y = Vec::with_capacity(rows * sites);
            let mut times = Vec::with_capacity(rows);
            for r in 0..rows {
                let t = r + lag - 1;
                for s in 0..sites {
                    x.extend_from_slice(&frame.power[s][t + 1 - lag..=t]);
                }
                for s in 0..sites {
                    y.push(frame.power[s][t + h]);
                }
                times.push(frame.timestamps[t + h]);
            }
            Ok(SupervisedSet {
                x: Matrix::new(rows, lag * sites, x)?,
                y: Matrix::new(rows, sites, y)?,
                times,
                case,
            })
        }
    }
}

/// Contiguous chronological train/validation/test split, floor-then-remainder.
pub fn split(
    set: &SupervisedSet,
    ratios: (f64, f64, f64),
) -> Result<(SupervisedSet, SupervisedSet, SupervisedSet)> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
    }
    if ratios.0 <= 0.0 || ratios.1 <= 0.0 || ratios.2 <= 0.0 {
        return Err(Error::Config("all split ratios must be positive".into()));
    }
    let n = set.len();
    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_val = (ratios.1 * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!("split of {n} rows leaves an empty partition")));
    }
    let part = |lo: usize, hi: usize| SupervisedSet {
        x: set.x.slice_rows(lo, hi),
        y: set.y.slice_rows(lo, hi),
        times: set.times[lo..hi].to_vec(),
        case: set.case,
    };
    Ok((
        part(0, n_train),
        part(n_train, n_train + n_val),
        part(n_train + n_val, n),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> std::path::PathBuf {
        static COUNTER: std::sync::atomic::AtomicU32 = std::sync::atomic::AtomicU32::new(0);
        let id = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let path = std::env::temp_dir().join(format!("flowcast_data_test_{}_{id}.csv", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn well_formed_file_loads_every_row() {
        let path = write_csv("timestamp,power\n0,0.1\n1,0.2\n2,0.3\n");
        let frame = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(frame.len(), 3);
        assert_eq!(frame.dropped_rows, 0);
        assert_eq!(frame.power(0), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn empty_cell_drops_row_and_counts() {
        let path = write_csv("timestamp,power\n0,0.1\n1,0.2\n2,\n");
        let frame = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(frame.len(), 2);
        assert_eq!(frame.dropped_rows, 1);
    }

    #[test]
    fn overrange_power_clamps_within_tolerance_else_errors() {
        let path = write_csv("timestamp,power\n0,1.02\n1,0.5\n");
        let frame = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(frame.power(0)[0], 1.0);
        assert_eq!(frame.clamped_values, 1);
        let bad = write_csv("timestamp,power\n0,1.2\n1,0.5\n");
        let err = load_csv(&bad, &CsvSchema::default()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn malformed_value_names_the_line() {
        let path = write_csv("timestamp,power\n0,0.1\n1,abc\n");
        let err = load_csv(&path, &CsvSchema::default()).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("abc"), "{err}");
    }

    #[test]
    fn nonuniform_timestamps_rejected() {
        let path = write_csv("timestamp,power\n0,0.1\n1,0.2\n3,0.3\n");
        assert!(load_csv(&path, &CsvSchema::default()).is_err());
    }

    #[test]
    fn capacity_normalizes_and_roundtrips() {
        let path = write_csv("timestamp,power\n0,5\n1,10\n");
        let schema = CsvSchema { capacity: 20.0, ..CsvSchema::default() };
        let frame = load_csv(&path, &schema).unwrap();
        assert_eq!(frame.power(0), &[0.25, 0.5]);
        for v in [0.0, 0.25, 0.5, 1.0] {
            assert!((frame.denormalize(v) / 20.0 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        let path = write_csv("time,power\n0,0.1\n");
        assert!(load_csv(&path, &CsvSchema::default()).is_err());
    }

    fn ramp_frame(n: usize) -> SeriesFrame {
        let ts: Vec<f64> = (0..n).map(|t| t as f64).collect();
        let power: Vec<f64> = (0..n).map(|t| (t as f64) * 1e-3).collect();
        SeriesFrame::from_columns(ts, vec![power], Vec::new()).unwrap()
    }

    #[test]
    fn constant_series_fills_all_cells() {
        let n = 20;
        let ts: Vec<f64> = (0..n).map(|t| t as f64).collect();
        let frame = SeriesFrame::from_columns(ts, vec![vec![0.4; n]], Vec::new()).unwrap();
        let set = make_case(&frame, CaseId::Case2, 6, 1).unwrap();
        assert!(set.x.data().iter().all(|&v| v == 0.4));
        assert!(set.y.data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn case2_indices_verified_on_ramp() {
        // index-arithmetic oracle on the ramp 0, 0.001, 0.002, ...
        let frame = ramp_frame(30);
        let lag = 6;
        let set = make_case(&frame, CaseId::Case2, lag, 1).unwrap();
        assert_eq!(set.len(), 30 - lag);
        for r in 0..set.len() {
            let t = r + lag - 1;
            for (j, &xv) in set.x.row(r).iter().enumerate() {
                let expect = (t + 1 - lag + j) as f64 * 1e-3;
                assert!((xv - expect).abs() < 1e-15);
            }
            assert!((set.y.get(r, 0) - (t + 1) as f64 * 1e-3).abs() < 1e-15);
            assert_eq!(set.times[r], (t + 1) as f64);
        }
    }

    #[test]
    fn case3_row_count_and_shape() {
        let n = 100;
        let frame = ramp_frame(n);
        let (lag, h) = (6, 6);
        let set = make_case(&frame, CaseId::Case3, lag, h).unwrap();
        assert_eq!(set.len(), n - lag - h + 1);
        assert_eq!(set.y.cols(), 6);
        assert_eq!(set.x.cols(), 6);
        // first target immediately follows the issue time
        assert_eq!(set.times[0], lag as f64);
    }

    #[test]
    fn case4_concatenates_site_lags() {
        let n = 12;
        let ts: Vec<f64> = (0..n).map(|t| t as f64).collect();
        let s1: Vec<f64> = (0..n).map(|t| t as f64 * 1e-3).collect();
        let s2: Vec<f64> = (0..n).map(|t| 0.5 + t as f64 * 1e-3).collect();
        let frame = SeriesFrame::from_columns(ts, vec![s1, s2], Vec::new()).unwrap();
        let set = make_case(&frame, CaseId::Case4, 3, 1).unwrap();
        assert_eq!(set.x.cols(), 6);
        assert_eq!(set.y.cols(), 2);
        let row = set.x.row(0);
        assert!((row[0] - 0.0).abs() < 1e-15 && (row[3] - 0.5).abs() < 1e-15);
        assert_eq!(set.y.row(0), &[3.0 * 1e-3, 0.5 + 3.0 * 1e-3]);
    }

    #[test]
    fn case1_requires_nwp() {
        let frame = ramp_frame(10);
        assert!(make_case(&frame, CaseId::Case1, 6, 1).is_err());
        let ts: Vec<f64> = (0..5).map(|t| t as f64).collect();
        let nwp: Vec<Vec<f64>> = (0..4).map(|c| (0..5).map(|t| (c * 10 + t) as f64).collect()).collect();
        let with = SeriesFrame::from_columns(ts, vec![vec![0.1; 5]], nwp).unwrap();
        let set = make_case(&with, CaseId::Case1, 6, 1).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.x.row(2), &[2.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn too_short_series_rejected() {
        let frame = ramp_frame(8);
        assert!(make_case(&frame, CaseId::Case2, 6, 6).is_err());
    }

    #[test]
    fn split_is_chronological_and_exhaustive() {
        let frame = ramp_frame(1011);
        let set = make_case(&frame, CaseId::Case2, 6, 1).unwrap();
        // 1005 rows
        let (train, val, test) = split(&set, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(train.len(), 703);
        assert_eq!(val.len(), 100);
        assert_eq!(test.len(), 202);
        assert_eq!(train.len() + val.len() + test.len(), set.len());
        assert!(train.times.last().unwrap() < val.times.first().unwrap());
        assert!(val.times.last().unwrap() < test.times.first().unwrap());
    }

    #[test]
    fn split_exact_ratios_and_tiny_sets() {
        let frame = ramp_frame(1006);
        let set = make_case(&frame, CaseId::Case2, 6, 1).unwrap();
        assert_eq!(set.len(), 1000);
        let (train, val, test) = split(&set, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (700, 100, 200));

        let tiny = make_case(&ramp_frame(16), CaseId::Case2, 6, 1).unwrap();
        assert_eq!(tiny.len(), 10);
        let (tr, va, te) = split(&tiny, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn bad_ratios_rejected() {
        let set = make_case(&ramp_frame(30), CaseId::Case2, 6, 1).unwrap();
        assert!(split(&set, (0.7, 0.1, 0.1)).is_err());
    }

    #[test]
    fn causality_features_precede_targets() {
        let frame = ramp_frame(60);
        for (case, h) in [(CaseId::Case2, 1), (CaseId::Case2, 3), (CaseId::Case3, 6)] {
            let set = make_case(&frame, case, 6, h).unwrap();
            for r in 0..set.len() {
                // on the ramp, value*1000 recovers the time index
                let latest_feature = set.x.row(r).iter().cloned().fold(f64::MIN, f64::max) * 1000.0;
                let earliest_target = set.y.row(r).iter().cloned().fold(f64::MAX, f64::min) * 1000.0;
                assert!(latest_feature < earliest_target);
                assert!(set.times[r] > latest_feature);
            }
        }
    }
}
