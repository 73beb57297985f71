//! Trajectory ingestion: raw ACC logs to uniform-timestep car-following series.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classic_cf::CfState;
use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default centered moving-average window applied to ingested speeds.
pub const DEFAULT_SMOOTH_WINDOW: usize = 5;

/// Chronological train / validation / test fractions.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.60, 0.25, 0.15);

const MIN_SPLIT_LEN: usize = 20;

/// One row of a raw experiment log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub timestamp: f64,
    pub lead_lat: Option<f64>,
    pub lead_lon: Option<f64>,
    pub foll_lat: Option<f64>,
    pub foll_lon: Option<f64>,
    pub lead_speed: f64,
    pub foll_speed: f64,
    /// Precomputed bumper-to-bumper spacing, when the log carries one.
    pub spacing: Option<f64>,
}

impl RawSample {
    fn positions(&self) -> Option<(f64, f64, f64, f64)> {
        Some((self.lead_lat?, self.lead_lon?, self.foll_lat?, self.foll_lon?))
    }
}

/// Maps raw-log header names onto [`RawSample`] fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub timestamp: String,
    pub lead_speed: String,
    pub foll_speed: String,
    pub spacing: Option<String>,
    pub lead_lat: Option<String>,
    pub lead_lon: Option<String>,
    pub foll_lat: Option<String>,
    pub foll_lon: Option<String>,
    pub delimiter: u8,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            timestamp: "time".into(),
            lead_speed: "lead_speed".into(),
            foll_speed: "foll_speed".into(),
            spacing: Some("spacing".into()),
            lead_lat: None,
            lead_lon: None,
            foll_lat: None,
            foll_lon: None,
            delimiter: b',',
        }
    }
}

impl ColumnMap {
    /// Column mapping for logs carrying GPS fixes of both vehicles instead of a spacing column.
    pub fn with_positions(lead_lat: &str, lead_lon: &str, foll_lat: &str, foll_lon: &str) -> Self {
        Self {
            spacing: None,
            lead_lat: Some(lead_lat.into()),
            lead_lon: Some(lead_lon.into()),
            foll_lat: Some(foll_lat.into()),
            foll_lon: Some(foll_lon.into()),
            ..Self::default()
        }
    }
}

/// A uniform-timestep car-following trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    /// Follower speed.
    pub v: Vec<f64>,
    /// Lead speed.
    pub v_l: Vec<f64>,
    /// Spacing.
    pub s: Vec<f64>,
    /// Relative speed `v_l - v`.
    pub dv: Vec<f64>,
    /// Follower acceleration.
    pub a: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory, deriving `dv`, and checks every invariant.
    pub fn new(dt: f64, t0: f64, v: Vec<f64>, v_l: Vec<f64>, s: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let n = v.len();
        if n < 2 {
            return Err(Error::invalid("trajectory needs at least 2 samples"));
        }
        if v_l.len() != n || s.len() != n || a.len() != n {
            return Err(Error::invalid(format!(
                "series lengths differ: v={}, v_l={}, s={}, a={}",
                n,
                v_l.len(),
                s.len(),
                a.len()
            )));
        }
        if let Some(i) = s.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::invalid(format!("spacing must be positive, s[{i}] = {}", s[i])));
        }
        let all = v.iter().chain(&v_l).chain(&s).chain(&a);
        if all.clone().any(|x| !x.is_finite()) {
            return Err(Error::invalid("trajectory contains non-finite values"));
        }
        let dv = v_l.iter().zip(&v).map(|(l, f)| l - f).collect();
        Ok(Self { dt, t0, v, v_l, s, dv, a })
    }

    /// Builds a trajectory whose acceleration is the differentiated follower speed.
    pub fn from_speeds(dt: f64, t0: f64, v: Vec<f64>, v_l: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        let a = differentiate(&v, dt)?;
        Self::new(dt, t0, v, v_l, s, a)
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    pub fn state(&self, i: usize) -> CfState {
        CfState {
            s: self.s[i],
            v: self.v[i],
            v_l: self.v_l[i],
        }
    }

    pub fn states(&self) -> impl Iterator<Item = CfState> + '_ {
        (0..self.len()).map(|i| self.state(i))
    }

    /// Contiguous sub-trajectory; `t0` follows the first retained sample.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.len() < 2 {
            return Err(Error::invalid(format!(
                "slice {:?} invalid for trajectory of length {}",
                range,
                self.len()
            )));
        }
        Ok(Self {
            dt: self.dt,
            t0: self.time(range.start),
            v: self.v[range.clone()].to_vec(),
            v_l: self.v_l[range.clone()].to_vec(),
            s: self.s[range.clone()].to_vec(),
            dv: self.dv[range.clone()].to_vec(),
            a: self.a[range].to_vec(),
        })
    }

    /// Writes the canonical `t, v, v_l, s, dv, a` table.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,v,v_l,s,dv,a")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_sig(self.time(i), 9),
                fmt_sig(self.v[i], 9),
                fmt_sig(self.v_l[i], 9),
                fmt_sig(self.s[i], 9),
                fmt_sig(self.dv[i], 9),
                fmt_sig(self.a[i], 9),
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        buf.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a canonical trajectory table. `dt` is the mean timestep rounded to 9 significant digits.
    pub fn read_csv<R: Read>(input: R, origin: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let idx = [col("t")?, col("v")?, col("v_l")?, col("s")?, col("a")?];
        let mut cols: [Vec<f64>; 5] = Default::default();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec?;
            for (k, &j) in idx.iter().enumerate() {
                cols[k].push(parse_field(&rec, j, line, origin)?);
            }
        }
        let [t, v, v_l, s, a] = cols;
        if t.len() < 2 {
            return Err(Error::invalid("trajectory file needs at least 2 rows"));
        }
        let mean_step = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        let dt: f64 = fmt_sig(mean_step, 9).parse().expect("formatted float parses");
        Self::new(dt, t[0], v, v_l, s, a)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }
}

/// Chronological train / validation / test partition of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Trajectory,
    pub validation: Trajectory,
    pub test: Trajectory,
    pub fractions: (f64, f64, f64),
}

fn parse_field(rec: &csv::StringRecord, idx: usize, line: usize, path: &Path) -> Result<f64> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing field {}", idx + 1),
    })?;
    raw.parse::<f64>().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("field {} `{raw}`: {e}", idx + 1),
    })
}

/// Loads a delimiter-separated raw log using `schema` to locate the columns.
///
/// Samples come back in file order. Unmapped columns are ignored. Line numbers in
/// errors count the header as line 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<Vec<RawSample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_raw(std::io::BufReader::new(file), schema, path)
}

pub fn read_raw<R: Read>(input: R, schema: &ColumnMap, origin: &Path) -> Result<Vec<RawSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let optional = |name: &Option<String>| name.as_deref().map(find).transpose();

    let t_idx = find(&schema.timestamp)?;
    let ls_idx = find(&schema.lead_speed)?;
    let fs_idx = find(&schema.foll_speed)?;
    let sp_idx = optional(&schema.spacing)?;
    let pos_idx = [
        optional(&schema.lead_lat)?,
        optional(&schema.lead_lon)?,
        optional(&schema.foll_lat)?,
        optional(&schema.foll_lon)?,
    ];

    let mut out: Vec<RawSample> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let get = |j: usize| parse_field(&rec, j, line, origin);
        let get_opt = |j: Option<usize>| j.map(get).transpose();
        let sample = RawSample {
            timestamp: get(t_idx)?,
            lead_speed: get(ls_idx)?,
            foll_speed: get(fs_idx)?,
            spacing: get_opt(sp_idx)?,
            lead_lat: get_opt(pos_idx[0])?,
            lead_lon: get_opt(pos_idx[1])?,
            foll_lat: get_opt(pos_idx[2])?,
            foll_lon: get_opt(pos_idx[3])?,
        };
        validate_sample(&sample).map_err(|message| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        })?;
        if let Some(prev) = out.last() {
            if !(sample.timestamp > prev.timestamp) {
                return Err(Error::NonMonotoneTime { line });
            }
        }
        out.push(sample);
    }
    Ok(out)
}

fn validate_sample(s: &RawSample) -> std::result::Result<(), String> {
    if !s.timestamp.is_finite() {
        return Err("non-finite timestamp".into());
    }
    if !(s.lead_speed >= 0.0) || !(s.foll_speed >= 0.0) {
        return Err(format!(
            "negative speed (lead {}, follower {})",
            s.lead_speed, s.foll_speed
        ));
    }
    for lat in [s.lead_lat, s.foll_lat].into_iter().flatten() {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(format!("latitude {lat} out of range"));
        }
    }
    for lon in [s.lead_lon, s.foll_lon].into_iter().flatten() {
        if !(-180.0..=180.0).contains(&lon) {
            return Err(format!("longitude {lon} out of range"));
        }
    }
    Ok(())
}

/// Great-circle distance in meters between two points given in degrees.
pub fn haversine_spacing(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64> {
    for lat in [lat1, lat2] {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(format!("latitude {lat} out of range")));
        }
    }
    for lon in [lon1, lon2] {
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!("longitude {lon} out of range")));
        }
    }
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (lon2 - lon1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
}

/// Linearly interpolates raw samples onto a uniform grid starting at the first timestamp.
///
/// Spacing comes from the Haversine distance when every sample carries both GPS fixes,
/// otherwise from the precomputed spacing column.
pub fn resample(raw: &[RawSample], dt: f64) -> Result<Trajectory> {
    if raw.len() < 2 {
        return Err(Error::invalid("resampling needs at least 2 samples"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let t: Vec<f64> = raw.iter().map(|r| r.timestamp).collect();
    if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotoneTime { line: i + 3 });
    }
    let span = t[t.len() - 1] - t[0];
    if span < dt {
        return Err(Error::invalid(format!("span {span} s is shorter than dt {dt} s")));
    }

    let spacing: Vec<f64> = if raw.iter().all(|r| r.positions().is_some()) {
        raw.iter()
            .map(|r| {
                let (la, lo, fa, fo) = r.positions().unwrap();
                haversine_spacing(la, lo, fa, fo)
            })
            .collect::<Result<_>>()?
    } else {
        raw.iter()
            .enumerate()
            .map(|(i, r)| {
                r.spacing
                    .ok_or_else(|| Error::invalid(format!("sample {i} has neither positions nor spacing")))
            })
            .collect::<Result<_>>()?
    };
    let lead: Vec<f64> = raw.iter().map(|r| r.lead_speed).collect();
    let foll: Vec<f64> = raw.iter().map(|r| r.foll_speed).collect();

    let n = (span / dt + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|k| t[0] + k as f64 * dt).collect();
    let v = interpolate(&t, &foll, &grid);
    let v_l = interpolate(&t, &lead, &grid);
    let s = interpolate(&t, &spacing, &grid);
    Trajectory::from_speeds(dt, t[0], v, v_l, s)
}

/// Piecewise-linear interpolation of `(xs, ys)` at increasing query points.
fn interpolate(xs: &[f64], ys: &[f64], query: &[f64]) -> Vec<f64> {
    let last = xs.len() - 1;
    let mut j = 0;
    query
        .iter()
        .map(|&q| {
            while j + 1 < last && xs[j + 1] <= q {
                j += 1;
            }
            let (x0, x1) = (xs[j], xs[j + 1]);
            let tol = 1e-9 * (x1 - x0);
            if (q - x0).abs() <= tol {
                ys[j]
            } else if (q - x1).abs() <= tol {
                ys[j + 1]
            } else {
                let w = ((q - x0) / (x1 - x0)).clamp(0.0, 1.0);
                ys[j] + w * (ys[j + 1] - ys[j])
            }
        })
        .collect()
}

/// Centered moving average; near the ends the window is truncated to the samples available.
pub fn smooth(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    if window > series.len() {
        return Err(Error::invalid(format!(
            "smoothing window {window} exceeds series length {}",
            series.len()
        )));
    }
    let half = window / 2;
    let n = series.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &x in series {
        prefix.push(prefix.last().unwrap() + x);
    }
    Ok((0..n)
        .map(|i| {
            if half == 0 {
                return series[i];
            }
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect())
}

/// Backward differences `(v[i] - v[i-1]) / dt`; the first entry repeats the second.
pub fn differentiate(speed: &[f64], dt: f64) -> Result<Vec<f64>> {
    if speed.len() < 2 {
        return Err(Error::invalid("differentiation needs at least 2 samples"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let mut out = Vec::with_capacity(speed.len());
    out.push(0.0);
    out.extend(speed.windows(2).map(|w| (w[1] - w[0]) / dt));
    out[0] = out[1];
    Ok(out)
}

/// Smooths follower and lead speed plus spacing, then re-derives acceleration.
pub fn smooth_trajectory(traj: &Trajectory, window: usize) -> Result<Trajectory> {
    let v = smooth(&traj.v, window)?;
    let v_l = smooth(&traj.v_l, window)?;
    let s = smooth(&traj.s, window)?;
    Trajectory::from_speeds(traj.dt, traj.t0, v, v_l, s)
}

/// Chronological 60/25/15 split. Validation and test lengths round down; the
/// remainder goes to training.
pub fn split(traj: &Trajectory) -> Result<DatasetSplit> {
    let n = traj.len();
    if n < MIN_SPLIT_LEN {
        return Err(Error::invalid(format!(
            "trajectory of {n} samples is too short to split (need {MIN_SPLIT_LEN})"
        )));
    }
    let (_, f_val, f_test) = SPLIT_FRACTIONS;
    let n_val = (n as f64 * f_val).floor() as usize;
    let n_test = (n as f64 * f_test).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(DatasetSplit {
        train: traj.slice(0..n_train)?,
        validation: traj.slice(n_train..n_train + n_val)?,
        test: traj.slice(n_train + n_val..n)?,
        fractions: SPLIT_FRACTIONS,
    })
}

/// Formats `x` with `digits` significant digits, trimming trailing zeros.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let digits = digits as i32;
    let text = if (-5..digits).contains(&exp) {
        let decimals = (digits - 1 - exp).max(0) as usize;
        format!("{:.*}", decimals, x)
    } else {
        format!("{:.*e}", (digits - 1) as usize, x)
    };
    trim_zeros(&text)
}

fn trim_zeros(text: &str) -> String {
    let (mantissa, exp) = match text.find('e') {
        Some(i) => (&text[..i], &text[i..]),
        None => (text, ""),
    };
    let mantissa = if mantissa.contains('.') {
        mantissa.trim_end_matches('0').trim_end_matches('.')
    } else {
        mantissa
    };
    format!("{mantissa}{exp}")
}
