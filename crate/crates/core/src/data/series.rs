use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";
const ACCEPTED_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%d %H:%M:%S",
];

/// One hourly observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub timestamp: NaiveDateTime,
    /// Megawatts.
    pub load: f64,
    /// Degrees.
    pub temperature: f64,
}

/// Half-open `[start, end)` interval of hours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

impl TimeRange {
    pub fn new(start: NaiveDateTime, end: NaiveDateTime) -> Self {
        Self { start, end }
    }

    pub fn hours(&self) -> i64 {
        (self.end - self.start).num_hours()
    }

    pub fn contains(&self, t: NaiveDateTime) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &TimeRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Hour-contiguous, strictly increasing rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    rows: Vec<SeriesRow>,
}

impl Series {
    pub fn new(rows: Vec<SeriesRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("series has no rows"));
        }
        for (i, w) in rows.windows(2).enumerate() {
            let expected = w[0].timestamp + Duration::hours(1);
            if w[1].timestamp != expected {
                return Err(Error::contract(format!(
                    "row {}: expected {}, found {}",
                    i + 1,
                    expected.format(TIMESTAMP_FORMAT),
                    w[1].timestamp.format(TIMESTAMP_FORMAT)
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[SeriesRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn start(&self) -> NaiveDateTime {
        self.rows[0].timestamp
    }

    /// Exclusive end: one hour past the last row.
    pub fn end(&self) -> NaiveDateTime {
        self.rows[self.rows.len() - 1].timestamp + Duration::hours(1)
    }

    pub fn range(&self) -> TimeRange {
        TimeRange::new(self.start(), self.end())
    }

    /// Row index of `t`, if covered.
    pub fn index_of(&self, t: NaiveDateTime) -> Option<usize> {
        let h = (t - self.start()).num_hours();
        if t < self.start() || t >= self.end() || t.minute() != 0 || t.second() != 0 {
            return None;
        }
        Some(h as usize)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "timestamp,load,temperature")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{}",
                r.timestamp.format(TIMESTAMP_FORMAT),
                r.load,
                r.temperature
            )?;
        }
        Ok(())
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    ACCEPTED_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

/// Read a `timestamp,load,temperature` CSV and verify hourly continuity.
/// Errors cite the 1-based file line.
pub fn ingest_csv(path: &Path) -> Result<Series> {
    let err = |line: u64, message: String| Error::Ingest {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;

    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(ts_col), Some(load_col), Some(temp_col)) =
        (col("timestamp"), col("load"), col("temperature"))
    else {
        return Err(err(
            1,
            format!("header must name timestamp, load, temperature; got {headers:?}"),
        ));
    };

    let mut rows: Vec<SeriesRow> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let timestamp = parse_timestamp(field(ts_col))
            .ok_or_else(|| err(line, format!("bad timestamp `{}`", field(ts_col))))?;
        if timestamp.minute() != 0 || timestamp.second() != 0 {
            return Err(err(
                line,
                format!("timestamp {timestamp} is not on the hour"),
            ));
        }
        let number = |i: usize, what: &str| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| err(line, format!("bad {what} `{}`", field(i))))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite {what}")));
            }
            Ok(v)
        };
        let load = number(load_col, "load")?;
        if load <= 0.0 {
            return Err(err(line, format!("load must be positive, got {load}")));
        }
        let temperature = number(temp_col, "temperature")?;

        if let Some(prev) = rows.last() {
            let expected = prev.timestamp + Duration::hours(1);
            if timestamp < expected {
                return Err(err(
                    line,
                    format!(
                        "duplicate or out-of-order timestamp {}",
                        timestamp.format(TIMESTAMP_FORMAT)
                    ),
                ));
            }
            if timestamp > expected {
                return Err(err(
                    line,
                    format!("missing hour {}", expected.format(TIMESTAMP_FORMAT)),
                ));
            }
        }
        rows.push(SeriesRow {
            timestamp,
            load,
            temperature,
        });
    }
    if rows.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    Series::new(rows)
}

/// Add independent zero-mean Gaussian noise (in raw units) to the load and
/// temperature of every row inside `range`. Rows outside are untouched.
pub fn perturb_training(
    series: &Series,
    range: &TimeRange,
    load_sd: f64,
    temp_sd: f64,
    seed: u64,
) -> Result<Series> {
    if !(load_sd >= 0.0 && temp_sd >= 0.0) {
        return Err(Error::contract(format!(
            "noise sd must be non-negative, got load {load_sd}, temperature {temp_sd}"
        )));
    }
    let mut load_rng = ChaCha8Rng::seed_from_u64(seed);
    load_rng.set_stream(0);
    let mut temp_rng = ChaCha8Rng::seed_from_u64(seed);
    temp_rng.set_stream(1);

    let rows = series
        .rows
        .iter()
        .map(|r| {
            if !range.contains(r.timestamp) {
                return *r;
            }
            let zl: f64 = StandardNormal.sample(&mut load_rng);
            let zt: f64 = StandardNormal.sample(&mut temp_rng);
            SeriesRow {
                load: if load_sd > 0.0 {
                    r.load + load_sd * zl
                } else {
                    r.load
                },
                temperature: if temp_sd > 0.0 {
                    r.temperature + temp_sd * zt
                } else {
                    r.temperature
                },
                ..*r
            }
        })
        .collect();
    Ok(Series { rows })
}

/// Minimum length accepted by [`synthesize_series`].
pub const MIN_SYNTHETIC_DAYS: usize = 60;

pub fn default_synthetic_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2021, 1, 4)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}

/// Hourly synthetic load/temperature series.
///
/// With `d` the fractional day of year, `h` the hour of day, `w` the hours
/// since the most recent Monday 00:00 and `ε`, `η` standard normal draws:
///
/// ```text
/// temperature = 12 + 10·sin(2π(d − 110)/365.25) + 4·sin(2π(h − 9)/24) + η
/// load        = 1000 + 150·sin(2π(h − 8)/24) + 60·cos(2π·w/168)
///                    + 6·|temperature − 18| + 8·ε
/// ```
pub fn synthesize_series(days: usize, seed: u64, start: NaiveDateTime) -> Result<Series> {
    if days < MIN_SYNTHETIC_DAYS {
        return Err(Error::contract(format!(
            "synthetic series needs at least {MIN_SYNTHETIC_DAYS} days, got {days}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..days * 24)
        .map(|i| {
            let timestamp = start + Duration::hours(i as i64);
            let (temperature, clean) = synthetic_components(timestamp);
            let eta: f64 = StandardNormal.sample(&mut rng);
            let eps: f64 = StandardNormal.sample(&mut rng);
            let temperature = temperature + eta;
            SeriesRow {
                timestamp,
                load: clean + 6.0 * (temperature - 18.0).abs() + 8.0 * eps,
                temperature,
            }
        })
        .collect();
    Series::new(rows)
}

/// Noise-free (temperature, load-without-temperature-term) at `t`.
fn synthetic_components(t: NaiveDateTime) -> (f64, f64) {
    let hour = t.hour() as f64;
    let doy = t.ordinal0() as f64 + hour / 24.0;
    let week_hour = t.weekday().num_days_from_monday() as f64 * 24.0 + hour;
    let temperature = 12.0
        + 10.0 * (2.0 * PI * (doy - 110.0) / 365.25).sin()
        + 4.0 * (2.0 * PI * (hour - 9.0) / 24.0).sin();
    let load = 1000.0
        + 150.0 * (2.0 * PI * (hour - 8.0) / 24.0).sin()
        + 60.0 * (2.0 * PI * week_hour / 168.0).cos();
    (temperature, load)
}
