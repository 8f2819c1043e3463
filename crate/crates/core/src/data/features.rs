use chrono::{Datelike, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::series::{Series, TimeRange, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};

/// Hours of load/temperature history per bundle (two days).
pub const WINDOW: usize = 48;
/// History needed before the first forecastable hour: the window plus one
/// anchor value for the first slope.
pub const WARMUP: usize = WINDOW + 1;
pub const WEEKDAYS: usize = 7;
pub const MONTHS: usize = 12;
pub const CALENDAR_WIDTH: usize = WEEKDAYS + MONTHS;

/// First differences: `S[i] = loads[i+1] − loads[i]`.
pub fn compute_slope(loads: &[f64]) -> Result<Vec<f64>> {
    if loads.len() < 2 {
        return Err(Error::contract(format!(
            "slope needs at least two values, got {}",
            loads.len()
        )));
    }
    Ok(loads.windows(2).map(|w| w[1] - w[0]).collect())
}

/// z-score statistics fitted on training rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub load_mean: f64,
    pub load_sd: f64,
    pub temp_mean: f64,
    pub temp_sd: f64,
}

impl NormStats {
    pub fn fit(series: &Series, range: &TimeRange) -> Result<Self> {
        let rows: Vec<_> = series
            .rows()
            .iter()
            .filter(|r| range.contains(r.timestamp))
            .collect();
        if rows.len() < 2 {
            return Err(Error::contract(format!(
                "need at least two rows to fit normalization, range has {}",
                rows.len()
            )));
        }
        let (load_mean, load_sd) = mean_sd(rows.iter().map(|r| r.load));
        let (temp_mean, temp_sd) = mean_sd(rows.iter().map(|r| r.temperature));
        let stats = Self {
            load_mean,
            load_sd,
            temp_mean,
            temp_sd,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.load_sd > 0.0 && self.temp_sd > 0.0)
            || ![self.load_mean, self.load_sd, self.temp_mean, self.temp_sd]
                .iter()
                .all(|v| v.is_finite())
        {
            return Err(Error::contract(format!(
                "normalization statistics need finite values and positive sd: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn normalize_load(&self, mw: f64) -> f64 {
        (mw - self.load_mean) / self.load_sd
    }

    pub fn denormalize_load(&self, z: f64) -> f64 {
        z * self.load_sd + self.load_mean
    }

    pub fn normalize_temp(&self, deg: f64) -> f64 {
        (deg - self.temp_mean) / self.temp_sd
    }

    /// Stable identity of these statistics, used to match bundles to models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for v in [self.load_mean, self.load_sd, self.temp_mean, self.temp_sd] {
            h.update(v.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train / validation / test ranges. Validation is the tail of the train
/// range; model fitting uses only `[train.start, validation.start)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: TimeRange,
    pub validation: TimeRange,
    pub test: TimeRange,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, r) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            if r.is_empty() {
                problems.push(format!("{name} range is empty"));
            }
        }
        if self.validation.end != self.train.end || self.validation.start < self.train.start {
            problems.push("validation must be the tail of the train range".into());
        }
        if self.validation.start <= self.train.start {
            problems.push("validation leaves no fitting hours in the train range".into());
        }
        if self.test.overlaps(&self.train) {
            problems.push("test range overlaps train range".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Hours used to fit parameters and normalization.
    pub fn fitting(&self) -> TimeRange {
        TimeRange::new(self.train.start, self.validation.start)
    }

    /// Split a series into warm-up, training (with a validation tail) and a
    /// final test period, all aligned to whole days from the series end.
    pub fn tail_split(series: &Series, validation_days: i64, test_days: i64) -> Result<Self> {
        let test = TimeRange::new(series.end() - Duration::days(test_days), series.end());
        let train = TimeRange::new(series.start() + Duration::hours(WARMUP as i64), test.start);
        let validation = TimeRange::new(train.end - Duration::days(validation_days), train.end);
        let split = Self {
            train,
            validation,
            test,
        };
        split.validate()?;
        Ok(split)
    }
}

/// Model inputs for one forecast hour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    /// Forecast hour.
    pub timestamp: NaiveDateTime,
    /// Normalized load over the 48 preceding hours.
    pub load: Vec<f64>,
    /// Normalized temperature aligned with `load`.
    pub temperature: Vec<f64>,
    /// First differences of normalized load; `slope[0]` uses the hour
    /// before the window.
    pub slope: Vec<f64>,
    /// `[slope[i], load[i]]` pairs.
    pub load_slope: Vec<[f64; 2]>,
    /// One-hot weekday of the forecast hour, Monday first.
    pub weekday: Vec<f64>,
    /// One-hot month of the forecast hour, January first.
    pub month: Vec<f64>,
    /// Normalized load at the forecast hour.
    pub target: f64,
    /// Load at the forecast hour in megawatts.
    pub actual: f64,
}

impl FeatureBundle {
    /// Build the bundle whose forecast hour is row `target_index`.
    pub fn at(series: &Series, target_index: usize, stats: &NormStats) -> Result<Self> {
        if target_index < WARMUP || target_index >= series.len() {
            return Err(Error::contract(format!(
                "forecast row {target_index} needs {WARMUP} hours of history inside a {}-row series",
                series.len()
            )));
        }
        let rows = series.rows();
        let history = &rows[target_index - WARMUP..target_index];
        let norm_loads: Vec<f64> = history
            .iter()
            .map(|r| stats.normalize_load(r.load))
            .collect();
        let slope = compute_slope(&norm_loads)?;
        let load = norm_loads[1..].to_vec();
        let temperature: Vec<f64> = history[1..]
            .iter()
            .map(|r| stats.normalize_temp(r.temperature))
            .collect();
        let load_slope = slope.iter().zip(&load).map(|(&s, &l)| [s, l]).collect();

        let target_row = rows[target_index];
        let ts = target_row.timestamp;
        let mut weekday = vec![0.0; WEEKDAYS];
        weekday[ts.weekday().num_days_from_monday() as usize] = 1.0;
        let mut month = vec![0.0; MONTHS];
        month[ts.month0() as usize] = 1.0;

        Ok(Self {
            timestamp: ts,
            load,
            temperature,
            slope,
            load_slope,
            weekday,
            month,
            target: stats.normalize_load(target_row.load),
            actual: target_row.load,
        })
    }

    /// Check every field against its documented extent; lists all offenders.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, len, want) in [
            ("load", self.load.len(), WINDOW),
            ("temperature", self.temperature.len(), WINDOW),
            ("slope", self.slope.len(), WINDOW),
            ("load_slope", self.load_slope.len(), WINDOW),
            ("weekday", self.weekday.len(), WEEKDAYS),
            ("month", self.month.len(), MONTHS),
        ] {
            if len != want {
                bad.push(format!("{name} has {len} entries, expected {want}"));
            }
        }
        let non_finite = self
            .load
            .iter()
            .chain(&self.temperature)
            .chain(&self.slope)
            .chain(self.load_slope.iter().flatten())
            .chain(&self.weekday)
            .chain(&self.month)
            .chain([&self.target])
            .any(|v| !v.is_finite());
        if non_finite {
            bad.push("non-finite feature value".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "malformed bundle at {}: {}",
                self.timestamp.format(TIMESTAMP_FORMAT),
                bad.join("; ")
            )))
        }
    }
}

/// Bundles built under one set of normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleSet {
    pub bundles: Vec<FeatureBundle>,
    pub stats_fingerprint: u64,
}

impl BundleSet {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn actuals(&self) -> Vec<f64> {
        self.bundles.iter().map(|b| b.actual).collect()
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        self.bundles.iter().map(|b| b.timestamp).collect()
    }

    /// Subset by row index, keeping the fingerprint.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            bundles: indices.iter().map(|&i| self.bundles[i].clone()).collect(),
            stats_fingerprint: self.stats_fingerprint,
        }
    }
}

/// One bundle per hour of `range`.
pub fn bundles_for_range(
    series: &Series,
    range: &TimeRange,
    stats: &NormStats,
) -> Result<BundleSet> {
    let first = series.index_of(range.start).ok_or_else(|| {
        Error::contract(format!(
            "range start {} outside series {}..{}",
            range.start.format(TIMESTAMP_FORMAT),
            series.start().format(TIMESTAMP_FORMAT),
            series.end().format(TIMESTAMP_FORMAT)
        ))
    })?;
    if first < WARMUP {
        return Err(Error::contract(format!(
            "insufficient warm-up before {}: {first} hours available, {WARMUP} needed",
            range.start.format(TIMESTAMP_FORMAT)
        )));
    }
    if range.end > series.end() {
        return Err(Error::contract(format!(
            "range end {} beyond series end {}",
            range.end.format(TIMESTAMP_FORMAT),
            series.end().format(TIMESTAMP_FORMAT)
        )));
    }
    let n = range.hours().max(0) as usize;
    let bundles = (first..first + n)
        .map(|i| FeatureBundle::at(series, i, stats))
        .collect::<Result<Vec<_>>>()?;
    Ok(BundleSet {
        bundles,
        stats_fingerprint: stats.fingerprint(),
    })
}

#[derive(Clone, Debug)]
pub struct SplitBundles {
    pub train: BundleSet,
    pub validation: BundleSet,
    pub test: BundleSet,
}

/// Training, validation and test bundles under `stats`.
pub fn build_bundles(
    series: &Series,
    split: &SplitSpec,
    stats: &NormStats,
) -> Result<SplitBundles> {
    split.validate()?;
    Ok(SplitBundles {
        train: bundles_for_range(series, &split.fitting(), stats)?,
        validation: bundles_for_range(series, &split.validation, stats)?,
        test: bundles_for_range(series, &split.test, stats)?,
    })
}
