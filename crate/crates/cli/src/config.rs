//! The run configuration file.
//!
//! One master `seed` drives every random choice: it becomes the model
//! initialization seed, the batch-shuffling seed, the ensemble seed (member
//! i uses `seed ^ i`) and the seed of both studies. The per-section seed
//! fields are derived; written configs repeat them, and a config that sets
//! one to anything else is rejected.

use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDateTime};
use danet_core::data::{
    default_synthetic_start, ingest_csv, synthesize_series, Series, SplitSpec, TimeRange,
    MIN_SYNTHETIC_DAYS, WARMUP,
};
use danet_core::ensemble::{EnsembleConfig, RobustnessConfig};
use danet_core::layers::{GrowthStudyConfig, ModelSpec};
use danet_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub days: usize,
    pub seed: u64,
    #[serde(default = "default_synthetic_start")]
    pub start: NaiveDateTime,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV with header `timestamp,load,temperature`.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

/// Either whole days counted back from the series end, or explicit ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub validation_days: i64,
    pub test_days: i64,
    pub ranges: Option<SplitSpec>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation_days: 30,
            test_days: 30,
            ranges: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub growth: GrowthStudyConfig,
    pub robustness: RobustnessConfig,
    /// Largest ensemble in the size sweep.
    pub max_ensemble: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            growth: GrowthStudyConfig::default(),
            robustness: RobustnessConfig::default(),
            max_ensemble: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub ensemble: EnsembleConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            model: ModelSpec::default(),
            ensemble: EnsembleConfig::default(),
            study: StudyConfig::default(),
        };
        c.apply_seed(0);
        c
    }
}

const DERIVED_SEEDS: [(&str, &str); 5] = [
    ("train", "seed"),
    ("model", "seed"),
    ("ensemble", "seed"),
    ("study.growth", "seed"),
    ("study.robustness", "seed"),
];

impl RunConfig {
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.model.seed = seed;
        self.ensemble.seed = seed;
        self.study.growth.seed = seed;
        self.study.robustness.seed = seed;
    }

    /// Parse, apply the master seed (or `seed_override`) and validate,
    /// reporting every problem at once. The data section is only checked
    /// when `needs_data`.
    pub fn parse(
        text: &str,
        seed_override: Option<u64>,
        needs_data: bool,
    ) -> Result<Self, CliError> {
        let raw: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut cfg: RunConfig = raw
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        let mut problems = Vec::new();
        for (section, key) in DERIVED_SEEDS {
            let mut node = Some(&raw);
            for part in section.split('.') {
                node = node.and_then(|t| t.get(part)).and_then(|v| v.as_table());
            }
            if let Some(v) = node.and_then(|t| t.get(key)) {
                if v.as_integer() != i64::try_from(cfg.seed).ok() {
                    problems.push(format!(
                        "{section}.{key} = {v} differs from the master seed {}; it is derived, remove it",
                        cfg.seed
                    ));
                }
            }
        }
        let seed = seed_override.unwrap_or(cfg.seed);
        cfg.apply_seed(seed);
        if needs_data {
            problems.extend(cfg.data_problems());
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn load(
        path: &Path,
        seed_override: Option<u64>,
        needs_data: bool,
    ) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, seed_override, needs_data)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn data_problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        match (&self.data.path, &self.data.synthetic) {
            (None, None) => p.push("data: set either data.path or data.synthetic".to_string()),
            (Some(_), Some(_)) => {
                p.push("data: data.path and data.synthetic are exclusive".to_string())
            }
            (_, Some(s)) if s.days < MIN_SYNTHETIC_DAYS => p.push(format!(
                "data.synthetic.days must be at least {MIN_SYNTHETIC_DAYS}"
            )),
            _ => {}
        }
        p
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.split.ranges.is_none() {
            if self.split.validation_days < 1 {
                p.push("split.validation_days must be at least 1".to_string());
            }
            if self.split.test_days < 1 {
                p.push("split.test_days must be at least 1".to_string());
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            p.push("out_dir must not be empty".to_string());
        }
        p.extend(self.train.problems());
        p.extend(self.model.problems());
        p.extend(self.ensemble.problems());
        p.extend(self.study.growth.problems());
        p.extend(self.study.robustness.problems());
        if self.study.max_ensemble == 0 {
            p.push("study.max_ensemble must be at least 1".to_string());
        }
        p
    }

    pub fn load_series(&self) -> Result<Series, CliError> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(path), None) => Ok(ingest_csv(path)?),
            (None, Some(s)) => Ok(synthesize_series(s.days, s.seed, s.start)?),
            _ => Err(CliError::Config(self.data_problems())),
        }
    }

    pub fn resolve_split(&self, series: &Series) -> Result<SplitSpec, CliError> {
        let split = match self.split.ranges {
            Some(r) => r,
            None => {
                SplitSpec::tail_split(series, self.split.validation_days, self.split.test_days)?
            }
        };
        split.validate()?;
        let earliest = series.start() + Duration::hours(WARMUP as i64);
        let covered = TimeRange::new(earliest, series.end());
        for (name, r) in [("train", split.train), ("test", split.test)] {
            if r.start < covered.start || r.end > covered.end {
                return Err(CliError::Core(danet_core::Error::Contract(format!(
                    "{name} range is not covered by the series after its {WARMUP}-hour warm-up"
                ))));
            }
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "out_dir = \"r\"\n[data.synthetic]\ndays = 60\nseed = 1\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::parse(MINIMAL, None, true).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.model.width, 128);
        assert_eq!(c.ensemble.members, 5);
        assert_eq!(
            c.data.synthetic.as_ref().unwrap().start,
            default_synthetic_start()
        );
    }

    #[test]
    fn master_seed_reaches_every_section() {
        let c = RunConfig::parse(&format!("seed = 9\n{MINIMAL}"), None, true).unwrap();
        assert_eq!(
            [
                c.train.seed,
                c.model.seed,
                c.ensemble.seed,
                c.study.growth.seed,
                c.study.robustness.seed
            ],
            [9; 5]
        );
        let c = RunConfig::parse(MINIMAL, Some(4), true).unwrap();
        assert_eq!((c.seed, c.model.seed), (4, 4));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::parse(MINIMAL, Some(3), true).unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text, None, true).unwrap(), c);
    }

    #[test]
    fn every_problem_is_reported() {
        let text = "[data]\n[train]\nepochs = 0\nbatch_size = 0\n[model]\nwidth = 0\nseed = 2\n[ensemble]\nmembers = 0\n";
        match RunConfig::parse(text, None, true) {
            Err(CliError::Config(p)) => {
                let joined = p.join("\n");
                for needle in [
                    "data",
                    "epochs",
                    "batch_size",
                    "width",
                    "members",
                    "model.seed",
                ] {
                    assert!(joined.contains(needle), "{needle} missing from\n{joined}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn data_is_optional_when_unused() {
        assert!(RunConfig::parse("", None, false).is_ok());
        assert!(matches!(
            RunConfig::parse("", None, true),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn unknown_field_is_a_usage_error() {
        let text = format!("{MINIMAL}[train]\nepoch = 3\n");
        assert!(matches!(
            RunConfig::parse(&text, None, true),
            Err(CliError::Usage(_))
        ));
    }
}
