use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{average, evaluate, member_forecasts, train_ensemble, EnsembleConfig, EnsembleModel};
use crate::data::{
    build_bundles, bundles_for_range, perturb_training, NormStats, Series, SplitBundles, SplitSpec,
};
use crate::error::{Error, Result};
use crate::layers::ModelSpec;
use crate::training::{predict, train, TrainConfig};

/// One row per ensemble size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mape: f64,
    pub mae: f64,
    /// Maximum absolute prediction bias.
    pub max: f64,
    /// Standard deviation of the prediction bias.
    pub sd: f64,
}

/// Trains `config.members` members once; the size-k row averages the
/// first k of them, so rows differ only in ensemble size.
pub fn ensemble_size_sweep(
    bundles: &SplitBundles,
    stats: &NormStats,
    train_config: &TrainConfig,
    spec: &ModelSpec,
    config: &EnsembleConfig,
) -> Result<(EnsembleModel, Vec<SweepRow>)> {
    let validation = Some(&bundles.validation).filter(|v| !v.is_empty());
    let ens = train_ensemble(
        &bundles.train,
        validation,
        stats,
        train_config,
        spec,
        config,
    )?;
    let per_member = member_forecasts(&ens, &bundles.test)?;
    let actuals = bundles.test.actuals();
    let rows = (1..=ens.len())
        .map(|k| {
            let r = evaluate(&average(&per_member[..k]), &actuals)?;
            Ok(SweepRow {
                k,
                mape: r.mape,
                mae: r.mae,
                max: r.max_abs_bias,
                sd: r.bias_sd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ens, rows))
}

pub const DEFAULT_GRID: [f64; 8] = [0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub load_sds: Vec<f64>,
    pub temp_sds: Vec<f64>,
    /// Shared by every cell: the same noise draws (scaled by each cell's sd),
    /// initialization and batch order.
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            load_sds: DEFAULT_GRID.to_vec(),
            temp_sds: DEFAULT_GRID.to_vec(),
            seed: 0,
        }
    }
}

impl RobustnessConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, g) in [("load_sds", &self.load_sds), ("temp_sds", &self.temp_sds)] {
            if g.is_empty() {
                p.push(format!("study.{name} must not be empty"));
            }
            if g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                p.push(format!(
                    "study.{name} values must be finite and non-negative"
                ));
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub load_sd: f64,
    pub temp_sd: f64,
    pub mape: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// One model per (load sd, temperature sd) cell, trained on a copy of
/// `series` whose train range carries that much Gaussian noise and scored
/// on the clean test month. Cells are row-major in `load_sds`.
pub fn robustness_grid(
    series: &Series,
    split: &SplitSpec,
    train_config: &TrainConfig,
    spec: &ModelSpec,
    config: &RobustnessConfig,
) -> Result<Vec<GridCell>> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    split.validate()?;
    let cells: Vec<(f64, f64)> = config
        .load_sds
        .iter()
        .flat_map(|&l| config.temp_sds.iter().map(move |&t| (l, t)))
        .collect();
    let tc = TrainConfig {
        seed: config.seed,
        ..train_config.clone()
    };
    let sp = ModelSpec {
        seed: config.seed,
        ..spec.clone()
    };
    cells
        .par_iter()
        .map(|&(load_sd, temp_sd)| {
            let noisy = perturb_training(series, &split.train, load_sd, temp_sd, config.seed)?;
            let stats = NormStats::fit(&noisy, &split.fitting())?;
            let b = build_bundles(&noisy, split, &stats)?;
            let clean_test = bundles_for_range(series, &split.test, &stats)?;
            let validation = Some(&b.validation).filter(|v| !v.is_empty());
            let model = train(&b.train, validation, &stats, &tc, &sp)?;
            let r = evaluate(&predict(&model, &clean_test)?, &clean_test.actuals())?;
            Ok(GridCell {
                load_sd,
                temp_sd,
                mape: r.mape,
                mae: r.mae,
                rmse: r.rmse,
            })
        })
        .collect()
}

/// `k,mape,mae,max,sd`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `k,metric,value`.
pub fn write_sweep_long_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "metric", "value"])?;
    for r in rows {
        for (name, v) in [
            ("mape", r.mape),
            ("mae", r.mae),
            ("max", r.max),
            ("sd", r.sd),
        ] {
            w.write_record([r.k.to_string(), name.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `load_sd,temp_sd,metric,value` with the clean-test MAPE of each cell.
pub fn write_grid_csv<W: Write>(cells: &[GridCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["load_sd", "temp_sd", "metric", "value"])?;
    for c in cells {
        w.write_record([
            c.load_sd.to_string(),
            c.temp_sd.to_string(),
            "mape".to_string(),
            c.mape.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_csv_columns() {
        let rows = vec![
            SweepRow {
                k: 1,
                mape: 1.5,
                mae: 10.0,
                max: 40.0,
                sd: 9.0,
            },
            SweepRow {
                k: 2,
                mape: 1.25,
                mae: 9.0,
                max: 35.5,
                sd: 8.0,
            },
        ];
        let mut wide = Vec::new();
        write_sweep_csv(&rows, &mut wide).unwrap();
        let wide = String::from_utf8(wide).unwrap();
        assert_eq!(wide.lines().next().unwrap(), "k,mape,mae,max,sd");
        assert_eq!(wide.lines().count(), 3);
        let mut long = Vec::new();
        write_sweep_long_csv(&rows, &mut long).unwrap();
        assert_eq!(String::from_utf8(long).unwrap().lines().count(), 1 + 8);
    }

    #[test]
    fn default_grid_csv_has_64_rows() {
        let cfg = RobustnessConfig::default();
        let cells: Vec<GridCell> = cfg
            .load_sds
            .iter()
            .flat_map(|&l| cfg.temp_sds.iter().map(move |&t| (l, t)))
            .map(|(load_sd, temp_sd)| GridCell {
                load_sd,
                temp_sd,
                mape: 1.0,
                mae: 1.0,
                rmse: 1.0,
            })
            .collect();
        let mut out = Vec::new();
        write_grid_csv(&cells, &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().next().unwrap(), "load_sd,temp_sd,metric,value");
        assert_eq!(s.lines().count() - 1, 64);
    }

    #[test]
    fn negative_sd_rejected() {
        let cfg = RobustnessConfig {
            load_sds: vec![0.0, -0.1],
            temp_sds: vec![],
            seed: 0,
        };
        assert_eq!(cfg.problems().len(), 2);
    }
}
