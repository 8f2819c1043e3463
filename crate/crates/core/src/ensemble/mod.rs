//! Bagged ensembles, forecast metrics and the ensemble-size and robustness
//! studies.

mod metrics;
mod studies;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BundleSet, NormStats};
use crate::error::{Error, Result};
use crate::layers::ModelSpec;
use crate::training::{predict, train, TrainConfig, TrainedModel};

pub use metrics::{evaluate, variance_diagnostics, EvaluationReport, VarianceDiagnostics};
pub use studies::{
    ensemble_size_sweep, robustness_grid, write_grid_csv, write_sweep_csv, write_sweep_long_csv,
    GridCell, RobustnessConfig, SweepRow, DEFAULT_GRID,
};

pub const DEFAULT_MEMBERS: usize = 5;
pub const DEFAULT_SUBSAMPLE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    /// Fraction of the training bundles each member sees, drawn without
    /// replacement.
    pub subsample: f64,
    /// Member i uses seed `seed ^ i` for initialization, shuffling and
    /// subsampling.
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: DEFAULT_MEMBERS,
            subsample: DEFAULT_SUBSAMPLE,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.members == 0 {
            p.push("ensemble.members must be at least 1".to_string());
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            p.push("ensemble.subsample must be in (0, 1]".to_string());
        }
        p
    }

    pub fn member_seed(&self, i: usize) -> u64 {
        self.seed ^ i as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<TrainedModel>,
    pub subsample: f64,
    pub seeds: Vec<u64>,
}

impl EnsembleModel {
    pub fn from_members(
        members: Vec<TrainedModel>,
        subsample: f64,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::contract("an ensemble needs at least one member"));
        };
        if seeds.len() != members.len() {
            return Err(Error::contract("one seed per ensemble member"));
        }
        let arch = |s: &ModelSpec| ModelSpec {
            seed: 0,
            ..s.clone()
        };
        let same = |m: &TrainedModel| arch(&m.spec) == arch(&first.spec) && m.stats == first.stats;
        if !members.iter().all(same) {
            return Err(Error::contract(
                "ensemble members must share architecture and normalization statistics",
            ));
        }
        Ok(Self {
            members,
            subsample,
            seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn stats(&self) -> &NormStats {
        &self.members[0].stats
    }

    /// The first `k` members as an ensemble of their own.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(Error::contract(format!(
                "prefix of {k} from {} members",
                self.len()
            )));
        }
        Ok(Self {
            members: self.members[..k].to_vec(),
            subsample: self.subsample,
            seeds: self.seeds[..k].to_vec(),
        })
    }
}

/// Indices of a uniform `floor(fraction·n)` subsample, sorted, without
/// replacement (at least one).
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let m = ((fraction * n as f64).floor() as usize).clamp(1.min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut ix = sample(&mut rng, n, m).into_vec();
    ix.sort_unstable();
    ix
}

/// Train `config.members` models, each on its own subsample of `train`.
/// Members train in parallel; results are independent of thread count.
pub fn train_ensemble(
    train_set: &BundleSet,
    validation: Option<&BundleSet>,
    stats: &NormStats,
    train_config: &TrainConfig,
    spec: &ModelSpec,
    config: &EnsembleConfig,
) -> Result<EnsembleModel> {
    if config.members == 0 {
        return Err(Error::contract("an ensemble needs at least one member"));
    }
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let seeds: Vec<u64> = (0..config.members).map(|i| config.member_seed(i)).collect();
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let subset =
                train_set.select(&subsample_indices(train_set.len(), config.subsample, seed));
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let sp = ModelSpec {
                seed,
                ..spec.clone()
            };
            train(&subset, validation, stats, &tc, &sp)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::from_members(members, config.subsample, seeds)
}

/// Per-member forecasts in megawatts, `[member][bundle]`.
pub fn member_forecasts(ens: &EnsembleModel, bundles: &BundleSet) -> Result<Vec<Vec<f64>>> {
    ens.members
        .par_iter()
        .map(|m| predict(m, bundles))
        .collect()
}

/// Unweighted mean of the member forecasts.
pub fn predict_ensemble(ens: &EnsembleModel, bundles: &BundleSet) -> Result<Vec<f64>> {
    if ens.is_empty() {
        return Err(Error::contract("an ensemble needs at least one member"));
    }
    Ok(average(&member_forecasts(ens, bundles)?))
}

fn average(per_member: &[Vec<f64>]) -> Vec<f64> {
    let k = per_member.len() as f64;
    let n = per_member[0].len();
    (0..n)
        .map(|t| per_member.iter().map(|f| f[t]).sum::<f64>() / k)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_bundles, default_synthetic_start, synthesize_series, SplitSpec};
    use std::collections::HashSet;

    #[test]
    fn subsample_contract() {
        for n in [1usize, 7, 100, 1391] {
            let ix = subsample_indices(n, 0.9, 11);
            assert_eq!(ix.len(), ((0.9 * n as f64).floor() as usize).max(1));
            assert_eq!(ix.iter().collect::<HashSet<_>>().len(), ix.len());
            assert!(ix.iter().all(|&i| i < n));
        }
        assert_ne!(
            subsample_indices(100, 0.9, 1),
            subsample_indices(100, 0.9, 2)
        );
        assert_eq!(subsample_indices(100, 0.8, 3).len(), 80);
    }

    #[test]
    fn member_seeds_xor_master() {
        let c = EnsembleConfig {
            seed: 0b1010,
            ..EnsembleConfig::default()
        };
        let s: Vec<u64> = (0..4).map(|i| c.member_seed(i)).collect();
        assert_eq!(s, vec![10, 11, 8, 9]);
    }

    #[test]
    fn averaging_two_members() {
        assert_eq!(
            average(&[vec![100.0, 1.0], vec![110.0, 3.0]]),
            vec![105.0, 2.0]
        );
    }

    fn small() -> (crate::data::SplitBundles, NormStats, TrainConfig, ModelSpec) {
        let s = synthesize_series(60, 5, default_synthetic_start()).unwrap();
        let split = SplitSpec::tail_split(&s, 5, 5).unwrap();
        let stats = NormStats::fit(&s, &split.fitting()).unwrap();
        let b = build_bundles(&s, &split, &stats).unwrap();
        let spec = ModelSpec {
            width: 8,
            block_count: 1,
            se_ratio: 4,
            ..ModelSpec::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 128,
            init_sd: 0.1,
            ..TrainConfig::default()
        };
        (b, stats, cfg, spec)
    }

    #[test]
    fn identical_members_reproduce_member_forecast() {
        let (b, stats, cfg, spec) = small();
        let train_set = b.train.select(&(0..200).collect::<Vec<_>>());
        let m = train(&train_set, None, &stats, &cfg, &spec).unwrap();
        let ens =
            EnsembleModel::from_members(vec![m.clone(), m.clone(), m.clone()], 1.0, vec![0, 0, 0])
                .unwrap();
        let single = predict(&m, &b.test).unwrap();
        let avg = predict_ensemble(&ens, &b.test).unwrap();
        for (a, s) in avg.iter().zip(&single) {
            assert!((a - s).abs() <= 1e-9 * s.abs());
        }
    }

    #[test]
    fn ensemble_is_deterministic_and_permutation_invariant() {
        let (b, stats, cfg, spec) = small();
        let train_set = b.train.select(&(0..200).collect::<Vec<_>>());
        let ec = EnsembleConfig {
            members: 3,
            seed: 4,
            ..EnsembleConfig::default()
        };
        let e1 = train_ensemble(&train_set, None, &stats, &cfg, &spec, &ec).unwrap();
        let e2 = train_ensemble(&train_set, None, &stats, &cfg, &spec, &ec).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.seeds, vec![4, 5, 6]);
        for m in &e1.members {
            assert_eq!(m.manifest.train_bundles, 180);
        }
        let mut rev = e1.clone();
        rev.members.reverse();
        let a = predict_ensemble(&e1, &b.test).unwrap();
        let r = predict_ensemble(&rev, &b.test).unwrap();
        for (x, y) in a.iter().zip(&r) {
            assert!((x - y).abs() <= 1e-9 * x.abs());
        }
    }

    #[test]
    fn zero_members_rejected() {
        let (b, stats, cfg, spec) = small();
        let ec = EnsembleConfig {
            members: 0,
            ..EnsembleConfig::default()
        };
        assert!(matches!(
            train_ensemble(&b.train, None, &stats, &cfg, &spec, &ec),
            Err(Error::Contract(_))
        ));
        assert!(EnsembleModel::from_members(vec![], 0.9, vec![]).is_err());
    }
}
