//! Input-gradient norm versus depth for stacks wired by each combine rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{layer_input_width, layer_stack, stack_decls, BlockConnection, ParamKind};
use super::combine::CombineRule;
use crate::autodiff::{truncated_normal_with, Graph, ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthStudyConfig {
    pub width: usize,
    pub depths: Vec<usize>,
    pub seed: u64,
    /// Weight sd is `gain / sqrt(fan_in)`.
    pub gain: f64,
}

impl GrowthStudyConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.width == 0 {
            p.push("growth.width must be at least 1".to_string());
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            p.push("growth.depths must be non-empty and positive".to_string());
        }
        if self.depths.windows(2).any(|w| w[1] <= w[0]) {
            p.push("growth.depths must be ascending".to_string());
        }
        if !(self.gain > 0.0) {
            p.push("growth.gain must be positive".to_string());
        }
        p
    }
}

impl Default for GrowthStudyConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depths: vec![1, 2, 4, 8, 12, 16, 20],
            seed: 7,
            gain: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub rule: CombineRule,
    pub depth: usize,
    /// ‖∂L/∂x₀‖₂ for the MAE loss `mean|x_depth|`.
    pub grad_norm: f64,
    pub parameter_count: usize,
}

fn connection(rule: CombineRule) -> BlockConnection {
    match rule {
        CombineRule::Concat => BlockConnection::Concat,
        CombineRule::Additive => BlockConnection::Additive,
        CombineRule::Average => BlockConnection::Average,
    }
}

/// Parameters for a `depth`-layer stack. Layer ℓ is drawn from its own
/// seeded stream, so deeper stacks extend shallower ones.
fn stack_params(
    rule: CombineRule,
    depth: usize,
    cfg: &GrowthStudyConfig,
) -> Result<ParameterStore> {
    let conn = connection(rule);
    let mut store = ParameterStore::new();
    for (i, d) in stack_decls("stack", cfg.width, depth, conn)
        .into_iter()
        .enumerate()
    {
        let layer = i / 2 + 1;
        let value = match d.kind {
            ParamKind::Weight => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(layer as u64);
                let fan_in = layer_input_width(conn, cfg.width, layer) as f64;
                truncated_normal_with(&d.shape, cfg.gain / fan_in.sqrt(), 2.0, &mut rng)?
            }
            ParamKind::Bias => Tensor::zeros(&d.shape),
        };
        store.insert(d.name, value)?;
    }
    Ok(store)
}

/// One backward pass per depth from a fixed uniform[−1,1] input.
pub fn gradient_growth_study(rule: CombineRule, cfg: &GrowthStudyConfig) -> Result<Vec<GrowthRow>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0: Vec<f64> = (0..cfg.width).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let x0 = Tensor::new(vec![1, cfg.width], x0)?;

    cfg.depths
        .iter()
        .map(|&depth| {
            let store = stack_params(rule, depth, cfg)?;
            let mut g = Graph::new();
            let x = g.input(x0.clone())?;
            let out = layer_stack(&mut g, &store, "stack", x, depth, connection(rule))?;
            let abs = g.abs(out);
            let loss = g.mean(abs);
            g.backward(loss, &store)?;
            let grad_norm = g.grad(x).map(Tensor::l2_norm).unwrap_or(0.0);
            Ok(GrowthRow {
                rule,
                depth,
                grad_norm,
                parameter_count: store.scalar_count(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depths: Vec<usize>) -> GrowthStudyConfig {
        GrowthStudyConfig {
            depths,
            ..GrowthStudyConfig::default()
        }
    }

    #[test]
    fn depth_one_average_is_half_additive() {
        // x1 = H(x0) + x0 vs (H(x0) + x0)/2; |·| keeps the sign pattern.
        let c = cfg(vec![1]);
        let add = gradient_growth_study(CombineRule::Additive, &c).unwrap()[0].grad_norm;
        let avg = gradient_growth_study(CombineRule::Average, &c).unwrap()[0].grad_norm;
        assert!((avg - add / 2.0).abs() <= 1e-12 * add);
    }

    #[test]
    fn concat_costs_more_parameters() {
        let c = cfg(vec![20]);
        let cat = gradient_growth_study(CombineRule::Concat, &c).unwrap()[0].parameter_count;
        let add = gradient_growth_study(CombineRule::Additive, &c).unwrap()[0].parameter_count;
        assert!(cat > add);
        assert_eq!(add, 20 * (128 * 128 + 128));
    }

    #[test]
    fn rejects_unsorted_depths() {
        assert!(gradient_growth_study(CombineRule::Average, &cfg(vec![3, 2])).is_err());
        assert!(gradient_growth_study(CombineRule::Average, &cfg(vec![0])).is_err());
    }
}
