use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// How a layer's output is merged with the outputs that preceded it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineRule {
    /// Depth-wise concatenation of every preceding output.
    Concat,
    /// Sum of the new output and every preceding output.
    Additive,
    /// Arithmetic mean of the new output and every preceding output.
    Average,
}

impl CombineRule {
    pub const ALL: [CombineRule; 3] = [
        CombineRule::Concat,
        CombineRule::Additive,
        CombineRule::Average,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CombineRule::Concat => "concat",
            CombineRule::Additive => "additive",
            CombineRule::Average => "average",
        }
    }
}

impl std::str::FromStr for CombineRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "additive" => Ok(Self::Additive),
            "average" => Ok(Self::Average),
            other => Err(Error::contract(format!("unknown combine rule `{other}`"))),
        }
    }
}

/// Merge `new` with `history` (oldest first).
///
/// * average:  `(new + Σ history) / (|history| + 1)`
/// * additive: `new + Σ history`
/// * concat:   `[history..., new]` along the last axis
pub fn combine(
    g: &mut Graph,
    rule: CombineRule,
    history: &[NodeId],
    new: NodeId,
) -> Result<NodeId> {
    if history.is_empty() {
        return Err(Error::contract("combine needs a non-empty history"));
    }
    let mut terms = history.to_vec();
    terms.push(new);
    match rule {
        CombineRule::Concat => g.concat(&terms),
        CombineRule::Additive => g.add_n(&terms),
        CombineRule::Average => {
            let sum = g.add_n(&terms)?;
            Ok(g.scale(sum, 1.0 / terms.len() as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn run(rule: CombineRule, history: &[&[f64]], new: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let hist: Vec<NodeId> = history
            .iter()
            .map(|h| g.input(Tensor::vector(h)).unwrap())
            .collect();
        let n = g.input(Tensor::vector(new)).unwrap();
        let out = combine(&mut g, rule, &hist, n)?;
        Ok(g.value(out).data().to_vec())
    }

    #[test]
    fn average_of_equal_terms_is_fixed_point() {
        let c = [0.3, -2.0, 7.5];
        assert_eq!(run(CombineRule::Average, &[&c], &c).unwrap(), c.to_vec());
        assert_eq!(
            run(CombineRule::Average, &[&c, &c, &c], &c).unwrap(),
            c.to_vec()
        );
    }

    #[test]
    fn additive_sums() {
        assert_eq!(
            run(CombineRule::Additive, &[&[1.0], &[2.0]], &[3.0]).unwrap(),
            vec![6.0]
        );
    }

    #[test]
    fn average_of_three() {
        assert_eq!(
            run(CombineRule::Average, &[&[0.0], &[2.0]], &[4.0]).unwrap(),
            vec![2.0]
        );
    }

    #[test]
    fn concat_keeps_history_order() {
        assert_eq!(
            run(CombineRule::Concat, &[&[1.0], &[2.0, 3.0]], &[4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn shape_mismatch_and_empty_history() {
        assert!(matches!(
            run(CombineRule::Average, &[&[1.0, 2.0]], &[1.0]),
            Err(Error::Shape { .. })
        ));
        assert!(run(CombineRule::Additive, &[], &[1.0]).is_err());
    }

    #[test]
    fn rule_names_round_trip() {
        for r in CombineRule::ALL {
            assert_eq!(r.name().parse::<CombineRule>().unwrap(), r);
        }
    }
}
