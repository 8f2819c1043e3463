//! The full forecasting network.
//!
//! ```text
//! L_S [48×2] ─┬─ conv kh×2 ─ ReLU ─ SE ─ avg-pool ─┐   (one branch per kernel height)
//!             └─ ...                               ├─ concat ─ dense ─ blocks × N ─ dense → 1
//! T [48]     ─── dense ─ ReLU ─────────────────────┤
//! W‖M [19]   ─── dense ─ ReLU ─────────────────────┘
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{
    block_decls, dense, dense_block, dense_decls, materialize, se_pooled, Activation,
    BlockConnection, InitConfig, ParamDecl, SeBlockSpec, BLOCK_LAYERS,
};
use crate::autodiff::{Graph, NodeId, ParameterStore, Tensor};
use crate::data::{FeatureBundle, CALENDAR_WIDTH, WINDOW};
use crate::error::{Error, Result};

/// Width of the load/slope input (`[S_i, L_i]`).
pub const KERNEL_WIDTH: usize = 2;

/// Declarative architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub combine_rule: BlockConnection,
    pub block_count: usize,
    pub width: usize,
    pub se_ratio: usize,
    pub kernel_heights: Vec<usize>,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            combine_rule: BlockConnection::Average,
            block_count: 5,
            width: 128,
            se_ratio: 16,
            kernel_heights: vec![1, 2, 3, 4],
            seed: 0,
        }
    }
}

impl ModelSpec {
    /// Problems with this spec, all at once.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.width == 0 {
            p.push("width must be positive".to_string());
        }
        if self.se_ratio == 0 {
            p.push("se_ratio must be positive".to_string());
        }
        if self.kernel_heights.is_empty() {
            p.push("kernel_heights must not be empty".to_string());
        }
        if let Some(k) = self.kernel_heights.iter().find(|&&k| k == 0 || k > WINDOW) {
            p.push(format!("kernel height {k} outside 1..={WINDOW}"));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// The same network with every block replaced by a plain layer chain.
    pub fn as_plain(&self) -> Self {
        Self {
            combine_rule: BlockConnection::Plain,
            ..self.clone()
        }
    }

    /// Hidden layers excluding input and output: the convolution stage, the
    /// merge layer and every block layer. SE internals and pooling are not
    /// counted, and the temperature/calendar layers run alongside the
    /// convolutions in the same stage.
    pub fn hidden_depth(&self) -> usize {
        1 + 1 + self.block_count * BLOCK_LAYERS
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Batched network inputs.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    /// `[B, 48, 2, 1]`
    pub load_slope: Tensor,
    /// `[B, 48]`
    pub temperature: Tensor,
    /// `[B, 19]`, weekday then month.
    pub calendar: Tensor,
    /// `[B, 1]` normalized targets.
    pub target: Tensor,
}

impl ModelInputs {
    pub fn from_bundles<'a, I>(bundles: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureBundle>,
    {
        let mut ls = Vec::new();
        let mut temp = Vec::new();
        let mut cal = Vec::new();
        let mut target = Vec::new();
        for b in bundles {
            b.validate()?;
            ls.extend(b.load_slope.iter().flatten());
            temp.extend(&b.temperature);
            cal.extend(&b.weekday);
            cal.extend(&b.month);
            target.push(b.target);
        }
        let n = target.len();
        if n == 0 {
            return Err(Error::contract("no bundles to batch"));
        }
        Ok(Self {
            load_slope: Tensor::new(vec![n, WINDOW, KERNEL_WIDTH, 1], ls)?,
            temperature: Tensor::new(vec![n, WINDOW], temp)?,
            calendar: Tensor::new(vec![n, CALENDAR_WIDTH], cal)?,
            target: Tensor::new(vec![n, 1], target)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.target.len()
    }
}

/// A network architecture bound to its spec.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn se_spec(&self) -> SeBlockSpec {
        SeBlockSpec {
            channels: self.spec.width,
            reduction_ratio: self.spec.se_ratio,
        }
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let w = self.spec.width;
        let mut d = Vec::new();
        for &kh in &self.spec.kernel_heights {
            d.push(ParamDecl {
                name: format!("conv{kh}.kernel"),
                shape: vec![kh, KERNEL_WIDTH, 1, w],
                kind: super::blocks::ParamKind::Weight,
            });
            d.push(ParamDecl {
                name: format!("conv{kh}.bias"),
                shape: vec![w],
                kind: super::blocks::ParamKind::Bias,
            });
            d.extend(self.se_spec().decls(&format!("se{kh}")));
        }
        d.extend(dense_decls("temperature", WINDOW, w));
        d.extend(dense_decls("calendar", CALENDAR_WIDTH, w));
        let merged = (self.spec.kernel_heights.len() + 2) * w;
        d.extend(dense_decls("merge", merged, w));
        for b in 1..=self.spec.block_count {
            d.extend(block_decls(&format!("block{b}"), w, self.spec.combine_rule));
        }
        d.extend(dense_decls("output", w, 1));
        d
    }

    pub fn parameter_count(&self) -> usize {
        self.decls()
            .iter()
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    /// Fresh parameters drawn from `spec.seed`.
    pub fn init(&self, init: &InitConfig) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        materialize(&self.decls(), init, &mut rng)
    }

    /// Record the forward pass; returns the `[B, 1]` prediction node.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        inputs: &ModelInputs,
    ) -> Result<NodeId> {
        let ls = g.constant(inputs.load_slope.clone())?;
        let mut branches = Vec::with_capacity(self.spec.kernel_heights.len() + 2);
        for &kh in &self.spec.kernel_heights {
            let k = g.param(store, &format!("conv{kh}.kernel"))?;
            let b = g.param(store, &format!("conv{kh}.bias"))?;
            let c = g.conv2d_valid_bias(ls, k, b)?;
            let c = g.relu(c);
            branches.push(se_pooled(g, store, &format!("se{kh}"), c)?);
        }
        let t = g.constant(inputs.temperature.clone())?;
        branches.push(dense(g, store, "temperature", t, Activation::Relu)?);
        let cal = g.constant(inputs.calendar.clone())?;
        branches.push(dense(g, store, "calendar", cal, Activation::Relu)?);

        let joined = g.concat(&branches)?;
        let mut x = dense(g, store, "merge", joined, Activation::Relu)?;
        for b in 1..=self.spec.block_count {
            x = dense_block(g, store, &format!("block{b}"), x, self.spec.combine_rule)?;
        }
        dense(g, store, "output", x, Activation::Linear)
    }

    /// Normalized predictions, evaluated in chunks.
    pub fn predict_normalized(
        &self,
        store: &ParameterStore,
        bundles: &[FeatureBundle],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(bundles.len());
        for chunk in bundles.chunks(512) {
            let inputs = ModelInputs::from_bundles(chunk)?;
            let mut g = Graph::new();
            let y = self.forward(&mut g, store, &inputs)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }

    /// Normalized forecast for one bundle.
    pub fn forward_bundle(&self, store: &ParameterStore, bundle: &FeatureBundle) -> Result<f64> {
        Ok(self.predict_normalized(store, std::slice::from_ref(bundle))?[0])
    }
}

/// Forecast with the dense average network described by `spec`.
pub fn danet_forward(
    spec: &ModelSpec,
    store: &ParameterStore,
    bundle: &FeatureBundle,
) -> Result<f64> {
    Network::new(spec.clone())?.forward_bundle(store, bundle)
}

/// Forecast with the plain-layer baseline of `spec` (same parameters).
pub fn ann_forward(
    spec: &ModelSpec,
    store: &ParameterStore,
    bundle: &FeatureBundle,
) -> Result<f64> {
    Network::new(spec.as_plain())?.forward_bundle(store, bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_synthetic_start, synthesize_series, NormStats};

    fn small_spec() -> ModelSpec {
        ModelSpec {
            width: 16,
            block_count: 2,
            se_ratio: 4,
            seed: 3,
            ..ModelSpec::default()
        }
    }

    fn bundle() -> FeatureBundle {
        let s = synthesize_series(60, 1, default_synthetic_start()).unwrap();
        let stats = NormStats::fit(&s, &s.range()).unwrap();
        FeatureBundle::at(&s, 200, &stats).unwrap()
    }

    #[test]
    fn paper_defaults_have_22_hidden_layers() {
        assert_eq!(ModelSpec::default().hidden_depth(), 22);
    }

    #[test]
    fn danet_and_ann_share_parameter_shapes() {
        let spec = ModelSpec::default();
        let a = Network::new(spec.clone()).unwrap();
        let b = Network::new(spec.as_plain()).unwrap();
        assert_eq!(a.decls(), b.decls());
        assert_eq!(a.parameter_count(), b.parameter_count());
    }

    #[test]
    fn scalar_and_deterministic() {
        let spec = small_spec();
        let net = Network::new(spec.clone()).unwrap();
        let store = net
            .init(&InitConfig {
                sd: 0.2,
                truncation: 2.0,
            })
            .unwrap();
        let b = bundle();
        let y1 = danet_forward(&spec, &store, &b).unwrap();
        let y2 = danet_forward(&spec, &store, &b).unwrap();
        assert_eq!(y1.to_bits(), y2.to_bits());
        assert!(y1.is_finite());
        let z = ann_forward(&spec, &store, &b).unwrap();
        assert!(z.is_finite());
        assert_ne!(y1, z);
    }

    #[test]
    fn batch_matches_single() {
        let spec = small_spec();
        let net = Network::new(spec).unwrap();
        let store = net
            .init(&InitConfig {
                sd: 0.2,
                truncation: 2.0,
            })
            .unwrap();
        let s = synthesize_series(60, 2, default_synthetic_start()).unwrap();
        let stats = NormStats::fit(&s, &s.range()).unwrap();
        let bundles: Vec<_> = (100..110)
            .map(|i| FeatureBundle::at(&s, i, &stats).unwrap())
            .collect();
        let batch = net.predict_normalized(&store, &bundles).unwrap();
        for (b, y) in bundles.iter().zip(&batch) {
            assert!((net.forward_bundle(&store, b).unwrap() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_bundle_rejected() {
        let spec = small_spec();
        let store = Network::new(spec.clone())
            .unwrap()
            .init(&InitConfig::default())
            .unwrap();
        let mut b = bundle();
        b.weekday.truncate(3);
        let e = danet_forward(&spec, &store, &b).unwrap_err().to_string();
        assert!(e.contains("weekday"), "{e}");
    }

    #[test]
    fn spec_toml_uses_exact_keys() {
        let text = ModelSpec::default().to_toml().unwrap();
        let table: toml::Table = text.parse().unwrap();
        let mut keys: Vec<_> = table.keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "block_count",
                "combine_rule",
                "kernel_heights",
                "se_ratio",
                "seed",
                "width"
            ]
        );
        assert_eq!(ModelSpec::from_toml(&text).unwrap(), ModelSpec::default());
        assert!(ModelSpec::from_toml("width = 0\ncombine_rule='average'\nblock_count=1\nse_ratio=1\nkernel_heights=[1]\nseed=0").is_err());
    }
}
