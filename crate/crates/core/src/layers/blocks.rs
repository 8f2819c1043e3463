use serde::{Deserialize, Serialize};

use super::combine::{combine, CombineRule};
use crate::autodiff::{truncated_normal_with, Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Fully connected layers per dense average block.
pub const BLOCK_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A parameter the network needs, before initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamDecl {
    fn weight(name: String, shape: Vec<usize>) -> Self {
        Self {
            name,
            shape,
            kind: ParamKind::Weight,
        }
    }

    fn bias(name: String, width: usize) -> Self {
        Self {
            name,
            shape: vec![width],
            kind: ParamKind::Bias,
        }
    }
}

/// Weight initialization: truncated normal weights, zero biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub sd: f64,
    /// Truncation half-width in standard deviations.
    pub truncation: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            sd: 1.0,
            truncation: crate::autodiff::DEFAULT_TRUNCATION,
        }
    }
}

/// Create and initialize every declared parameter, in declaration order.
pub fn materialize<R: rand::Rng + ?Sized>(
    decls: &[ParamDecl],
    init: &InitConfig,
    rng: &mut R,
) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    for d in decls {
        let value = match d.kind {
            ParamKind::Weight => truncated_normal_with(&d.shape, init.sd, init.truncation, rng)?,
            ParamKind::Bias => Tensor::zeros(&d.shape),
        };
        store.insert(d.name.clone(), value)?;
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

pub fn dense_decls(prefix: &str, inputs: usize, outputs: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::weight(format!("{prefix}.weight"), vec![inputs, outputs]),
        ParamDecl::bias(format!("{prefix}.bias"), outputs),
    ]
}

/// `act(x · W + b)` for `x: [batch, in]`.
pub fn dense(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: NodeId,
    act: Activation,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w)?;
    let z = g.add_bias(xw, b)?;
    Ok(match act {
        Activation::Linear => z,
        Activation::Relu => g.relu(z),
        Activation::Sigmoid => g.sigmoid(z),
    })
}

/// How the fully connected layers inside a block are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockConnection {
    /// Dense average connection.
    Average,
    Additive,
    Concat,
    /// Plain feed-forward chain (no combination).
    Plain,
}

impl BlockConnection {
    pub fn rule(self) -> Option<CombineRule> {
        match self {
            BlockConnection::Average => Some(CombineRule::Average),
            BlockConnection::Additive => Some(CombineRule::Additive),
            BlockConnection::Concat => Some(CombineRule::Concat),
            BlockConnection::Plain => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockConnection::Average => "average",
            BlockConnection::Additive => "additive",
            BlockConnection::Concat => "concat",
            BlockConnection::Plain => "plain",
        }
    }
}

/// Input width of layer `layer` (1-based) of a stack under `connection`.
pub fn layer_input_width(connection: BlockConnection, width: usize, layer: usize) -> usize {
    match connection {
        BlockConnection::Concat => layer * width,
        _ => width,
    }
}

pub fn stack_decls(
    prefix: &str,
    width: usize,
    layers: usize,
    connection: BlockConnection,
) -> Vec<ParamDecl> {
    (1..=layers)
        .flat_map(|l| {
            dense_decls(
                &format!("{prefix}.layer{l}"),
                layer_input_width(connection, width, l),
                width,
            )
        })
        .collect()
}

pub fn block_decls(prefix: &str, width: usize, connection: BlockConnection) -> Vec<ParamDecl> {
    stack_decls(prefix, width, BLOCK_LAYERS, connection)
}

/// A stack of ReLU fully connected layers `H_ℓ` wired by `connection`,
/// with the stack input as `x₀`. Returns `x_layers`.
///
/// * average:  `x_ℓ = (H_ℓ(x_{ℓ−1}) + Σ_{i<ℓ} x_i) / (ℓ+1)`
/// * additive: `x_ℓ = H_ℓ(x_{ℓ−1}) + Σ_{i<ℓ} x_i`
/// * concat:   `x_ℓ = H_ℓ([x_0, …, x_{ℓ−1}])`
/// * plain:    `x_ℓ = H_ℓ(x_{ℓ−1})`
pub fn layer_stack(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x0: NodeId,
    layers: usize,
    connection: BlockConnection,
) -> Result<NodeId> {
    let mut history = vec![x0];
    for l in 1..=layers {
        let prev = *history.last().unwrap();
        let input = match connection {
            BlockConnection::Concat if history.len() > 1 => g.concat(&history)?,
            _ => prev,
        };
        let h = dense(
            g,
            store,
            &format!("{prefix}.layer{l}"),
            input,
            Activation::Relu,
        )?;
        let x = match connection {
            BlockConnection::Average | BlockConnection::Additive => {
                combine(g, connection.rule().unwrap(), &history, h)?
            }
            BlockConnection::Concat | BlockConnection::Plain => h,
        };
        history.push(x);
    }
    Ok(*history.last().unwrap())
}

/// Four-layer block; the combination history restarts at the block input.
pub fn dense_block(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x0: NodeId,
    connection: BlockConnection,
) -> Result<NodeId> {
    let width = *g.value(x0).shape().last().unwrap();
    let expected = store
        .get(&format!("{prefix}.layer1.weight"))
        .map(|w| w.shape()[0])
        .ok_or_else(|| Error::contract(format!("no parameters for block `{prefix}`")))?;
    if width != expected {
        return Err(Error::shape(
            "dense_block",
            g.value(x0).shape(),
            &[expected],
        ));
    }
    layer_stack(g, store, prefix, x0, BLOCK_LAYERS, connection)
}

/// Squeeze-and-excitation geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeBlockSpec {
    pub channels: usize,
    pub reduction_ratio: usize,
}

impl SeBlockSpec {
    pub fn hidden_width(&self) -> usize {
        (self.channels / self.reduction_ratio.max(1)).max(1)
    }

    pub fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        let mut d = dense_decls(
            &format!("{prefix}.squeeze"),
            self.channels,
            self.hidden_width(),
        );
        d.extend(dense_decls(
            &format!("{prefix}.excite"),
            self.hidden_width(),
            self.channels,
        ));
        d
    }
}

fn check_se_params(store: &ParameterStore, prefix: &str, shape: &[usize]) -> Result<()> {
    let channels = *shape.last().unwrap();
    let squeeze_w = store
        .get(&format!("{prefix}.squeeze.weight"))
        .ok_or_else(|| Error::contract(format!("no parameters for SE block `{prefix}`")))?;
    if squeeze_w.shape()[0] != channels {
        return Err(Error::shape("se_block", shape, squeeze_w.shape()));
    }
    Ok(())
}

fn excite(g: &mut Graph, store: &ParameterStore, prefix: &str, pooled: NodeId) -> Result<NodeId> {
    let s = dense(
        g,
        store,
        &format!("{prefix}.squeeze"),
        pooled,
        Activation::Relu,
    )?;
    dense(
        g,
        store,
        &format!("{prefix}.excite"),
        s,
        Activation::Sigmoid,
    )
}

/// Channel recalibration of `[N,H,W,C]` (or `[H,W,C]`) feature maps:
/// spatial average → ReLU layer → sigmoid layer → per-channel scale.
pub fn se_block(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    features: NodeId,
) -> Result<NodeId> {
    let shape = g.value(features).shape().to_vec();
    check_se_params(store, prefix, &shape)?;
    let channels = *shape.last().unwrap();
    let pooled = g.spatial_mean(features)?;
    let unbatched = shape.len() == 3;
    let pooled = if unbatched {
        g.reshape(pooled, &[1, channels])?
    } else {
        pooled
    };
    let mut weights = excite(g, store, prefix, pooled)?;
    if unbatched {
        weights = g.reshape(weights, &[channels])?;
    }
    g.channel_scale(features, weights)
}

/// `spatial_mean(se_block(x))` without materialising the rescaled maps:
/// a per-channel scale commutes with the spatial average.
pub fn se_pooled(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    features: NodeId,
) -> Result<NodeId> {
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("se_pooled", &shape, &[]));
    }
    check_se_params(store, prefix, &shape)?;
    let pooled = g.spatial_mean(features)?;
    let weights = excite(g, store, prefix, pooled)?;
    g.mul(pooled, weights)
}
