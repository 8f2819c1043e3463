//! Combination rules, dense average blocks, squeeze-and-excitation and the
//! full forecasting network.

mod blocks;
mod combine;
mod growth;
mod network;

pub use blocks::{
    block_decls, dense, dense_block, dense_decls, layer_stack, materialize, se_block, se_pooled,
    stack_decls, Activation, BlockConnection, InitConfig, ParamDecl, ParamKind, SeBlockSpec,
    BLOCK_LAYERS,
};
pub use combine::{combine, CombineRule};
pub use growth::{gradient_growth_study, GrowthRow, GrowthStudyConfig};
pub use network::{ann_forward, danet_forward, ModelInputs, ModelSpec, Network, KERNEL_WIDTH};
