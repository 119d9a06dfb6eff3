//! Parameterized layers with parameter and MAC introspection.

pub mod layers;
pub mod params;

pub use layers::{
    Activation, BatchNorm2d, Conv2d, ConvNormAct, CostTrace, LayerKind, LayerNode, Linear, Module, NormConfig,
    ResidualBlock,
};
pub use params::{Init, ParamBuilder, ParamId, ParamKind, ParamStore};

/// Exact trainable parameter count of a module, read from the store.
pub fn param_count(module: &dyn Module, store: &ParamStore) -> usize {
    module.param_ids().iter().map(|&id| store.entry(id).numel()).sum()
}

/// MAC count of a module for a given input shape (symbolic, no allocation).
pub fn macs(module: &dyn Module, input: &[usize]) -> crate::Result<u64> {
    let mut t = CostTrace::default();
    module.trace(input, &mut t)?;
    Ok(t.macs())
}
