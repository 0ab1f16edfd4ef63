//! Network specifications, parameter storage and the inference graph.

mod network;
mod spec;
mod store;

pub use network::{BlockParams, ConvBn, Gate, MixerParams, Network, StageParams};
pub use spec::{
    build_ablation, build_variant, count_flops, count_flops_fused, count_params, Ablation, Init,
    LayerCost, Mixer, ModelSpec, ParamSlot, StageSpec, Variant, VariantConfig,
};
pub use store::{init_params, is_learnable, ParamStore, ParamTensor};

use crate::error::{Error, Result};

/// Recovers the plain variant, input size and fused flag a store was built
/// for, from its tensor names and shapes.
pub fn identify_spec(store: &ParamStore) -> Result<(ModelSpec, bool)> {
    let embed = store
        .get("embed.conv.weight")
        .ok_or_else(|| Error::Store("no `embed.conv.weight` tensor".into()))?;
    let width = embed.shape.first().copied().unwrap_or(0);
    let input = store
        .iter()
        .find(|(n, _)| n.ends_with(".patsf.rpe"))
        .and_then(|(_, t)| (t.shape.len() == 3).then(|| (16 * (t.shape[1] + 1), 16 * (t.shape[2] + 1))))
        .unwrap_or((224, 224));
    let fused = store.looks_fused();
    for v in Variant::ALL {
        let cfg = v.config();
        if cfg.base_channels != width {
            continue;
        }
        let spec = ModelSpec::from_config(&cfg).with_input_size(input.0, input.1)?;
        if store.check_layout(&spec.param_layout(fused)).is_ok() {
            return Ok((spec, fused));
        }
    }
    Err(Error::NameSetMismatch {
        expected: "any variant layout".into(),
        detail: format!("stem width {width}, input {}x{}", input.0, input.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifies_variant_and_resolution() {
        let spec = build_variant("T1").unwrap().with_input_size(64, 96).unwrap();
        let store = init_params(&spec, 0).unwrap();
        let (found, fused) = identify_spec(&store).unwrap();
        assert_eq!(found, spec);
        assert!(!fused);
        let mut broken = store.clone();
        broken.remove("head.fc.bias");
        assert!(identify_spec(&broken).is_err());
    }
}
