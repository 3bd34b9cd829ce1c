use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::net::{Backbone, BlockRef, Mlp};
use crate::tensor::ParamStore;

pub const PRETRAINED_FFN_KIND: &str = "pretrained-ffn";

/// The FFN of every block in `at`, keyed by block name.
pub fn export_pretrained_ffn(store: &ParamStore, backbone: &Backbone, at: &[BlockRef]) -> Result<Checkpoint, CheckpointError> {
    let mut out = ParamStore::new();
    let mut dims = Vec::new();
    for &b in at {
        let block = backbone
            .block(b)
            .ok_or_else(|| CheckpointError::Format(format!("no block {}", b.ffn_name())))?;
        for id in block.ffn.params() {
            out.add(store.name(id), store.get(id).clone());
        }
        dims.push(serde_json::json!({"stage": b.stage, "block": b.block, "width": block.ffn.din()}));
    }
    Ok(Checkpoint::new(PRETRAINED_FFN_KIND, serde_json::json!({ "blocks": dims }), out))
}

/// Writes the exported weights for block `at` into `target`.
pub fn import_pretrained_ffn(ckpt: &Checkpoint, at: BlockRef, target: &Mlp, store: &mut ParamStore) -> Result<(), CheckpointError> {
    if ckpt.kind != PRETRAINED_FFN_KIND {
        return Err(CheckpointError::Format(format!("expected {PRETRAINED_FFN_KIND}, got {}", ckpt.kind)));
    }
    let prefix = at.ffn_name();
    for (i, layer) in target.layers.iter().enumerate() {
        for (suffix, id) in [("w", layer.weight), ("b", layer.bias)] {
            let name = format!("{prefix}.l{i}.{suffix}");
            let src = ckpt
                .store
                .find(&name)
                .ok_or_else(|| CheckpointError::Format(format!("missing {name}")))?;
            let t = ckpt.store.get(src);
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::Format(format!("{name}: shape {:?}", t.shape())));
            }
            *store.get_mut(id) = t.clone();
        }
    }
    Ok(())
}
