use crate::checkpoint::{copy_matching, Checkpoint};
use crate::moe::{DomainKey, MoeError, MoeForward, MoeLayer, RoutingDecision};
use crate::net::{Backbone, BlockRef, FfnHook, Level, Linear, SceneInput};
use crate::rng;
use crate::synth::NUM_CLASSES;
use crate::tensor::{ParamId, ParamStore, Session, TensorError, Var};

use super::losses::ClassEmbeddingTable;
use super::{TrainConfig, TrainError};

pub const MODEL_KIND: &str = "doremi-model";

/// Backbone, mixture layers, and the class-embedding head.
#[derive(Debug, Clone, PartialEq)]
pub struct DoremiModel {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub layers: Vec<MoeLayer>,
    pub head: Linear,
    pub classes: ClassEmbeddingTable,
    pub domain_ids: Vec<u32>,
}

/// One forward pass.
pub struct ModelOutput {
    /// Per-point head outputs.
    pub embeddings: Var,
    /// Per-point class logits.
    pub logits: Var,
    pub balance: Vec<Var>,
    /// Gate logits per mixture layer.
    pub gate_logits: Vec<Var>,
    pub routes: Vec<(BlockRef, RoutingDecision)>,
}

struct MoeHook<'m> {
    layers: &'m [MoeLayer],
    key: DomainKey,
    out: Vec<MoeForward>,
}

fn as_tensor_error(e: MoeError) -> TensorError {
    match e {
        MoeError::Tensor(t) => t,
        other => TensorError::Shape {
            op: "moe",
            detail: other.to_string(),
        },
    }
}

impl FfnHook for MoeHook<'_> {
    fn ffn(&mut self, s: &mut Session, at: BlockRef, x: Var, level: &Level, _: u32) -> crate::tensor::Result<Option<Var>> {
        let Some(layer) = self.layers.iter().find(|l| l.at == at) else {
            return Ok(None);
        };
        let f = layer.forward(s, x, level, self.key).map_err(as_tensor_error)?;
        let out = f.out;
        self.out.push(f);
        Ok(Some(out))
    }
}

impl DoremiModel {
    /// Fresh model; backbone weights come from `pretrained` when given.
    pub fn build(cfg: &TrainConfig, domain_ids: &[u32], pretrained: Option<&Checkpoint>) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = rng::stream(cfg.seed, &[rng::tag("model"), rng::tag("backbone")]);
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut init);
        if let Some(ckpt) = pretrained {
            let n = copy_matching(&mut store, &ckpt.store)?;
            if n != store.len() {
                return Err(TrainError::Config(format!(
                    "pretrained checkpoint covers {n} of {} backbone parameters",
                    store.len()
                )));
            }
        }
        let mut layers = Vec::new();
        if let Some(moe) = &cfg.moe {
            for at in cfg.placement() {
                let ffn = backbone.block(at).expect("placement validated").ffn.clone();
                let mut r = rng::stream(cfg.seed, &[rng::tag("model"), rng::tag("moe"), at.stage as u64, at.block as u64]);
                layers.push(MoeLayer::from_pretrained(
                    &mut store,
                    at,
                    &ffn,
                    moe,
                    domain_ids,
                    cfg.backbone.kernel_extent,
                    &mut r,
                )?);
            }
        }
        let mut r = rng::stream(cfg.seed, &[rng::tag("model"), rng::tag("head")]);
        let head = Linear::new(&mut store, "seg.head", backbone.out_width(), cfg.embed_dim, &mut r);
        let classes = ClassEmbeddingTable::new(&mut store, "seg.classes", NUM_CLASSES, cfg.embed_dim, cfg.tau, &mut r);
        Ok(Self {
            store,
            backbone,
            layers,
            head,
            classes,
            domain_ids: domain_ids.to_vec(),
        })
    }

    /// Rebuilds the structure from `cfg` and loads every parameter from `ckpt`.
    pub fn from_checkpoint(cfg: &TrainConfig, domain_ids: &[u32], ckpt: &Checkpoint) -> Result<Self, TrainError> {
        if ckpt.kind != MODEL_KIND {
            return Err(TrainError::Config(format!("expected a {MODEL_KIND} checkpoint, got {}", ckpt.kind)));
        }
        let mut m = Self::build(cfg, domain_ids, None)?;
        let n = copy_matching(&mut m.store, &ckpt.store)?;
        if n != m.store.len() || ckpt.store.len() != m.store.len() {
            return Err(TrainError::Config("checkpoint does not match the configured model".into()));
        }
        Ok(m)
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let meta = serde_json::json!({ "config": cfg, "domains": self.domain_ids });
        Checkpoint::new(MODEL_KIND, meta, self.store.clone())
    }

    /// `Known` for training domains, `Unseen` otherwise.
    pub fn domain_key(&self, domain: u32) -> DomainKey {
        if self.domain_ids.contains(&domain) {
            DomainKey::Known(domain)
        } else {
            DomainKey::Unseen
        }
    }

    pub fn forward(&self, s: &mut Session, input: &SceneInput, key: DomainKey) -> Result<ModelOutput, TrainError> {
        let mut hook = MoeHook {
            layers: &self.layers,
            key,
            out: Vec::with_capacity(self.layers.len()),
        };
        let f = self.backbone.forward(s, input, &mut hook)?;
        let e = self.head.forward(s, f)?;
        let embeddings = s.graph.index_select(e, input.point_to_voxel.clone())?;
        let logits = self.classes.logits(s, embeddings)?;
        let mut balance = Vec::with_capacity(hook.out.len());
        let mut routes = Vec::with_capacity(hook.out.len());
        let mut gate_logits = Vec::with_capacity(hook.out.len());
        for (layer, f) in self.layers.iter().zip(hook.out) {
            balance.push(f.balance);
            gate_logits.push(f.logits);
            routes.push((layer.at, f.decision));
        }
        Ok(ModelOutput {
            embeddings,
            logits,
            balance,
            gate_logits,
            routes,
        })
    }

    /// FFNs of blocks whose sublayer a mixture layer replaces; unused by the forward pass.
    pub fn replaced_ffn_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| self.backbone.block(l.at).expect("layer block").ffn.params())
            .collect()
    }

    pub fn re_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(MoeLayer::re_params).collect()
    }

    /// Parameters of every trainable expert, one list per expert, in layer order.
    pub fn expert_params(&self) -> Vec<Vec<ParamId>> {
        self.layers
            .iter()
            .flat_map(|l| l.bank.experts.iter().map(|e| e.params()))
            .collect()
    }

    /// Restores unit norm of the class table after an update.
    pub fn project_constraints(&mut self) {
        self.classes.renormalize(&mut self.store);
    }
}
