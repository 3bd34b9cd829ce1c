use std::rc::Rc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::net::{BlockRef, Level, Mlp, SparseConvLayer};
use crate::rng::Rng;
use crate::sparse::{build_rules, Coord, SparseVoxelGrid};
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

use super::balance::balance_loss_graph;
use super::routing::{allocate, Allocation, RoutingDecision};
use super::MoeError;

/// Width of the learnable per-domain vector `d`.
pub const DOMAIN_DIM: usize = 32;
const DOMAIN_INIT_STD: f64 = 0.02;

/// Where routing logits come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingInput {
    /// Gate sees the token features directly.
    Token,
    /// Gate sees `conv(f) + e_d`.
    DomainSpatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub experts: usize,
    pub allocation: Allocation,
    pub routing: RoutingInput,
    /// Add the frozen representation expert to the output.
    pub use_re: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 8,
            allocation: Allocation::Entropy { k_min: 1, k_max: 8 },
            routing: RoutingInput::DomainSpatial,
            use_re: true,
        }
    }
}

/// Which domain vector to add to the routing input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKey {
    Known(u32),
    /// Mean of all training-domain embeddings.
    Unseen,
}

/// Per-domain embeddings `d` and the projection producing `e_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEmbeddingTable {
    pub ids: Vec<u32>,
    pub table: ParamId,
    pub mlp: Mlp,
}

impl DomainEmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, ids: &[u32], width: usize, rng: &mut Rng) -> Self {
        let n = Normal::new(0.0, DOMAIN_INIT_STD).unwrap();
        let data = (0..ids.len() * DOMAIN_DIM).map(|_| n.sample(rng)).collect();
        let table = store.add(
            format!("{name}.table"),
            Tensor::new(vec![ids.len(), DOMAIN_DIM], data).expect("table shape"),
        );
        let mlp = Mlp::new(store, &format!("{name}.mlp"), &[DOMAIN_DIM, width, width], rng);
        Self {
            ids: ids.to_vec(),
            table,
            mlp,
        }
    }

    pub fn row_of(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&d| d == id)
    }

    /// `d` for `key`, shape `1×DOMAIN_DIM`.
    pub fn embedding(&self, s: &mut Session, key: DomainKey) -> Result<Var, MoeError> {
        let t = s.p(self.table);
        match key {
            DomainKey::Known(id) => {
                let row = self.row_of(id).ok_or(MoeError::UnknownDomain(id))?;
                Ok(s.graph.index_select(t, Rc::from(vec![row]))?)
            }
            DomainKey::Unseen => {
                if self.ids.is_empty() {
                    return Err(MoeError::EmptyDomainTable);
                }
                Ok(s.graph.mean_rows(t)?)
            }
        }
    }

    /// `e_d = mlp(d)`, shape `1×D`.
    pub fn project(&self, s: &mut Session, key: DomainKey) -> Result<Var, MoeError> {
        let d = self.embedding(s, key)?;
        Ok(self.mlp.forward(s, d)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.table];
        p.extend(self.mlp.params());
        p
    }
}

/// `K` trainable experts and an optional frozen representation expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<Mlp>,
    pub re: Option<Mlp>,
}

impl ExpertBank {
    /// Duplicates `source` into `K` trainable copies and, if `with_re`, one frozen copy.
    pub fn from_ffn(store: &mut ParamStore, name: &str, source: &Mlp, k: usize, with_re: bool) -> Self {
        let experts = (0..k).map(|j| source.duplicate(store, &format!("{name}.expert{j}"), false)).collect();
        let re = with_re.then(|| source.duplicate(store, &format!("{name}.re"), true));
        Self { experts, re }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Parameter count of one expert.
    pub fn expert_numel(&self, store: &ParamStore) -> usize {
        self.experts[0].params().iter().map(|&p| store.get(p).len()).sum()
    }
}

/// Results of one layer evaluation on the graph.
pub struct MoeForward {
    pub out: Var,
    pub z: Var,
    pub logits: Var,
    pub probs: Var,
    pub weights: Var,
    pub f_do: Var,
    pub f_re: Option<Var>,
    pub balance: Var,
    pub decision: RoutingDecision,
}

/// One mixture layer placed at a backbone block.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub at: BlockRef,
    pub width: usize,
    pub cfg: MoeConfig,
    pub bank: ExpertBank,
    pub gate: Mlp,
    pub spatial: Option<SparseConvLayer>,
    pub domains: Option<DomainEmbeddingTable>,
}

impl MoeLayer {
    /// Experts (and the frozen expert) start as copies of `pretrained`; routing
    /// parts are freshly initialized.
    pub fn from_pretrained(
        store: &mut ParamStore,
        at: BlockRef,
        pretrained: &Mlp,
        cfg: &MoeConfig,
        domain_ids: &[u32],
        extent: usize,
        rng: &mut Rng,
    ) -> Result<Self, MoeError> {
        cfg.allocation.validate(cfg.experts)?;
        let width = pretrained.din();
        if pretrained.dout() != width {
            return Err(MoeError::Dimension(format!(
                "pretrained FFN maps {} -> {}",
                width,
                pretrained.dout()
            )));
        }
        let name = format!("moe.s{}b{}", at.stage, at.block);
        let bank = ExpertBank::from_ffn(store, &name, pretrained, cfg.experts, cfg.use_re);
        let gate = Mlp::new(store, &format!("{name}.gate"), &[width, width, cfg.experts], rng);
        let (spatial, domains) = match cfg.routing {
            RoutingInput::Token => (None, None),
            RoutingInput::DomainSpatial => (
                Some(SparseConvLayer::new(store, &format!("{name}.dsr"), extent, width, width, rng)),
                Some(DomainEmbeddingTable::new(store, &format!("{name}.domain"), domain_ids, width, rng)),
            ),
        };
        Ok(Self {
            at,
            width,
            cfg: cfg.clone(),
            bank,
            gate,
            spatial,
            domains,
        })
    }

    /// `z = f′ + e_d` (or `f` for token routing).
    pub fn routing_input(&self, s: &mut Session, f: Var, level: &Level, domain: DomainKey) -> Result<Var, MoeError> {
        let (Some(conv), Some(table)) = (&self.spatial, &self.domains) else {
            return Ok(f);
        };
        let fp = conv.forward(s, f, level.rules.clone())?;
        let ed = table.project(s, domain)?;
        Ok(s.graph.add_row(fp, ed)?)
    }

    pub fn gate_logits(&self, s: &mut Session, z: Var) -> Result<Var, MoeError> {
        Ok(self.gate.forward(s, z)?)
    }

    /// `Σ_j w[:,j] ⊙ E_j(f)`, evaluating each expert only on its active tokens.
    pub fn expert_mix(&self, s: &mut Session, f: Var, weights: Var, decision: &RoutingDecision) -> Result<Var, MoeError> {
        let n = decision.n_tokens();
        let mut acc: Option<Var> = None;
        for (j, tokens) in decision.tokens_per_expert().into_iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let idx: Rc<[usize]> = tokens.into();
            let xj = s.graph.index_select(f, idx.clone())?;
            let yj = self.bank.experts[j].forward(s, xj)?;
            let wj = s.graph.select_entries(weights, idx.clone(), j)?;
            let yj = s.graph.scale_rows(yj, wj)?;
            let part = s.graph.scatter_add(yj, idx, n)?;
            acc = Some(match acc {
                Some(a) => s.graph.add(a, part)?,
                None => part,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => {
                let zero = Tensor::zeros(&[n, self.width]);
                Ok(s.graph.constant(zero))
            }
        }
    }

    /// Every expert on every token, then weighted; reference for [`Self::expert_mix`].
    pub fn expert_mix_dense(&self, s: &mut Session, f: Var, weights: Var) -> Result<Var, MoeError> {
        let all: Rc<[usize]> = (0..s.graph.value(f).rows()).collect();
        let mut acc: Option<Var> = None;
        for (j, e) in self.bank.experts.iter().enumerate() {
            let y = e.forward(s, f)?;
            let wj = s.graph.select_entries(weights, all.clone(), j)?;
            let y = s.graph.scale_rows(y, wj)?;
            acc = Some(match acc {
                Some(a) => s.graph.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or(MoeError::Dimension("empty expert bank".into()))
    }

    pub fn forward(&self, s: &mut Session, f: Var, level: &Level, domain: DomainKey) -> Result<MoeForward, MoeError> {
        let z = self.routing_input(s, f, level, domain)?;
        let logits = self.gate_logits(s, z)?;
        let decision = allocate(s.graph.value(logits), self.cfg.allocation)?;
        let probs = s.graph.softmax_last(logits)?;
        let weights = s.graph.mul_const(probs, Rc::new(decision.mask()))?;
        let f_do = self.expert_mix(s, f, weights, &decision)?;
        let f_re = match &self.bank.re {
            Some(re) => Some(re.forward(s, f)?),
            None => None,
        };
        let out = match f_re {
            Some(r) => s.graph.add(f_do, r)?,
            None => f_do,
        };
        let balance = balance_loss_graph(&mut s.graph, probs, &decision)?;
        Ok(MoeForward {
            out,
            z,
            logits,
            probs,
            weights,
            f_do,
            f_re,
            balance,
            decision,
        })
    }

    pub fn trainable_params(&self, store: &ParamStore) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.bank.experts.iter().flat_map(Mlp::params).collect();
        p.extend(self.gate.params());
        if let Some(c) = &self.spatial {
            p.extend(c.params());
        }
        if let Some(d) = &self.domains {
            p.extend(d.params());
        }
        p.retain(|&id| !store.is_frozen(id));
        p
    }

    pub fn re_params(&self) -> Vec<ParamId> {
        self.bank.re.as_ref().map(Mlp::params).unwrap_or_default()
    }
}

/// Point-level tokens on their voxels.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub features: Tensor,
    pub coords: Vec<Coord>,
    pub domain_id: u32,
}

impl TokenBatch {
    pub fn level(&self, extent: usize) -> Result<Level, MoeError> {
        let n = self.coords.len();
        let grid = SparseVoxelGrid::new(self.coords.clone(), Tensor::zeros(&[n, 0]), 1.0)?;
        let rules = Rc::new(build_rules(&grid, extent)?);
        Ok(Level { grid, rules, pool: None })
    }
}

/// Plain-tensor view of one layer evaluation.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub z: Tensor,
    pub decision: RoutingDecision,
    pub f_do: Tensor,
    pub f_re: Option<Tensor>,
    pub out: Tensor,
    pub balance: f64,
}

impl MoeLayer {
    /// Evaluates the layer on `tokens` without recording gradients for the caller.
    pub fn evaluate(&self, store: &ParamStore, tokens: &TokenBatch, domain: DomainKey, extent: usize) -> Result<LayerOutput, MoeError> {
        let level = tokens.level(extent)?;
        let mut s = Session::new(store);
        let f = s.graph.constant(tokens.features.clone());
        let r = self.forward(&mut s, f, &level, domain)?;
        let v = |x: Var| s.graph.value(x).clone();
        Ok(LayerOutput {
            z: v(r.z),
            f_do: v(r.f_do),
            f_re: r.f_re.map(v),
            out: v(r.out),
            balance: s.graph.value(r.balance).data()[0],
            decision: r.decision,
        })
    }
}

/// `e_avg`: the projection of the mean training-domain embedding.
pub fn unseen_domain_embedding(store: &ParamStore, table: &DomainEmbeddingTable) -> Result<Tensor, MoeError> {
    let mut s = Session::new(store);
    let e = table.project(&mut s, DomainKey::Unseen)?;
    Ok(s.graph.value(e).clone())
}
