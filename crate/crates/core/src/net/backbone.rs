use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::synth::POINT_FEATURES;
use crate::tensor::{ParamStore, Result, Session, Var};

use super::geometry::{GeometrySpec, Level, SceneInput};
use super::layers::{ffn_dims, Linear, Mlp, Norm, SparseConvLayer};

/// Sparse U-Net shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_dim: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub kernel_extent: usize,
    pub pool_factor: i32,
    pub voxel_size: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_dim: POINT_FEATURES,
            widths: vec![16, 24, 32],
            blocks: vec![2, 2, 2],
            kernel_extent: 3,
            pool_factor: 2,
            voxel_size: 0.05,
        }
    }
}

impl BackboneConfig {
    pub fn geometry(&self) -> GeometrySpec {
        GeometrySpec {
            voxel_size: self.voxel_size,
            levels: self.widths.len(),
            extent: self.kernel_extent,
            pool_factor: self.pool_factor,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Final block of every stage.
    pub fn final_blocks(&self) -> Vec<BlockRef> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(stage, &n)| BlockRef { stage, block: n - 1 })
            .collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err("widths and blocks must be nonempty and equally long".into());
        }
        if self.blocks.iter().any(|&b| b == 0) || self.widths.iter().any(|&w| w == 0) {
            return Err("zero-sized stage".into());
        }
        if self.kernel_extent % 2 == 0 {
            return Err("kernel extent must be odd".into());
        }
        if self.pool_factor < 2 || !(self.voxel_size > 0.0) {
            return Err("pool factor ≥ 2 and positive voxel size required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockRef {
    pub stage: usize,
    pub block: usize,
}

impl BlockRef {
    pub fn ffn_name(&self) -> String {
        format!("stage{}.block{}.ffn", self.stage, self.block)
    }
}

/// Lets a caller replace the feed-forward sublayer of chosen blocks.
pub trait FfnHook {
    /// `x` is the normalized block input. Returning `None` keeps the block's own FFN.
    fn ffn(&mut self, s: &mut Session, at: BlockRef, x: Var, level: &Level, domain: u32) -> Result<Option<Var>>;
}

pub struct NoHook;

impl FfnHook for NoHook {
    fn ffn(&mut self, _: &mut Session, _: BlockRef, _: Var, _: &Level, _: u32) -> Result<Option<Var>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: SparseConvLayer,
    pub norm: Norm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub down: Option<Linear>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: Linear,
    pub stages: Vec<Stage>,
    /// `up[s]` maps stage `s+1` width to stage `s` width.
    pub up: Vec<Linear>,
    pub out_norm: Norm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let w = &cfg.widths;
        let stem = Linear::new(store, "stem", cfg.in_dim, w[0], rng);
        let stages = (0..cfg.stages())
            .map(|s| {
                let down = (s > 0).then(|| Linear::new(store, &format!("stage{s}.down"), w[s - 1], w[s], rng));
                let blocks = (0..cfg.blocks[s])
                    .map(|b| {
                        let p = format!("stage{s}.block{b}");
                        Block {
                            conv: SparseConvLayer::new(store, &format!("{p}.conv"), cfg.kernel_extent, w[s], w[s], rng),
                            norm: Norm::new(store, &format!("{p}.norm"), w[s]),
                            ffn: Mlp::new(store, &format!("{p}.ffn"), &ffn_dims(w[s]), rng),
                        }
                    })
                    .collect();
                Stage { down, blocks }
            })
            .collect();
        let up = (0..cfg.stages() - 1)
            .map(|s| Linear::new(store, &format!("up{s}"), w[s + 1], w[s], rng))
            .collect();
        let out_norm = Norm::new(store, "out_norm", w[0]);
        Self {
            cfg: cfg.clone(),
            stem,
            stages,
            up,
            out_norm,
        }
    }

    pub fn block(&self, at: BlockRef) -> Option<&Block> {
        self.stages.get(at.stage)?.blocks.get(at.block)
    }

    pub fn out_width(&self) -> usize {
        self.cfg.widths[0]
    }

    /// Level-0 voxel features of width `widths[0]`.
    pub fn forward(&self, s: &mut Session, input: &SceneInput, hook: &mut dyn FfnHook) -> Result<Var> {
        let x0 = s.graph.constant(input.features.clone());
        let mut x = self.stem.forward(s, x0)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate() {
            let level = &input.levels[si];
            if let Some(down) = &stage.down {
                let map = input.levels[si - 1].pool.as_ref().expect("pooling map for stage");
                x = s.graph.scatter_mean(x, map.parent_to_child.clone(), map.n_children())?;
                x = down.forward(s, x)?;
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                let c = block.conv.forward(s, x, level.rules.clone())?;
                let h = s.graph.add(x, c)?;
                let n = block.norm.forward(s, h)?;
                let at = BlockRef { stage: si, block: bi };
                let f = match hook.ffn(s, at, n, level, input.domain_id)? {
                    Some(f) => f,
                    None => block.ffn.forward(s, n)?,
                };
                x = s.graph.add(h, f)?;
            }
            skips.push(x);
        }
        let mut d = skips.pop().expect("at least one stage");
        for si in (0..skips.len()).rev() {
            let map = input.levels[si].pool.as_ref().expect("pooling map for decoder");
            d = s.graph.index_select(d, map.parent_to_child.clone())?;
            d = self.up[si].forward(s, d)?;
            d = s.graph.add(d, skips[si])?;
        }
        self.out_norm.forward(s, d)
    }
}
