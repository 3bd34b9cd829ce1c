use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::net::SceneInput;
use crate::tensor::{ParamId, ParamStore, Session};

use super::model::DoremiModel;
use super::trainer::Evaluation;
use super::TrainError;

/// Breakdown of the parameters a token exercises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAudit {
    /// Backbone without the FFNs that mixture layers replace.
    pub backbone: usize,
    /// Segmentation head and class table.
    pub head: usize,
    pub re: usize,
    /// Gates, spatial routing convolutions, domain MLPs and one domain vector per layer.
    pub routing: usize,
    /// Parameters of one expert, per layer.
    pub expert: Vec<usize>,
    /// Mean number of active experts per token, per layer.
    pub mean_k: Vec<f64>,
    pub activated: f64,
    /// Every parameter the forward pass can touch.
    pub total: usize,
}

fn numel(store: &ParamStore, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.get(id).len()).sum()
}

/// Mean active experts per token for each layer of `eval`.
pub fn mean_active(eval: &Evaluation) -> Vec<f64> {
    eval.counts
        .iter()
        .zip(&eval.traces)
        .map(|(c, t)| c.iter().sum::<f64>() / t.len().max(1) as f64)
        .collect()
}

pub fn param_audit(model: &DoremiModel, mean_k: &[f64]) -> ParamAudit {
    let st = &model.store;
    let mut layer_ids: Vec<ParamId> = Vec::new();
    let (mut re, mut routing, mut expert) = (0, 0, Vec::new());
    for l in &model.layers {
        let e_ids: Vec<ParamId> = l.bank.experts.iter().flat_map(|e| e.params()).collect();
        let r_ids = l.re_params();
        let mut g_ids = l.gate.params();
        if let Some(c) = &l.spatial {
            g_ids.extend(c.params());
        }
        if let Some(d) = &l.domains {
            g_ids.extend(d.mlp.params());
            routing += crate::moe::DOMAIN_DIM;
            layer_ids.push(d.table);
        }
        re += numel(st, &r_ids);
        routing += numel(st, &g_ids);
        expert.push(l.bank.expert_numel(st));
        layer_ids.extend(e_ids);
        layer_ids.extend(r_ids);
        layer_ids.extend(g_ids);
    }
    let head_ids: Vec<ParamId> = model.head.params().into_iter().chain([model.classes.table]).collect();
    let head = numel(st, &head_ids);
    let replaced = numel(st, &model.replaced_ffn_params());
    let backbone = st.numel() - numel(st, &layer_ids) - head - replaced;
    let experts_active: f64 = expert.iter().zip(mean_k).map(|(&e, &k)| e as f64 * k).sum();
    let activated = (backbone + head + re + routing) as f64 + experts_active;
    let total = st.numel() - replaced;
    ParamAudit {
        backbone,
        head,
        re,
        routing,
        expert,
        mean_k: mean_k.to_vec(),
        activated,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub audit: ParamAudit,
    /// Median over timed passes.
    pub scenes_per_s: f64,
    pub pass_seconds: Vec<f64>,
}

/// Times `passes` forward sweeps over `scenes`.
pub fn bench(model: &DoremiModel, scenes: &[&SceneInput], eval: &Evaluation, passes: usize) -> Result<BenchReport, TrainError> {
    let mut secs = Vec::with_capacity(passes);
    for _ in 0..passes.max(1) {
        let t = Instant::now();
        for input in scenes {
            let mut s = Session::new(&model.store);
            model.forward(&mut s, input, model.domain_key(input.domain_id))?;
        }
        secs.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = secs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(BenchReport {
        audit: param_audit(model, &mean_active(eval)),
        scenes_per_s: scenes.len() as f64 / median.max(1e-12),
        pass_seconds: secs,
    })
}
