use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::moe::{DomainKey, TraceRow};
use crate::net::{prepare_scene, BlockRef, GeometrySpec, SceneInput};
use crate::pretrain::Pretrainer;
use crate::rng;
use crate::synth::{CorpusManifest, Split, NUM_CLASSES};
use crate::tensor::{AdamW, GradBuffer, Session};

use super::losses::{infonce_class_loss, seg_cross_entropy_graph};
use super::metrics::{alpha_metric, expert_utilization, ConfusionMatrix, SegMetrics};
use super::model::DoremiModel;
use super::{TrainConfig, TrainError};

/// Voxelized scenes of every domain and split, prepared once.
pub struct PreparedCorpus {
    pub manifest: CorpusManifest,
    pub train: BTreeMap<u32, Vec<SceneInput>>,
    pub eval: BTreeMap<u32, Vec<SceneInput>>,
}

impl PreparedCorpus {
    pub fn new(manifest: CorpusManifest, geometry: &GeometrySpec) -> Result<Self, TrainError> {
        manifest.validate()?;
        let mut train = BTreeMap::new();
        let mut eval = BTreeMap::new();
        for d in &manifest.domains {
            for (split, out) in [(Split::Train, &mut train), (Split::Eval, &mut eval)] {
                let scenes = manifest
                    .scenes(d.domain_id, split)?
                    .iter()
                    .map(|c| prepare_scene(c, geometry))
                    .collect::<Result<Vec<_>, _>>()?;
                out.insert(d.domain_id, scenes);
            }
        }
        Ok(Self { manifest, train, eval })
    }

    pub fn training_domains(&self) -> Vec<u32> {
        self.manifest.training_domains().map(|d| d.domain_id).collect()
    }

    pub fn split(&self, split: Split) -> &BTreeMap<u32, Vec<SceneInput>> {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    /// Every scene of `domains` in `split`, domain-major.
    pub fn scenes(&self, split: Split, domains: &[u32]) -> Result<Vec<&SceneInput>, TrainError> {
        let mut out = Vec::new();
        for d in domains {
            let s = self.split(split).get(d).ok_or(TrainError::MissingDomain(*d))?;
            out.extend(s.iter());
        }
        Ok(out)
    }
}

/// Pretrains a backbone on the training domains' training scenes.
pub fn pretrain_backbone(cfg: &TrainConfig, manifest: &CorpusManifest) -> Result<Checkpoint, TrainError> {
    let mut p = Pretrainer::new(cfg.pretrain_config(), cfg.seed)?;
    let mut scenes = Vec::new();
    for d in manifest.training_domains() {
        scenes.extend(manifest.scenes(d.domain_id, Split::Train)?);
    }
    p.run(&scenes, cfg.pretrain_epochs)?;
    Ok(p.checkpoint())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Cosine-similarity InfoNCE against the class table.
    ClassContrast,
    /// Cross-entropy on softmax class probabilities.
    Segmentation,
}

/// Loss terms of one step, averaged over its scenes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub task: f64,
    /// Sum over mixture layers, before weighting.
    pub balance: f64,
}

/// Forward and backward over `batch`; gradients are accumulated in batch order
/// and averaged.
pub fn loss_and_grads(
    model: &DoremiModel,
    batch: &[(&SceneInput, DomainKey)],
    task: Task,
    lambda: f64,
) -> Result<(StepLoss, GradBuffer), TrainError> {
    let mut buf = GradBuffer::new(&model.store);
    let mut acc = StepLoss::default();
    for (input, key) in batch {
        let mut s = Session::new(&model.store);
        let out = model.forward(&mut s, input, *key)?;
        let labels: &[usize] = &input.labels;
        let task_loss = match task {
            Task::ClassContrast => {
                let table = s.p(model.classes.table);
                infonce_class_loss(&mut s.graph, out.embeddings, labels, table, model.classes.tau)?
            }
            Task::Segmentation => seg_cross_entropy_graph(&mut s.graph, out.logits, labels)?,
        };
        let mut total = task_loss;
        let mut bal_sum = 0.0;
        for &b in &out.balance {
            bal_sum += s.graph.value(b).data()[0];
            let w = s.graph.scale(b, lambda)?;
            total = s.graph.add(total, w)?;
        }
        let grads = s.graph.backward(total)?;
        s.accumulate(&grads, &mut buf);
        acc.total += s.graph.value(total).data()[0];
        acc.task += s.graph.value(task_loss).data()[0];
        acc.balance += bal_sum;
    }
    let n = batch.len() as f64;
    buf.scale(1.0 / n);
    acc.total /= n;
    acc.task /= n;
    acc.balance /= n;
    Ok((acc, buf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub task: f64,
    pub balance: f64,
}

pub struct TrainOutcome {
    pub model: DoremiModel,
    pub history: Vec<EpochStats>,
}

/// Per-epoch step order: domains interleaved round-robin, each domain's
/// scenes shuffled by its own stream.
pub fn round_robin(counts: &[(u32, usize)], seed: u64, epoch: usize) -> Vec<(u32, usize)> {
    let orders: Vec<Vec<usize>> = counts
        .iter()
        .map(|&(d, n)| {
            let mut o: Vec<usize> = (0..n).collect();
            let mut r = rng::stream(seed, &[rng::tag("order"), d as u64, epoch as u64]);
            o.shuffle(&mut r);
            o
        })
        .collect();
    let longest = counts.iter().map(|c| c.1).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..longest {
        for (k, &(d, _)) in counts.iter().enumerate() {
            if let Some(&s) = orders[k].get(i) {
                out.push((d, s));
            }
        }
    }
    out
}

fn run_epochs(
    model: &mut DoremiModel,
    cfg: &TrainConfig,
    corpus: &PreparedCorpus,
    domains: &[u32],
    epochs: usize,
    task: Task,
    stream: &str,
) -> Result<Vec<EpochStats>, TrainError> {
    let counts = domains
        .iter()
        .map(|&d| Ok((d, corpus.train.get(&d).ok_or(TrainError::MissingDomain(d))?.len())))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(epochs);
    let order_seed = rng::derive_seed(cfg.seed, &[rng::tag(stream)]);
    for epoch in 0..epochs {
        let order = round_robin(&counts, order_seed, epoch);
        let mut sum = StepLoss::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_scenes) {
            let batch: Vec<(&SceneInput, DomainKey)> = chunk
                .iter()
                .map(|&(d, i)| (&corpus.train[&d][i], model.domain_key(d)))
                .collect();
            let (l, grads) = loss_and_grads(model, &batch, task, cfg.lambda)?;
            opt.step(&mut model.store, &grads);
            model.project_constraints();
            sum.total += l.total;
            sum.task += l.task;
            sum.balance += l.balance;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: sum.total / n,
            task: sum.task / n,
            balance: sum.balance / n,
        };
        info!("{} epoch {epoch}: loss {:.5} task {:.5} balance {:.4}", cfg.name, stats.loss, stats.task, stats.balance);
        history.push(stats);
    }
    Ok(history)
}

/// Joint training over every training domain.
pub fn joint_train(cfg: &TrainConfig, corpus: &PreparedCorpus, pretrained: Option<&Checkpoint>) -> Result<TrainOutcome, TrainError> {
    let domains = corpus.training_domains();
    let mut model = DoremiModel::build(cfg, &domains, pretrained)?;
    let history = run_epochs(&mut model, cfg, corpus, &domains, cfg.epochs, Task::ClassContrast, "joint")?;
    Ok(TrainOutcome { model, history })
}

/// Continues training `base` on `domain` with the segmentation loss.
pub fn finetune(
    cfg: &TrainConfig,
    base: &DoremiModel,
    corpus: &PreparedCorpus,
    domain: u32,
    epochs: usize,
) -> Result<TrainOutcome, TrainError> {
    let mut model = base.clone();
    let history = run_epochs(&mut model, cfg, corpus, &[domain], epochs, Task::Segmentation, "finetune")?;
    Ok(TrainOutcome { model, history })
}

/// Evaluation of one model on a set of scenes.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: SegMetrics,
    /// Mean task loss over scenes.
    pub loss: f64,
    pub layers: Vec<BlockRef>,
    /// Expert activation counts per layer.
    pub counts: Vec<Vec<f64>>,
    /// Routed tokens per layer.
    pub traces: Vec<Vec<TraceRow>>,
}

impl Evaluation {
    /// α per layer.
    pub fn alpha_per_layer(&self) -> Result<Vec<f64>, TrainError> {
        self.counts.iter().map(|c| alpha_metric(c)).collect()
    }

    /// α averaged over mixture layers; `None` without any.
    pub fn alpha(&self) -> Result<Option<f64>, TrainError> {
        let a = self.alpha_per_layer()?;
        Ok((!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64))
    }

    pub fn utilization(&self, experts: usize) -> Result<Vec<BTreeMap<u32, Vec<f64>>>, TrainError> {
        self.traces.iter().map(|t| expert_utilization(t, experts)).collect()
    }
}

/// Scores `scenes`; each is routed with its domain's key.
pub fn evaluate(model: &DoremiModel, scenes: &[&SceneInput], task: Task) -> Result<Evaluation, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::Metric("empty evaluation split".into()));
    }
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    let k = model.layers.first().map_or(0, |l| l.bank.len());
    let mut counts = vec![vec![0.0; k]; model.layers.len()];
    let mut traces = vec![Vec::new(); model.layers.len()];
    let mut loss = 0.0;
    for input in scenes {
        let mut s = Session::new(&model.store);
        let key = model.domain_key(input.domain_id);
        let out = model.forward(&mut s, input, key)?;
        let labels: &[usize] = &input.labels;
        let l = match task {
            Task::ClassContrast => s.graph.cross_entropy(out.logits, labels.into())?,
            Task::Segmentation => seg_cross_entropy_graph(&mut s.graph, out.logits, labels)?,
        };
        loss += s.graph.value(l).data()[0];
        let logits = s.graph.value(out.logits);
        let pred: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
        cm.add_all(labels, &pred);
        for (li, (_, d)) in out.routes.iter().enumerate() {
            for (c, n) in counts[li].iter_mut().zip(d.expert_counts()) {
                *c += n as f64;
            }
            traces[li].extend(TraceRow::from_decision(d, input.domain_id));
        }
    }
    Ok(Evaluation {
        metrics: cm.metrics(),
        confusion: cm,
        loss: loss / scenes.len() as f64,
        layers: model.layers.iter().map(|l| l.at).collect(),
        counts,
        traces,
    })
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
