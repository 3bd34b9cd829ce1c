//! Multi-attribute self-supervised pretraining.
//!
//! The teacher sees the raw scene, the student an augmented copy (color
//! blackout, point dropout, masked patches). Both project every point onto a
//! shared prototype bank; the student matches the teacher's centered and
//! sharpened assignment. The teacher trails the student by EMA.

mod distill;
mod ema;
mod export;

pub use distill::{cluster_loss, normalize_columns, teacher_targets, ClusterHead, DistillModel};
pub use ema::ema_update;
pub use export::{export_pretrained_ffn, import_pretrained_ffn, PRETRAINED_FFN_KIND};

use std::rc::Rc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::net::{prepare_scene, BackboneConfig};
use crate::rng;
use crate::synth::{augment_student, partition_patches, AugmentPolicy, PointCloud, SynthError};
use crate::tensor::{AdamW, GradBuffer, ParamStore, Session, Tensor, TensorError};

pub const PRETRAIN_KIND: &str = "pretrain";

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid pretraining config: {0}")]
    Config(String),
    #[error("EMA momentum {0} outside [0, 1]")]
    Momentum(f64),
    #[error("teacher and student differ at parameter {0}")]
    Mismatch(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub proj_dim: usize,
    pub prototypes: usize,
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Edge length of the masking patches.
    pub patch_m: f64,
    pub augment: AugmentPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            proj_dim: 32,
            prototypes: 64,
            tau_teacher: 0.04,
            tau_student: 0.1,
            center_momentum: 0.9,
            ema_momentum: 0.996,
            lr: 4e-4,
            weight_decay: 0.01,
            epochs: 10,
            patch_m: 0.25,
            augment: AugmentPolicy::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        self.backbone.validate().map_err(PretrainError::Config)?;
        let ok = self.proj_dim > 0
            && self.prototypes > 0
            && self.tau_teacher > 0.0
            && self.tau_student > 0.0
            && (0.0..=1.0).contains(&self.center_momentum)
            && (0.0..=1.0).contains(&self.ema_momentum)
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.patch_m > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PretrainError::Config(format!("{self:?}")))
        }
    }
}

/// Teacher forward result.
pub struct TeacherView {
    /// Per-point prototype logits.
    pub logits: Tensor,
    /// Nodes on the teacher tape that would receive gradients; always zero.
    pub grad_leaves: usize,
}

pub struct Pretrainer {
    pub cfg: PretrainConfig,
    pub model: DistillModel,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub center: Vec<f64>,
    pub seed: u64,
    opt: AdamW,
}

impl Pretrainer {
    pub fn new(cfg: PretrainConfig, seed: u64) -> Result<Self, PretrainError> {
        cfg.validate()?;
        let mut init = rng::stream(seed, &[rng::tag("pretrain"), rng::tag("init")]);
        let mut student = ParamStore::new();
        let model = DistillModel::new(&mut student, &cfg.backbone, cfg.proj_dim, cfg.prototypes, &mut init);
        let mut teacher = student.clone();
        let ids: Vec<_> = teacher.ids().collect();
        for id in ids {
            teacher.set_frozen(id, true);
        }
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        Ok(Self {
            center: vec![0.0; cfg.prototypes],
            cfg,
            model,
            student,
            teacher,
            seed,
            opt,
        })
    }

    pub fn teacher_view(&self, cloud: &PointCloud) -> Result<TeacherView, PretrainError> {
        let input = prepare_scene(cloud, &self.cfg.backbone.geometry())?;
        let mut s = Session::new(&self.teacher);
        let l = self.model.point_logits(&mut s, &input)?;
        Ok(TeacherView {
            logits: s.graph.value(l).clone(),
            grad_leaves: s.graph.grad_leaves().len(),
        })
    }

    /// One distillation step on `cloud`. Returns `None` when augmentation
    /// removed every point and the sample was skipped.
    pub fn step(&mut self, cloud: &PointCloud, progress: f64, sample_seed: u64) -> Result<Option<f64>, PretrainError> {
        let patches = partition_patches(cloud, self.cfg.patch_m)?;
        let aug = match augment_student(cloud, &patches, &self.cfg.augment, progress, sample_seed) {
            Ok(a) => a,
            Err(SynthError::EmptyAugmentation) => {
                warn!("augmentation left no points (seed {sample_seed}); skipping sample");
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let teacher = self.teacher_view(cloud)?;
        debug_assert_eq!(teacher.grad_leaves, 0);
        let picked = select_rows(&teacher.logits, &aug.source);
        let targets = Rc::new(teacher_targets(&picked, Some(&self.center), self.cfg.tau_teacher));

        let input = prepare_scene(&aug.cloud, &self.cfg.backbone.geometry())?;
        let mut s = Session::new(&self.student);
        let ls = self.model.point_logits(&mut s, &input)?;
        let loss = cluster_loss(&mut s.graph, ls, targets, self.cfg.tau_student)?;
        let value = s.graph.value(loss).data()[0];
        let grads = s.graph.backward(loss)?;
        let mut buf = GradBuffer::new(&self.student);
        s.accumulate(&grads, &mut buf);
        drop(s);
        self.opt.step(&mut self.student, &buf);
        normalize_columns(self.student.get_mut(self.model.head.prototypes));

        let m = self.cfg.center_momentum;
        let n = teacher.logits.rows() as f64;
        for (j, c) in self.center.iter_mut().enumerate() {
            let mean = (0..teacher.logits.rows()).map(|i| teacher.logits.get2(i, j)).sum::<f64>() / n;
            *c = m * *c + (1.0 - m) * mean;
        }
        ema_update(&mut self.teacher, &self.student, self.cfg.ema_momentum)?;
        Ok(Some(value))
    }

    /// Runs `epochs` passes over `scenes` in order; returns the mean loss per epoch.
    pub fn run(&mut self, scenes: &[PointCloud], epochs: usize) -> Result<Vec<f64>, PretrainError> {
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let progress = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 1.0 };
            let (mut sum, mut n) = (0.0, 0usize);
            for (i, cloud) in scenes.iter().enumerate() {
                let sample_seed = rng::derive_seed(self.seed, &[rng::tag("pretrain-sample"), epoch as u64, i as u64]);
                if let Some(l) = self.step(cloud, progress, sample_seed)? {
                    sum += l;
                    n += 1;
                }
            }
            let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
            info!("pretrain epoch {epoch}: loss {mean:.5}");
            history.push(mean);
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.cfg,
            "seed": self.seed,
            "widths": self.cfg.backbone.widths,
            "prototypes": self.cfg.prototypes,
            "proj_dim": self.cfg.proj_dim,
        });
        Checkpoint::new(PRETRAIN_KIND, meta, self.student.clone())
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), c], data).expect("row selection")
}
