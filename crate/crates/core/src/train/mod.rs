//! Joint multi-domain training, fine-tuning, evaluation, and expert analysis.

mod analysis;
mod bench;
mod config;
mod losses;
mod metrics;
mod model;
mod report;
mod trainer;

pub use analysis::{plant_domain_embedding, read_utilization_csv, write_utilization_csv};
pub use bench::{bench, mean_active, param_audit, BenchReport, ParamAudit};
pub use config::{ablation_grid, TrainConfig, Variant};
pub use losses::{
    cosine_logits, infonce_class_loss, normalize_rows, seg_cross_entropy, seg_cross_entropy_graph, ClassEmbeddingTable,
    IGNORE_LABEL, PROB_FLOOR,
};
pub use metrics::{alpha_metric, expert_utilization, ConfusionMatrix, SegMetrics};
pub use model::{DoremiModel, ModelOutput, MODEL_KIND};
pub use report::{LayerUtilization, MetricsReport};
pub use trainer::{
    argmax, evaluate, finetune, joint_train, loss_and_grads, pretrain_backbone, round_robin, EpochStats, Evaluation,
    PreparedCorpus, StepLoss, Task, TrainOutcome,
};

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::moe::MoeError;
use crate::pretrain::PretrainError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corpus has no domain {0}")]
    MissingDomain(u32),
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
