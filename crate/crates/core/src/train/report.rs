use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::net::BlockRef;

use super::bench::{mean_active, param_audit};
use super::metrics::SegMetrics;
use super::model::DoremiModel;
use super::trainer::{EpochStats, Evaluation};
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub block: BlockRef,
    /// Fraction of activations per expert, keyed by domain id.
    pub domains: BTreeMap<u32, Vec<f64>>,
}

/// One run's results. Contains nothing time-dependent, so equal seeds give
/// byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub seed: u64,
    pub split: String,
    pub metrics: SegMetrics,
    pub loss: f64,
    pub alpha: Option<f64>,
    pub alpha_per_layer: Vec<f64>,
    pub utilization: Vec<LayerUtilization>,
    pub activated_params: f64,
    pub history: Vec<EpochStats>,
}

impl MetricsReport {
    pub fn new(
        name: &str,
        seed: u64,
        split: &str,
        model: &DoremiModel,
        eval: &Evaluation,
        history: &[EpochStats],
    ) -> Result<Self, TrainError> {
        let experts = model.layers.first().map_or(0, |l| l.bank.len());
        let utilization = eval
            .layers
            .iter()
            .zip(eval.utilization(experts)?)
            .map(|(&block, domains)| LayerUtilization { block, domains })
            .collect();
        Ok(Self {
            name: name.into(),
            seed,
            split: split.into(),
            metrics: eval.metrics.clone(),
            loss: eval.loss,
            alpha: eval.alpha()?,
            alpha_per_layer: eval.alpha_per_layer()?,
            utilization,
            activated_params: param_audit(model, &mean_active(eval)).activated,
            history: history.to_vec(),
        })
    }

    pub fn to_json(&self) -> Result<String, TrainError> {
        serde_json::to_string_pretty(self).map_err(|e| TrainError::Metric(e.to_string()))
    }
}
