use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::moe::TraceRow;

use super::TrainError;

/// `counts[truth][pred]`, accumulated in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0.0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1.0;
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t, p);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> f64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn metrics(&self) -> SegMetrics {
        let c = self.classes;
        let mut iou = vec![None; c];
        let mut recall = Vec::new();
        let mut trace = 0.0;
        for k in 0..c {
            let tp = self.get(k, k);
            trace += tp;
            let gt: f64 = (0..c).map(|p| self.get(k, p)).sum();
            if gt == 0.0 {
                continue;
            }
            let pred: f64 = (0..c).map(|t| self.get(t, k)).sum();
            iou[k] = Some(tp / (gt + pred - tp));
            recall.push(tp / gt);
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let total = self.total();
        SegMetrics {
            miou: mean(&present),
            macc: mean(&recall),
            allacc: if total > 0.0 { trace / total } else { 0.0 },
            iou,
        }
    }
}

/// Segmentation scores. Classes absent from the ground truth have no IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub allacc: f64,
}

/// Population std of `counts` divided by their mean.
pub fn alpha_metric(counts: &[f64]) -> Result<f64, TrainError> {
    let k = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / k;
    if counts.is_empty() || !(mean > 0.0) {
        return Err(TrainError::Metric("alpha needs positive total count".into()));
    }
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / k;
    Ok(var.sqrt() / mean)
}

/// Per domain, the fraction of all activations that went to each expert.
pub fn expert_utilization(traces: &[TraceRow], experts: usize) -> Result<BTreeMap<u32, Vec<f64>>, TrainError> {
    let mut counts: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in traces {
        let row = counts.entry(r.domain_id).or_insert_with(|| vec![0.0; experts]);
        for &j in &r.active {
            if j >= experts {
                return Err(TrainError::Metric(format!("expert {j} outside bank of {experts}")));
            }
            row[j] += 1.0;
        }
    }
    for row in counts.values_mut() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add_all(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        let m = cm.metrics();
        assert_eq!((m.miou, m.macc, m.allacc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_class_zero_on_balanced_labels() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add_all(&[0, 0, 1, 1], &[0, 0, 0, 0]);
        let m = cm.metrics();
        assert_eq!(m.allacc, 0.5);
        assert_eq!(m.iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m.miou, 0.25);
        assert_eq!(m.macc, 0.5);
    }

    #[test]
    fn absent_classes_do_not_count() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add_all(&[0, 1], &[0, 1]);
        let m = cm.metrics();
        assert_eq!(m.iou, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn alpha_anchors() {
        assert_eq!(alpha_metric(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((alpha_metric(&[0.75, 0.25]).unwrap() - 0.5).abs() < 1e-15);
        assert!(alpha_metric(&[0.0, 0.0]).is_err());
        assert!(alpha_metric(&[]).is_err());
    }

    #[test]
    fn utilization_one_hot() {
        let t = vec![TraceRow {
            token: 0,
            domain_id: 1,
            entropy: 0.0,
            k: 1,
            active: vec![3],
        }];
        let h = expert_utilization(&t, 8).unwrap();
        assert_eq!(h[&1], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
