use std::rc::Rc;

use log::debug;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Session, Tensor, Var};

use super::TrainError;

/// Points carrying this label are left out of the loss.
pub const IGNORE_LABEL: usize = usize::MAX;
/// Floor applied inside the log of [`seg_cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Unit-norm class vectors shared by every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    /// `C × E`.
    pub table: ParamId,
    pub tau: f64,
}

impl ClassEmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, classes: usize, dim: usize, tau: f64, rng: &mut Rng) -> Self {
        let data = (0..classes * dim).map(|_| StandardNormal.sample(rng)).collect();
        let mut t = Tensor::new(vec![classes, dim], data).expect("class table shape");
        normalize_rows(&mut t);
        Self {
            table: store.add(format!("{name}.table"), t),
            tau,
        }
    }

    pub fn classes(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }

    pub fn renormalize(&self, store: &mut ParamStore) {
        normalize_rows(store.get_mut(self.table));
    }

    /// `cos(feature, class)/τ` for every row of `features`.
    pub fn logits(&self, s: &mut Session, features: Var) -> Result<Var, TrainError> {
        let t = s.p(self.table);
        Ok(cosine_logits(&mut s.graph, features, t, self.tau)?)
    }
}

pub fn normalize_rows(t: &mut Tensor) {
    let d = t.cols();
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

pub fn cosine_logits(g: &mut Graph, features: Var, table: Var, tau: f64) -> crate::tensor::Result<Var> {
    let f = g.l2_normalize_rows(features)?;
    let t = g.l2_normalize_rows(table)?;
    let tt = g.transpose(t)?;
    let sim = g.matmul(f, tt)?;
    g.scale(sim, 1.0 / tau)
}

/// Drops rows labeled [`IGNORE_LABEL`]; returns the kept rows and labels.
fn labeled(g: &mut Graph, x: Var, labels: &[usize]) -> Result<(Var, Rc<[usize]>), TrainError> {
    if labels.iter().all(|&l| l != IGNORE_LABEL) {
        return Ok((x, labels.into()));
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_LABEL).collect();
    debug!("excluding {} unlabeled points", labels.len() - keep.len());
    if keep.is_empty() {
        return Err(TrainError::Metric("no labeled points".into()));
    }
    let y: Rc<[usize]> = keep.iter().map(|&i| labels[i]).collect();
    Ok((g.index_select(x, keep.into())?, y))
}

/// Cross-entropy of cosine-similarity logits against the true class;
/// the other classes in the table are the negatives.
pub fn infonce_class_loss(g: &mut Graph, features: Var, labels: &[usize], table: Var, tau: f64) -> Result<Var, TrainError> {
    let (f, y) = labeled(g, features, labels)?;
    let logits = cosine_logits(g, f, table, tau)?;
    Ok(g.cross_entropy(logits, y)?)
}

/// `−(1/M)·Σ_i log max(q[i, y_i], 1e-12)`.
pub fn seg_cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64, TrainError> {
    let c = probs.cols();
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(TrainError::Metric(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(TrainError::Metric(format!("label {y} outside {c} classes")));
        }
        total -= probs.get2(i, y).max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Graph form of [`seg_cross_entropy`] on softmax probabilities of `logits`.
pub fn seg_cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, TrainError> {
    let (l, y) = labeled(g, logits, labels)?;
    let q = g.softmax_last(l)?;
    Ok(g.prob_nll(q, y, PROB_FLOOR)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_two_class_is_ln2() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap());
        let f = g.param(Tensor::from_rows(&[vec![0.0, 0.0, 2.0]]).unwrap());
        let l = infonce_class_loss(&mut g, f, &[1], t, 0.07).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aligned_feature_small_tau_vanishes() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let f = g.param(Tensor::from_rows(&[vec![0.0, 3.0]]).unwrap());
        let l = infonce_class_loss(&mut g, f, &[1], t, 1e-3).unwrap();
        assert!(g.value(l).data()[0] < 1e-12);
    }

    #[test]
    fn unlabeled_points_are_skipped() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let f = g.param(Tensor::from_rows(&[vec![0.0, 1.0], vec![5.0, -1.0]]).unwrap());
        let a = infonce_class_loss(&mut g, f, &[1, IGNORE_LABEL], t, 0.5).unwrap();
        let f1 = g.param(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let b = infonce_class_loss(&mut g, f1, &[1], t, 0.5).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn seg_ce_closed_forms() {
        let one_hot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(seg_cross_entropy(&one_hot, &[1]).unwrap(), 0.0);
        let uniform = Tensor::full(&[3, 4], 0.25);
        assert!((seg_cross_entropy(&uniform, &[0, 2, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((seg_cross_entropy(&one_hot, &[0]).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-12);
        assert!(seg_cross_entropy(&one_hot, &[3]).is_err());
    }
}
