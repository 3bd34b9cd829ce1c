//! Entropy-controlled expert allocation.
//!
//! Per token: `p = softmax(g)`, `H = −Σ p ln p`, and the expert count
//! `k = ⌈k_min + (H / ln K)·(k_max − k_min)⌉`. The `k` most probable
//! experts are activated and keep their raw probability as weight.

use serde::{Deserialize, Serialize};

use crate::tensor::{softmax_row, Tensor};

use super::MoeError;

/// How many experts each token activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Allocation {
    /// Count driven by routing entropy.
    Entropy { k_min: usize, k_max: usize },
    /// Same count for every token.
    Fixed { k: usize },
}

impl Allocation {
    pub fn validate(&self, experts: usize) -> Result<(), MoeError> {
        let ok = match *self {
            Allocation::Entropy { k_min, k_max } => experts >= 2 && 1 <= k_min && k_min <= k_max && k_max <= experts,
            Allocation::Fixed { k } => 1 <= k && k <= experts,
        };
        if ok {
            Ok(())
        } else {
            Err(MoeError::Allocation(format!("{self:?} with {experts} experts")))
        }
    }
}

/// Per-token routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub logits: Tensor,
    pub probs: Tensor,
    /// Nats.
    pub entropy: Vec<f64>,
    pub k: Vec<usize>,
    /// Active experts per token, most probable first.
    pub active: Vec<Vec<usize>>,
    pub weights: Tensor,
}

impl RoutingDecision {
    pub fn n_tokens(&self) -> usize {
        self.k.len()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.cols()
    }

    /// 0/1 indicator of the active sets.
    pub fn mask(&self) -> Tensor {
        let kx = self.n_experts();
        let mut m = Tensor::zeros(&[self.n_tokens(), kx]);
        for (i, act) in self.active.iter().enumerate() {
            for &j in act {
                m.data_mut()[i * kx + j] = 1.0;
            }
        }
        m
    }

    /// Number of tokens that activated each expert.
    pub fn expert_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_experts()];
        for act in &self.active {
            for &j in act {
                c[j] += 1;
            }
        }
        c
    }

    /// Tokens routed to each expert, ascending.
    pub fn tokens_per_expert(&self) -> Vec<Vec<usize>> {
        let mut t = vec![Vec::new(); self.n_experts()];
        for (i, act) in self.active.iter().enumerate() {
            for &j in act {
                t[j].push(i);
            }
        }
        t
    }
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `⌈k_min + (H / ln K)·(k_max − k_min)⌉`, clamped to `[k_min, k_max]`
/// so rounding at `H = ln K` cannot overshoot.
pub fn entropy_to_k(h: f64, experts: usize, k_min: usize, k_max: usize) -> usize {
    let h_max = (experts as f64).ln();
    let raw = (k_min as f64 + (h / h_max) * (k_max - k_min) as f64).ceil();
    (raw.max(k_min as f64) as usize).min(k_max)
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    // stable sort keeps ascending index order among equal probabilities
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx.truncate(k);
    idx
}

pub fn eda_allocate(logits: &Tensor, k_min: usize, k_max: usize) -> Result<RoutingDecision, MoeError> {
    allocate(logits, Allocation::Entropy { k_min, k_max })
}

pub fn allocate(logits: &Tensor, allocation: Allocation) -> Result<RoutingDecision, MoeError> {
    let (n, kx) = (logits.rows(), logits.cols());
    allocation.validate(kx)?;
    let mut probs = Tensor::zeros(&[n, kx]);
    let mut weights = Tensor::zeros(&[n, kx]);
    let mut ent = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for i in 0..n {
        softmax_row(logits.row(i), probs.row_mut(i));
        let p = probs.row(i);
        let h = entropy(p);
        let k = match allocation {
            Allocation::Entropy { k_min, k_max } => entropy_to_k(h, kx, k_min, k_max),
            Allocation::Fixed { k } => k,
        };
        let act = top_k(p, k);
        let w = weights.row_mut(i);
        for &j in &act {
            w[j] = probs.get2(i, j);
        }
        ent.push(h);
        ks.push(k);
        active.push(act);
    }
    Ok(RoutingDecision {
        logits: logits.clone(),
        probs,
        entropy: ent,
        k: ks,
        active,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_for(p: &[f64]) -> Tensor {
        // ln 0 → very negative but finite so softmax stays exact enough
        let row: Vec<f64> = p.iter().map(|&v| if v > 0.0 { v.ln() } else { -800.0 }).collect();
        Tensor::from_rows(&[row]).unwrap()
    }

    #[test]
    fn one_hot_activates_one() {
        let mut p = vec![0.0; 8];
        p[5] = 1.0;
        let d = eda_allocate(&logits_for(&p), 1, 8).unwrap();
        assert_eq!(d.entropy[0], 0.0);
        assert_eq!(d.k[0], 1);
        assert_eq!(d.active[0], vec![5]);
        assert_eq!(d.weights.row(0), p.as_slice());
    }

    #[test]
    fn uniform_activates_all() {
        let d = eda_allocate(&Tensor::zeros(&[1, 8]), 1, 8).unwrap();
        assert!((d.entropy[0] - 8f64.ln()).abs() < 1e-12);
        assert_eq!(d.k[0], 8);
        assert_eq!(d.weights.row(0), d.probs.row(0));
    }

    #[test]
    fn two_way_split_activates_four() {
        let p = [0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let d = eda_allocate(&logits_for(&p), 1, 8).unwrap();
        assert!((d.entropy[0] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(d.k[0], 4);
        assert_eq!(d.active[0], vec![0, 1, 2, 3]);
        assert!((d.weights.get2(0, 0) - 0.5).abs() < 1e-12);
        assert!((d.weights.get2(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_two_keeps_top_two_unnormalized() {
        let p = [0.4, 0.3, 0.2, 0.1];
        let d = allocate(&logits_for(&p), Allocation::Fixed { k: 2 }).unwrap();
        let w = d.weights.row(0);
        assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] - 0.3).abs() < 1e-12);
        assert_eq!(&w[2..], &[0.0, 0.0]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        assert_eq!(top_k(&[0.2, 0.4, 0.4, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.25; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn bad_bounds_rejected() {
        let g = Tensor::zeros(&[2, 4]);
        assert!(eda_allocate(&g, 0, 4).is_err());
        assert!(eda_allocate(&g, 3, 2).is_err());
        assert!(eda_allocate(&g, 1, 5).is_err());
        assert!(eda_allocate(&Tensor::zeros(&[2, 1]), 1, 1).is_err());
    }
}
