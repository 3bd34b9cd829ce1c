use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result, Tensor, Var};

use super::routing::RoutingDecision;

/// Load statistics behind the balance loss `K·Σ_j c_j·r_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    /// Fraction of tokens that activated expert `j`.
    pub c: Vec<f64>,
    /// Mean routing probability of expert `j`.
    pub r: Vec<f64>,
    pub loss: f64,
}

pub fn routed_fractions(decision: &RoutingDecision) -> Vec<f64> {
    let n = decision.n_tokens() as f64;
    decision.expert_counts().into_iter().map(|c| c as f64 / n).collect()
}

pub fn balance_loss(decision: &RoutingDecision) -> BalanceStats {
    let (n, kx) = (decision.n_tokens(), decision.n_experts());
    let c = routed_fractions(decision);
    let mut r = vec![0.0; kx];
    for i in 0..n {
        for (rj, p) in r.iter_mut().zip(decision.probs.row(i)) {
            *rj += p;
        }
    }
    r.iter_mut().for_each(|v| *v /= n as f64);
    let loss = kx as f64 * c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
    BalanceStats { c, r, loss }
}

/// Balance loss on the graph; gradients reach `probs` through `r` only.
pub fn balance_loss_graph(g: &mut Graph, probs: Var, decision: &RoutingDecision) -> Result<Var> {
    let kx = decision.n_experts() as f64;
    let weighted: Vec<f64> = routed_fractions(decision).into_iter().map(|c| kx * c).collect();
    let c = Rc::new(Tensor::new(vec![weighted.len()], weighted)?);
    let r = g.mean_rows(probs)?;
    let cr = g.mul_const(r, c)?;
    g.sum(cr)
}
