//! The domain-representation mixture layer.
//!
//! A layer replaces the feed-forward sublayer of a backbone block with
//! `E_Re(f) + Σ_j w_j ⊙ E_j(f)`: a frozen copy of the pretrained FFN plus
//! `K` trainable copies mixed by entropy-controlled routing. Routing reads
//! a spatially convolved, domain-shifted view of the tokens.

mod balance;
mod layer;
mod routing;
mod trace;

pub use balance::{balance_loss, balance_loss_graph, routed_fractions, BalanceStats};
pub use layer::{
    unseen_domain_embedding, DomainEmbeddingTable, DomainKey, ExpertBank, LayerOutput, MoeConfig, MoeForward,
    MoeLayer, RoutingInput, TokenBatch, DOMAIN_DIM,
};
pub use routing::{allocate, eda_allocate, entropy, entropy_to_k, top_k, Allocation, RoutingDecision};
pub use trace::{read_traces, write_traces, TraceRow};

use thiserror::Error;

use crate::sparse::SparseError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("invalid allocation: {0}")]
    Allocation(String),
    #[error("unknown domain {0} (not in the embedding table)")]
    UnknownDomain(u32),
    #[error("domain table is empty")]
    EmptyDomainTable,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("trace format: {0}")]
    Trace(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
