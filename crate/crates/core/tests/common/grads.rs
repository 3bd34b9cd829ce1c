//! Per-parameter-path gradient suites; each returns one relative error per config.

use std::rc::Rc;

use rand::Rng as _;

use super::{grad_check, moe_case, normal, probe, random_coords, rng, MoeCase};
use doremi::moe::{Allocation, TokenBatch};
use doremi::net::{Mlp, SparseConvLayer};
use doremi::pretrain::{cluster_loss, teacher_targets, ClusterHead};
use doremi::tensor::{ParamId, ParamStore, Session};
use doremi::train::{infonce_class_loss, ClassEmbeddingTable, IGNORE_LABEL};

impl MoeCase {
    fn check(&self, ids: &[ParamId]) -> f64 {
        grad_check(&self.store, ids, |s: &mut Session| {
            let f = s.graph.constant(self.features.clone());
            let out = self.layer.forward(s, f, &self.level, self.key).unwrap();
            let p = probe(s, out.out, &self.probe);
            let b = s.graph.scale(out.balance, self.lambda).unwrap();
            s.graph.add(p, b).unwrap()
        })
    }
}

pub fn gate(configs: u64) -> Vec<f64> {
    (0..configs)
        .map(|i| {
            let c = moe_case(100 + i);
            c.check(&c.layer.gate.params())
        })
        .collect()
}

pub fn domain(configs: u64) -> Vec<f64> {
    (0..configs)
        .map(|i| {
            let c = moe_case(200 + i);
            c.check(&c.layer.domains.as_ref().unwrap().params())
        })
        .collect()
}

pub fn experts(configs: u64) -> Vec<f64> {
    (0..configs)
        .map(|i| {
            let c = moe_case(300 + i);
            let ids: Vec<ParamId> = c.layer.bank.experts.iter().flat_map(Mlp::params).collect();
            c.check(&ids)
        })
        .collect()
}

pub fn dsr_conv(configs: u64) -> Vec<f64> {
    (0..configs)
        .map(|i| {
            let c = moe_case(400 + i);
            c.check(&c.layer.spatial.as_ref().unwrap().params())
        })
        .collect()
}

pub fn class_embeddings(configs: u64) -> Vec<f64> {
    (0..configs)
        .map(|i| {
            let mut r = rng(500 + i);
            let (n, d, classes) = (r.random_range(3..10), r.random_range(2..6), r.random_range(2..7));
            let mut store = ParamStore::new();
            let tau = r.random_range(0.05..1.0);
            let table = ClassEmbeddingTable::new(&mut store, "cls", classes, d, tau, &mut r);
            let feats = store.add("feat", normal(&mut r, &[n, d], 1.0));
            let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
            labels[0] = IGNORE_LABEL;
            grad_check(&store, &[table.table, feats], |s: &mut Session| {
                let f = s.p(feats);
                let t = s.p(table.table);
                infonce_class_loss(&mut s.graph, f, &labels, t, tau).unwrap()
            })
        })
        .collect()
}

pub fn prototypes(configs: u64) -> Vec<f64> {
    (0..configs)
        .map(|i| {
            let mut r = rng(600 + i);
            let (n, din, proj, p) = (
                r.random_range(3..9),
                r.random_range(2..6),
                r.random_range(2..6),
                r.random_range(2..9),
            );
            let mut store = ParamStore::new();
            let head = ClusterHead::new(&mut store, din, proj, p, &mut r);
            let x = normal(&mut r, &[n, din], 1.0);
            let center: Vec<f64> = normal(&mut r, &[p], 0.1).into_data();
            let targets = Rc::new(teacher_targets(&normal(&mut r, &[n, p], 0.3), Some(&center), 0.04));
            grad_check(&store, &head.params(), |s: &mut Session| {
                let xv = s.graph.constant(x.clone());
                let l = head.logits(s, xv).unwrap();
                cluster_loss(&mut s.graph, l, targets.clone(), 0.1).unwrap()
            })
        })
        .collect()
}

pub fn sparse_conv(configs: u64) -> Vec<f64> {
    (0..configs)
        .map(|i| {
            let mut r = rng(700 + i);
            let (n, din, dout) = (r.random_range(2..14), r.random_range(1..4), r.random_range(2..5));
            let extent = if i % 2 == 0 { 3 } else { 1 };
            let mut store = ParamStore::new();
            let conv = SparseConvLayer::new(&mut store, "conv", extent, din, dout, &mut r);
            let tokens = TokenBatch {
                features: normal(&mut r, &[n, din], 1.0),
                coords: random_coords(&mut r, n, 3),
                domain_id: 0,
            };
            let level = tokens.level(extent).unwrap();
            let x = store.add("x", tokens.features.clone());
            let rp = normal(&mut r, &[n, dout], 1.0);
            let mut ids = conv.params();
            ids.push(x);
            grad_check(&store, &ids, |s: &mut Session| {
                let xv = s.p(x);
                let y = conv.forward(s, xv, level.rules.clone()).unwrap();
                probe(s, y, &rp)
            })
        })
        .collect()
}

pub fn balance(configs: u64) -> Vec<f64> {
    let mut errs = Vec::new();
    let mut seed = 1000;
    while errs.len() < configs as usize {
        seed += 1;
        let mut r = rng(seed);
        let (n, d, k) = (r.random_range(4..16), r.random_range(2..6), r.random_range(3..9));
        let mut store = ParamStore::new();
        let gate = Mlp::new(&mut store, "gate", &[d, d, k], &mut r);
        let x = normal(&mut r, &[n, d], 6.0);
        let alloc = if seed % 2 == 0 {
            Allocation::Entropy { k_min: 1, k_max: k }
        } else {
            Allocation::Fixed { k: 1 }
        };
        let logits = {
            let mut s = Session::new(&store);
            let xv = s.graph.constant(x.clone());
            let l = gate.forward(&mut s, xv).unwrap();
            s.graph.value(l).clone()
        };
        // with every token on all K experts the loss is the constant K
        if doremi::moe::allocate(&logits, alloc).unwrap().k.iter().all(|&kk| kk == k) {
            continue;
        }
        errs.push(grad_check(&store, &gate.params(), |s: &mut Session| {
            let xv = s.graph.constant(x.clone());
            let l = gate.forward(s, xv).unwrap();
            let dec = doremi::moe::allocate(s.graph.value(l), alloc).unwrap();
            let p = s.graph.softmax_last(l).unwrap();
            doremi::moe::balance_loss_graph(&mut s.graph, p, &dec).unwrap()
        }));
    }
    errs
}

/// Every parameterized path with its suite.
pub const PATHS: [(&str, fn(u64) -> Vec<f64>); 8] = [
    ("gate", gate),
    ("domain", domain),
    ("experts", experts),
    ("dsr conv", dsr_conv),
    ("class embeddings", class_embeddings),
    ("prototypes", prototypes),
    ("sparse conv", sparse_conv),
    ("balance", balance),
];
