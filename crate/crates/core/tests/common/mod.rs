#![allow(dead_code)]

pub mod grads;
pub mod oracles;

use std::collections::HashSet;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use doremi::moe::{Allocation, DomainKey, MoeConfig, MoeLayer, RoutingInput, TokenBatch};
use doremi::net::{BlockRef, Level, Mlp};
use doremi::rng::{stream, Rng};
use doremi::sparse::Coord;
use doremi::tensor::{finite_difference_gradient, relative_error, ParamId, ParamStore, Session, Tensor, Var};

pub fn rng(seed: u64) -> Rng {
    stream(seed, &[0x7e57])
}

pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `n` distinct coordinates inside `[0, side)³`.
pub fn random_coords(rng: &mut Rng, n: usize, side: i32) -> Vec<Coord> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = [rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..side)];
        if seen.insert(c) {
            out.push(c);
        }
    }
    out
}

/// `Σ R ⊙ x` with a fixed random `R`, a generic scalar probe of `x`.
pub fn probe(s: &mut Session, x: Var, r: &Tensor) -> Var {
    let c = std::rc::Rc::new(r.clone());
    let y = s.graph.mul_const(x, c).unwrap();
    s.graph.sum(y).unwrap()
}

/// Relative error between the tape gradient and central differences over
/// the concatenation of `ids`. Norms below 1e-6 count as 1e-6, so a gradient
/// that is identically zero compares against finite-difference noise only.
pub fn grad_check<F>(store: &ParamStore, ids: &[ParamId], f: F) -> f64
where
    F: Fn(&mut Session) -> Var,
{
    let mut s = Session::new(store);
    let loss = f(&mut s);
    let grads = s.graph.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        let a = s
            .bound(id)
            .and_then(|v| grads.get(v))
            .unwrap_or_else(|| Tensor::zeros(&shape));
        analytic.extend_from_slice(a.data());
        let fd = finite_difference_gradient(
            |t| {
                let mut st = store.clone();
                *st.get_mut(id) = t.clone();
                let mut s2 = Session::new(&st);
                let l = f(&mut s2);
                s2.graph.value(l).data()[0]
            },
            store.get(id),
            1e-5,
        );
        numeric.extend_from_slice(fd.data());
    }
    let n = analytic.len();
    relative_error(
        &Tensor::new(vec![n], analytic).unwrap(),
        &Tensor::new(vec![n], numeric).unwrap(),
        1e-6,
    )
}

pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub struct MoeCase {
    pub store: ParamStore,
    pub layer: MoeLayer,
    pub features: Tensor,
    pub level: Level,
    pub key: DomainKey,
    pub probe: Tensor,
    pub lambda: f64,
}

/// A randomly sized mixture layer with domain-spatial routing, experts pulled
/// apart from their common initialization, and tokens on a small grid.
pub fn moe_case(seed: u64) -> MoeCase {
    let mut r = rng(seed);
    let d = r.random_range(3..6);
    let k = r.random_range(2..6);
    let n = r.random_range(5..13);
    let mut store = ParamStore::new();
    let ffn = Mlp::new(&mut store, "ffn", &[d, 2 * d, d], &mut r);
    let allocation = if seed % 3 == 0 {
        Allocation::Fixed { k: r.random_range(1..=k) }
    } else {
        Allocation::Entropy { k_min: 1, k_max: k }
    };
    let cfg = MoeConfig {
        experts: k,
        allocation,
        routing: RoutingInput::DomainSpatial,
        use_re: true,
    };
    let at = BlockRef { stage: 0, block: 0 };
    let layer = MoeLayer::from_pretrained(&mut store, at, &ffn, &cfg, &[0, 1, 2], 3, &mut r).unwrap();
    // experts start as identical copies, which makes the mix independent of the
    // gate; pull them apart as training would
    for id in layer.bank.experts.iter().flat_map(Mlp::params) {
        let noise = normal(&mut r, store.get(id).shape(), 0.3);
        for (v, e) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
    // domain embeddings start tiny; widen them so their gradients are not lost in noise
    let table = layer.domains.as_ref().unwrap().table;
    *store.get_mut(table) = normal(&mut r, store.get(table).shape(), 1.0);
    let coords = random_coords(&mut r, n, 4);
    let features = normal(&mut r, &[n, d], 1.0);
    let tokens = TokenBatch {
        features: features.clone(),
        coords,
        domain_id: 0,
    };
    let level = tokens.level(3).unwrap();
    let key = match r.random_range(0..4u32) {
        3 => DomainKey::Unseen,
        id => DomainKey::Known(id),
    };
    MoeCase {
        probe: normal(&mut r, &[n, d], 1.0),
        lambda: r.random_range(0.0..1.0),
        store,
        layer,
        features,
        level,
        key,
    }
}
