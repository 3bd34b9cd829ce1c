use std::rc::Rc;

use rand::Rng as _;

use crate::rng::Rng;
use crate::sparse::conv_forward;
use crate::tensor::{ConvRules, ParamId, ParamStore, Result, Session, Tensor, Var};

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = store.add(format!("{name}.w"), uniform(rng, &[din, dout], bound));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { weight, bias, din, dout }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        s.graph.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = s.graph.gelu(h)?;
            }
            h = l.forward(s, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn din(&self) -> usize {
        self.layers[0].din
    }

    pub fn dout(&self) -> usize {
        self.layers.last().expect("nonempty mlp").dout
    }

    /// Copy with fresh parameter slots holding the same values.
    pub fn duplicate(&self, store: &mut ParamStore, name: &str, frozen: bool) -> Self {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (w, b) = (store.get(l.weight).clone(), store.get(l.bias).clone());
                let (wn, bn) = (format!("{name}.l{i}.w"), format!("{name}.l{i}.b"));
                let (weight, bias) = if frozen {
                    (store.add_frozen(wn, w), store.add_frozen(bn, b))
                } else {
                    (store.add(wn, w), store.add(bn, b))
                };
                Linear { weight, bias, din: l.din, dout: l.dout }
            })
            .collect();
        Self { layers }
    }
}

/// Transformer-style feed-forward `D → 4D → D`.
pub fn ffn_dims(d: usize) -> [usize; 3] {
    [d, 4 * d, d]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, o) = (s.p(self.gain), s.p(self.offset));
        s.graph.layer_norm(x, g, o)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.offset]
    }
}

/// Trainable submanifold convolution followed by layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub extent: usize,
    pub din: usize,
    pub dout: usize,
}

impl SparseConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, extent: usize, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let n_off = extent.pow(3);
        let bound = 1.0 / ((n_off * din) as f64).sqrt();
        let weight = store.add(format!("{name}.w"), uniform(rng, &[n_off * din, dout], bound));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        let norm = Norm::new(store, &format!("{name}.norm"), dout);
        Self { weight, bias, norm, extent, din, dout }
    }

    pub fn forward(&self, s: &mut Session, x: Var, rules: Rc<ConvRules>) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        let (g, o) = (s.p(self.norm.gain), s.p(self.norm.offset));
        conv_forward(&mut s.graph, x, w, b, Some((g, o)), rules)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias, self.norm.gain, self.norm.offset]
    }
}
