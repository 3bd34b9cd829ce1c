use std::rc::Rc;

use crate::net::{Backbone, BackboneConfig, Mlp, SceneInput};
use crate::rng::Rng;
use crate::tensor::{softmax_row, Graph, ParamId, ParamStore, Result, Session, Tensor, Var};

use rand_distr::{Distribution, StandardNormal};

/// Projection head and prototype bank producing per-voxel assignment logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHead {
    pub proj: Mlp,
    /// `Dproj × P`, unit-norm columns.
    pub prototypes: ParamId,
}

impl ClusterHead {
    pub fn new(store: &mut ParamStore, din: usize, proj_dim: usize, n_prototypes: usize, rng: &mut Rng) -> Self {
        let proj = Mlp::new(store, "head.proj", &[din, din, proj_dim], rng);
        let data = (0..proj_dim * n_prototypes).map(|_| StandardNormal.sample(rng)).collect();
        let mut t = Tensor::new(vec![proj_dim, n_prototypes], data).expect("prototype shape");
        normalize_columns(&mut t);
        let prototypes = store.add("head.prototypes", t);
        Self { proj, prototypes }
    }

    /// Cosine similarity of every row of `x` to every prototype.
    pub fn logits(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.proj.forward(s, x)?;
        let h = s.graph.l2_normalize_rows(h)?;
        let p = s.p(self.prototypes);
        s.graph.matmul(h, p)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.proj.params();
        p.push(self.prototypes);
        p
    }
}

/// Rescales every column to unit length.
pub fn normalize_columns(t: &mut Tensor) {
    let (r, c) = (t.rows(), t.cols());
    let d = t.data_mut();
    for j in 0..c {
        let norm = (0..r).map(|i| d[i * c + j].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..r {
                d[i * c + j] /= norm;
            }
        }
    }
}

/// Backbone plus cluster head; teacher and student share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillModel {
    pub backbone: Backbone,
    pub head: ClusterHead,
}

impl DistillModel {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, proj_dim: usize, n_prototypes: usize, rng: &mut Rng) -> Self {
        let backbone = Backbone::new(store, cfg, rng);
        let head = ClusterHead::new(store, backbone.out_width(), proj_dim, n_prototypes, rng);
        Self { backbone, head }
    }

    /// Per-point prototype logits (`points × P`).
    pub fn point_logits(&self, s: &mut Session, input: &SceneInput) -> Result<Var> {
        let f = self.backbone.forward(s, input, &mut crate::net::NoHook)?;
        let v = self.head.logits(s, f)?;
        s.graph.index_select(v, input.point_to_voxel.clone())
    }
}

/// Sharpened, centered teacher assignment `softmax((l − c)/τ_t)` per row.
pub fn teacher_targets(logits: &Tensor, center: Option<&[f64]>, tau_teacher: f64) -> Tensor {
    let (n, p) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(&[n, p]);
    let mut buf = vec![0.0; p];
    for i in 0..n {
        for (j, b) in buf.iter_mut().enumerate() {
            let c = center.map_or(0.0, |c| c[j]);
            *b = (logits.get2(i, j) - c) / tau_teacher;
        }
        softmax_row(&buf, out.row_mut(i));
    }
    out
}

/// Mean over points of `−Σ_j t_j log softmax(l_s/τ_s)_j`.
pub fn cluster_loss(g: &mut Graph, student_logits: Var, targets: Rc<Tensor>, tau_student: f64) -> Result<Var> {
    let scaled = g.scale(student_logits, 1.0 / tau_student)?;
    g.soft_cross_entropy(scaled, targets)
}
