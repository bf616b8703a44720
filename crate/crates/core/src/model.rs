//! Dual-branch model: feature re-embedding, class-wise gated attention,
//! attention pooling and class-wise heads for the coarse and fine levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HmilError, Result};
use crate::hierarchy::Projection;
use crate::tensor::{Graph, Matrix, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmilConfig {
    pub d_c: usize,
    pub d_f: usize,
    pub k_c: usize,
    pub k_f: usize,
    pub ofr_hidden: usize,
    /// When false the fine branch consumes the coarse features directly
    /// and `d_f == d_c`.
    #[serde(default = "default_true")]
    pub use_ofr: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl HmilConfig {
    /// Defaults: `d_f = d_c / 4`, re-embedder hidden width `d_c / 2`.
    pub fn new(d_c: usize, k_c: usize, k_f: usize, seed: u64) -> Result<Self> {
        if d_c % 4 != 0 {
            return Err(HmilError::Config(format!(
                "d_c = {d_c} must be divisible by 4 when d_f is defaulted"
            )));
        }
        let cfg = HmilConfig {
            d_c,
            d_f: d_c / 4,
            k_c,
            k_f,
            ofr_hidden: (d_c / 2).max(1),
            use_ofr: true,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Disables the re-embedder; the fine branch then runs at width `d_c`.
    pub fn without_ofr(mut self) -> Self {
        self.use_ofr = false;
        self.d_f = self.d_c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_c == 0 || self.k_f < self.k_c {
            return Err(HmilError::Config(format!(
                "need K_f >= K_c >= 1, got K_c = {}, K_f = {}",
                self.k_c, self.k_f
            )));
        }
        if self.d_c == 0 || self.d_f == 0 || self.ofr_hidden == 0 {
            return Err(HmilError::Config("feature widths must be positive".into()));
        }
        if !self.use_ofr && self.d_f != self.d_c {
            return Err(HmilError::Config(format!(
                "without the re-embedder d_f must equal d_c ({} != {})",
                self.d_f, self.d_c
            )));
        }
        Ok(())
    }

    pub fn coarse_attention_width(&self) -> usize {
        (self.d_c / 4).max(1)
    }

    pub fn fine_attention_width(&self) -> usize {
        (self.d_f / 4).max(1)
    }
}

/// Uniform init on `(-s, s)` with `s = sqrt(6 / (rows + cols))`.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-s..s)).collect();
    Matrix::new(rows, cols, data).expect("length matches")
}

/// Two-layer perceptron `d_c -> hidden -> d_f` with a tanh hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Ofr {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Gated attention producing one distribution over instances per class.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedAttention {
    pub v1: Matrix,
    pub v2: Matrix,
    pub w: Matrix,
}

impl GatedAttention {
    pub(crate) fn init(rng: &mut ChaCha8Rng, d: usize, hidden: usize, k: usize) -> Self {
        GatedAttention {
            v1: glorot(rng, d, hidden),
            v2: glorot(rng, d, hidden),
            w: glorot(rng, hidden, k),
        }
    }
}

/// One linear head per class row: `logit_k = w_k . B[k] + bias_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHeads {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmilModel {
    pub config: HmilConfig,
    pub ofr: Option<Ofr>,
    pub coarse_attention: GatedAttention,
    pub coarse_heads: ClassHeads,
    pub fine_attention: GatedAttention,
    pub fine_heads: ClassHeads,
}

/// Values produced by one forward pass over a bag.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub a_c: Matrix,
    pub a_f: Matrix,
    pub b_c: Matrix,
    pub b_f: Matrix,
    pub p_c: Vec<f64>,
    pub p_f: Vec<f64>,
}

/// Graph handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub h_f: NodeId,
    pub a_c: NodeId,
    pub a_f: NodeId,
    pub b_c: NodeId,
    pub b_f: NodeId,
    pub logits_c: NodeId,
    pub logits_f: NodeId,
    pub p_c: NodeId,
    pub p_f: NodeId,
}

/// Parameters of an [`HmilModel`] registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundHmil {
    ids: Vec<NodeId>,
    use_ofr: bool,
}

impl HmilModel {
    pub fn init(config: HmilConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ofr = config.use_ofr.then(|| Ofr {
            w1: glorot(&mut rng, config.d_c, config.ofr_hidden),
            b1: Matrix::zeros(1, config.ofr_hidden),
            w2: glorot(&mut rng, config.ofr_hidden, config.d_f),
            b2: Matrix::zeros(1, config.d_f),
        });
        let coarse_attention = GatedAttention::init(&mut rng, config.d_c, config.coarse_attention_width(), config.k_c);
        let coarse_heads = ClassHeads {
            weight: glorot(&mut rng, config.k_c, config.d_c),
            bias: Matrix::zeros(1, config.k_c),
        };
        let fine_attention = GatedAttention::init(&mut rng, config.d_f, config.fine_attention_width(), config.k_f);
        let fine_heads = ClassHeads {
            weight: glorot(&mut rng, config.k_f, config.d_f),
            bias: Matrix::zeros(1, config.k_f),
        };
        Ok(HmilModel {
            config,
            ofr,
            coarse_attention,
            coarse_heads,
            fine_attention,
            fine_heads,
        })
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::with_capacity(14);
        if let Some(o) = &self.ofr {
            out.extend([("ofr.w1", &o.w1), ("ofr.b1", &o.b1), ("ofr.w2", &o.w2), ("ofr.b2", &o.b2)]);
        }
        out.extend([
            ("coarse.attention.v1", &self.coarse_attention.v1),
            ("coarse.attention.v2", &self.coarse_attention.v2),
            ("coarse.attention.w", &self.coarse_attention.w),
            ("coarse.heads.weight", &self.coarse_heads.weight),
            ("coarse.heads.bias", &self.coarse_heads.bias),
            ("fine.attention.v1", &self.fine_attention.v1),
            ("fine.attention.v2", &self.fine_attention.v2),
            ("fine.attention.w", &self.fine_attention.w),
            ("fine.heads.weight", &self.fine_heads.weight),
            ("fine.heads.bias", &self.fine_heads.bias),
        ]);
        out
    }

    pub fn parameters(&self) -> Vec<&Matrix> {
        self.named_parameters().into_iter().map(|(_, m)| m).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::with_capacity(14);
        if let Some(o) = &mut self.ofr {
            out.extend([&mut o.w1, &mut o.b1, &mut o.w2, &mut o.b2]);
        }
        out.extend([
            &mut self.coarse_attention.v1,
            &mut self.coarse_attention.v2,
            &mut self.coarse_attention.w,
            &mut self.coarse_heads.weight,
            &mut self.coarse_heads.bias,
            &mut self.fine_attention.v1,
            &mut self.fine_attention.v2,
            &mut self.fine_attention.w,
            &mut self.fine_heads.weight,
            &mut self.fine_heads.bias,
        ]);
        out
    }

    /// Replaces parameters from `(name, matrix)` pairs; names and shapes must match.
    pub fn load_parameters(&mut self, named: Vec<(String, Matrix)>) -> Result<()> {
        let expected: Vec<(String, (usize, usize))> = self
            .named_parameters()
            .iter()
            .map(|(n, m)| (n.to_string(), m.shape()))
            .collect();
        if expected.len() != named.len() {
            return Err(HmilError::Config(format!(
                "expected {} parameter matrices, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape), (got_name, m)) in expected.iter().zip(&named) {
            if name != got_name || *shape != m.shape() {
                return Err(HmilError::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    m.shape()
                )));
            }
        }
        for (slot, (_, m)) in self.parameters_mut().into_iter().zip(named) {
            *slot = m;
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|m| m.len()).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundHmil> {
        let ids = self
            .parameters()
            .into_iter()
            .map(|m| g.param(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundHmil {
            ids,
            use_ofr: self.ofr.is_some(),
        })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, h_c: &Matrix, projection: &Projection) -> Result<ForwardOutput> {
        if projection.num_coarse() != self.config.k_c || projection.num_fine() != self.config.k_f {
            return Err(HmilError::Shape {
                op: "forward",
                lhs: (self.config.k_c, self.config.k_f),
                rhs: projection.matrix().shape(),
            });
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let h = g.constant(h_c.clone())?;
        let n = bound.forward(&mut g, h)?;
        Ok(ForwardOutput {
            a_c: g.value(n.a_c).clone(),
            a_f: g.value(n.a_f).clone(),
            b_c: g.value(n.b_c).clone(),
            b_f: g.value(n.b_f).clone(),
            p_c: g.value(n.p_c).data().to_vec(),
            p_f: g.value(n.p_f).data().to_vec(),
        })
    }
}

impl BoundHmil {
    /// Parameter nodes in [`HmilModel::parameters`] order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Rebinds to externally created parameter nodes, e.g. inside a gradient check.
    pub fn from_ids(model: &HmilModel, ids: &[NodeId]) -> Result<Self> {
        if ids.len() != model.parameters().len() {
            return Err(HmilError::Graph(format!(
                "expected {} parameter nodes, got {}",
                model.parameters().len(),
                ids.len()
            )));
        }
        Ok(BoundHmil {
            ids: ids.to_vec(),
            use_ofr: model.ofr.is_some(),
        })
    }

    fn offset(&self) -> usize {
        if self.use_ofr {
            4
        } else {
            0
        }
    }

    pub fn forward(&self, g: &mut Graph, h_c: NodeId) -> Result<ForwardNodes> {
        let ids = &self.ids;
        let o = self.offset();
        let h_f = if self.use_ofr {
            ofr_forward(g, h_c, ids[0], ids[1], ids[2], ids[3])?
        } else {
            h_c
        };
        let a_c = gated_attention(g, h_c, ids[o], ids[o + 1], ids[o + 2])?;
        let b_c = attention_pool(g, a_c, h_c)?;
        let logits_c = classify(g, b_c, ids[o + 3], ids[o + 4])?;
        let p_c = g.softmax_rows(logits_c)?;

        let a_f = gated_attention(g, h_f, ids[o + 5], ids[o + 6], ids[o + 7])?;
        let b_f = attention_pool(g, a_f, h_f)?;
        let logits_f = classify(g, b_f, ids[o + 8], ids[o + 9])?;
        let p_f = g.softmax_rows(logits_f)?;
        Ok(ForwardNodes {
            h_f,
            a_c,
            a_f,
            b_c,
            b_f,
            logits_c,
            logits_f,
            p_c,
            p_f,
        })
    }
}

/// `tanh(h W1 + b1) W2 + b2`, applied per instance.
pub fn ofr_forward(g: &mut Graph, h: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId) -> Result<NodeId> {
    let z1 = g.matmul(h, w1)?;
    let z1 = g.add_row(z1, b1)?;
    let a1 = g.tanh(z1)?;
    let z2 = g.matmul(a1, w2)?;
    g.add_row(z2, b2)
}

/// `K x N` attention: per class, a softmax over instances of
/// `(tanh(h V1) * sigmoid(h V2)) W`.
pub fn gated_attention(g: &mut Graph, h: NodeId, v1: NodeId, v2: NodeId, w: NodeId) -> Result<NodeId> {
    let t = g.matmul(h, v1)?;
    let t = g.tanh(t)?;
    let s = g.matmul(h, v2)?;
    let s = g.sigmoid(s)?;
    let gate = g.hadamard(t, s)?;
    let scores = g.matmul(gate, w)?;
    let scores = g.transpose(scores)?;
    g.softmax_rows(scores)
}

/// `B = A h`: each class row is a convex combination of instance rows.
pub fn attention_pool(g: &mut Graph, a: NodeId, h: NodeId) -> Result<NodeId> {
    g.matmul(a, h)
}

/// Class-wise logits as a `1 x K` row.
pub fn classify(g: &mut Graph, b: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let prod = g.hadamard(weight, b)?;
    let col = g.row_sum(prod)?;
    let row = g.transpose(col)?;
    g.add(row, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::Taxonomy;
    use crate::tensor::grad_check;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn small_model(seed: u64) -> (HmilModel, Projection) {
        let cfg = HmilConfig::new(16, 2, 4, seed).unwrap();
        (HmilModel::init(cfg).unwrap(), Taxonomy::balanced(2, 4).unwrap().projection())
    }

    #[test]
    fn init_is_deterministic_and_defaults_d_f() {
        let cfg = HmilConfig::new(16, 2, 4, 9).unwrap();
        assert_eq!(cfg.d_f, 4);
        let a = HmilModel::init(cfg.clone()).unwrap();
        let b = HmilModel::init(cfg).unwrap();
        assert_eq!(a, b);
        let s = (6.0f64 / (16 + 8) as f64).sqrt();
        let w1 = &a.ofr.as_ref().unwrap().w1;
        assert!(w1.data().iter().all(|v| v.abs() < s));
        assert!(a.coarse_heads.bias.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn config_rejects_more_coarse_than_fine() {
        assert!(matches!(HmilConfig::new(16, 3, 2, 0), Err(HmilError::Config(_))));
        assert!(matches!(HmilConfig::new(18, 2, 4, 0), Err(HmilError::Config(_))));
    }

    #[test]
    fn ofr_shapes_and_zero_propagation() {
        let (mut model, _) = small_model(1);
        let mut g = Graph::new();
        let b = model.bind(&mut g).unwrap();
        let h = g.constant(Matrix::filled(1, 16, 0.3)).unwrap();
        let ids = b.ids();
        let out = ofr_forward(&mut g, h, ids[0], ids[1], ids[2], ids[3]).unwrap();
        assert_eq!(g.value(out).shape(), (1, 4));

        let ofr = model.ofr.as_mut().unwrap();
        ofr.b1 = Matrix::zeros(1, 8);
        ofr.b2 = Matrix::zeros(1, 4);
        let mut g = Graph::new();
        let b = model.bind(&mut g).unwrap();
        let h = g.constant(Matrix::zeros(3, 16)).unwrap();
        let ids = b.ids();
        let out = ofr_forward(&mut g, h, ids[0], ids[1], ids[2], ids[3]).unwrap();
        assert_eq!(g.value(out), &Matrix::zeros(3, 4));
    }

    #[test]
    fn ofr_gradient_matches_finite_differences() {
        let (model, _) = small_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_matrix(&mut rng, 5, 16);
        let ofr = model.ofr.unwrap();
        let params = vec![ofr.w1, random_matrix(&mut rng, 1, 8), ofr.w2, random_matrix(&mut rng, 1, 4)];
        let err = grad_check(&params, 1e-5, |g, p| {
            let hn = g.constant(h.clone())?;
            let out = ofr_forward(g, hn, p[0], p[1], p[2], p[3])?;
            g.sum(out)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    fn naive_gated_attention(h: &Matrix, v1: &Matrix, v2: &Matrix, w: &Matrix) -> Matrix {
        let (n, d) = h.shape();
        let hidden = v1.cols();
        let k = w.cols();
        let mut scores = vec![vec![0.0; n]; k];
        for i in 0..n {
            let mut gate = vec![0.0; hidden];
            for j in 0..hidden {
                let mut a = 0.0;
                let mut b = 0.0;
                for p in 0..d {
                    a += h.get(i, p) * v1.get(p, j);
                    b += h.get(i, p) * v2.get(p, j);
                }
                gate[j] = a.tanh() * (1.0 / (1.0 + (-b).exp()));
            }
            for c in 0..k {
                scores[c][i] = (0..hidden).map(|j| gate[j] * w.get(j, c)).sum();
            }
        }
        let rows: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| {
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                s.iter().map(|v| v.exp() / z).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn gated_attention_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_matrix(&mut rng, 5, 8);
        let att = GatedAttention::init(&mut rng, 8, 2, 3);
        let mut g = Graph::new();
        let hn = g.constant(h.clone()).unwrap();
        let v1 = g.constant(att.v1.clone()).unwrap();
        let v2 = g.constant(att.v2.clone()).unwrap();
        let w = g.constant(att.w.clone()).unwrap();
        let a = gated_attention(&mut g, hn, v1, v2, w).unwrap();
        let expected = naive_gated_attention(&h, &att.v1, &att.v2, &att.w);
        assert!(g.value(a).max_abs_diff(&expected) < 1e-12);
        for r in 0..3 {
            assert!((g.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_attention_singleton_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let att = GatedAttention::init(&mut rng, 4, 1, 2);
        let mut g = Graph::new();
        let v1 = g.constant(att.v1.clone()).unwrap();
        let v2 = g.constant(att.v2.clone()).unwrap();
        let w = g.constant(att.w.clone()).unwrap();
        let single = g.constant(random_matrix(&mut rng, 1, 4)).unwrap();
        let a = gated_attention(&mut g, single, v1, v2, w).unwrap();
        assert_eq!(g.value(a), &Matrix::filled(2, 1, 1.0));

        let row = random_matrix(&mut rng, 1, 4);
        let dup = Matrix::from_rows(&[row.row(0), row.row(0), row.row(0)]).unwrap();
        let dup = g.constant(dup).unwrap();
        let a = gated_attention(&mut g, dup, v1, v2, w).unwrap();
        for r in 0..2 {
            for v in g.value(a).row(r) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn attention_pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::new();
        let r = random_matrix(&mut rng, 1, 6);
        let same = g.constant(Matrix::from_rows(&[r.row(0); 4]).unwrap()).unwrap();
        let uniform = g.constant(Matrix::filled(1, 4, 0.25)).unwrap();
        let b = attention_pool(&mut g, uniform, same).unwrap();
        assert!(g.value(b).max_abs_diff(&r) < 1e-15);

        let h = random_matrix(&mut rng, 4, 6);
        let hn = g.constant(h.clone()).unwrap();
        let onehot = g.constant(Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0]]).unwrap()).unwrap();
        let b = attention_pool(&mut g, onehot, hn).unwrap();
        assert_eq!(g.value(b).row(0), h.row(2));

        let a = random_matrix(&mut rng, 3, 4);
        let an = g.constant(a.clone()).unwrap();
        let b = attention_pool(&mut g, an, hn).unwrap();
        assert!(g.value(b).max_abs_diff(&naive_matmul(&a, &h)) < 1e-12);
    }

    #[test]
    fn classify_examples() {
        let mut g = Graph::new();
        let b = g.constant(Matrix::zeros(3, 5)).unwrap();
        let w = g.constant(Matrix::filled(3, 5, 0.7)).unwrap();
        let bias = g.constant(Matrix::zeros(1, 3)).unwrap();
        let logits = classify(&mut g, b, w, bias).unwrap();
        let p = g.softmax_rows(logits).unwrap();
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let b1 = g.constant(Matrix::filled(1, 2, 3.0)).unwrap();
        let w1 = g.constant(Matrix::filled(1, 2, -1.0)).unwrap();
        let bias1 = g.constant(Matrix::scalar(0.4)).unwrap();
        let l = classify(&mut g, b1, w1, bias1).unwrap();
        let p = g.softmax_rows(l).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);

        let logits = g.constant(Matrix::from_rows(&[[0.2, -1.0, 3.0]]).unwrap()).unwrap();
        let shifted = g.shift(logits, 17.5).unwrap();
        let p1 = g.softmax_rows(logits).unwrap();
        let p2 = g.softmax_rows(shifted).unwrap();
        assert!(g.value(p1).max_abs_diff(g.value(p2)) < 1e-12);
    }

    #[test]
    fn forward_singleton_bag_pools_the_instance() {
        let (model, proj) = small_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_matrix(&mut rng, 1, 16);
        let out = model.forward(&h, &proj).unwrap();
        for r in 0..2 {
            assert!(out.b_c.row(r).iter().zip(h.row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let hn = g.constant(h).unwrap();
        let n = bound.forward(&mut g, hn).unwrap();
        let h_f = g.value(n.h_f).row(0).to_vec();
        for r in 0..4 {
            assert!(out.b_f.row(r).iter().zip(&h_f).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn forward_rejects_wrong_projection_or_width() {
        let (model, _) = small_model(3);
        let wrong = Taxonomy::balanced(2, 5).unwrap().projection();
        assert!(model.forward(&Matrix::zeros(2, 16), &wrong).is_err());
        let proj = Taxonomy::balanced(2, 4).unwrap().projection();
        assert!(matches!(
            model.forward(&Matrix::zeros(2, 15), &proj),
            Err(HmilError::Shape { .. })
        ));
    }

    #[test]
    fn without_ofr_fine_branch_uses_coarse_features() {
        let cfg = HmilConfig::new(16, 2, 4, 1).unwrap().without_ofr();
        let model = HmilModel::init(cfg).unwrap();
        assert!(model.ofr.is_none());
        assert_eq!(model.fine_heads.weight.shape(), (4, 16));
        let proj = Taxonomy::balanced(2, 4).unwrap().projection();
        let out = model.forward(&Matrix::filled(3, 16, 0.1), &proj).unwrap();
        assert_eq!(out.b_f.shape(), (4, 16));
    }
}
