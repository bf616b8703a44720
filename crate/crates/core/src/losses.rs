//! Loss components and the schedules that combine them.
//!
//! Each component has a graph builder (used for training) and a plain
//! value function that evaluates the same builder on constant inputs.

use serde::{Deserialize, Serialize};

use crate::error::{HmilError, Result};
use crate::hierarchy::Projection;
use crate::tensor::{Graph, Matrix, NodeId};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Cross-entropy `-log softmax(logits)[y]` for a `1 x K` logit row.
pub fn cross_entropy_node(g: &mut Graph, logits: NodeId, y: usize) -> Result<NodeId> {
    let k = g.value(logits).cols();
    if y >= k {
        return Err(HmilError::Label(format!("label {y} out of range for {k} classes")));
    }
    let ls = g.log_softmax_rows(logits)?;
    let picked = g.pick(ls, 0, y)?;
    g.scale(picked, -1.0)
}

/// `-log p[y]` with the argument floored at [`LOG_FLOOR`].
pub fn cross_entropy(p: &[f64], y: usize) -> Result<f64> {
    let py = p
        .get(y)
        .ok_or_else(|| HmilError::Label(format!("label {y} out of range for {} classes", p.len())))?;
    Ok(-py.max(LOG_FLOOR).ln())
}

/// Instance-level alignment: mean over instances of
/// `1 - cos(A_c[:, i], (P A_f)[:, i])`.
pub fn instance_alignment_node(g: &mut Graph, a_c: NodeId, a_f: NodeId, projection: NodeId) -> Result<NodeId> {
    let (ac_shape, af_shape) = (g.value(a_c).shape(), g.value(a_f).shape());
    if ac_shape.1 != af_shape.1 {
        return Err(HmilError::Shape {
            op: "instance_alignment",
            lhs: ac_shape,
            rhs: af_shape,
        });
    }
    let projected = g.matmul(projection, a_f)?;
    let coarse_cols = g.transpose(a_c)?;
    let fine_cols = g.transpose(projected)?;
    let u = g.l2_normalize_rows(coarse_cols)?;
    let v = g.l2_normalize_rows(fine_cols)?;
    let prod = g.hadamard(u, v)?;
    let cosines = g.row_sum(prod)?;
    let mean = g.mean(cosines)?;
    let neg = g.scale(mean, -1.0)?;
    g.shift(neg, 1.0)
}

pub fn instance_alignment(a_c: &Matrix, a_f: &Matrix, projection: &Projection) -> Result<f64> {
    let mut g = Graph::new();
    let ac = g.constant(a_c.clone())?;
    let af = g.constant(a_f.clone())?;
    let p = g.constant(projection.matrix().clone())?;
    let ia = instance_alignment_node(&mut g, ac, af, p)?;
    Ok(g.scalar(ia))
}

/// Bag-level alignment `-log((P p_f)[y_c])` for a `1 x K_f` probability row.
pub fn bag_alignment_node(g: &mut Graph, p_f: NodeId, y_c: usize, projection_t: NodeId) -> Result<NodeId> {
    let k_c = g.value(projection_t).cols();
    if y_c >= k_c {
        return Err(HmilError::Label(format!("coarse label {y_c} out of range for {k_c} classes")));
    }
    let coarse = g.matmul(p_f, projection_t)?;
    let picked = g.pick(coarse, 0, y_c)?;
    let floored = g.clamp_min(picked, LOG_FLOOR)?;
    let log = g.log(floored)?;
    g.scale(log, -1.0)
}

pub fn bag_alignment(p_f: &[f64], y_c: usize, projection: &Projection) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Matrix::row_vector(p_f.to_vec()))?;
    let pt = g.constant(projection.matrix().transpose())?;
    let ba = bag_alignment_node(&mut g, p, y_c, pt)?;
    Ok(g.scalar(ba))
}

/// Anchor weights for the contrastive loss: `w[i][j] = 1 / (|P_i| * n_valid)`
/// for positives `j` of anchor `i`, where anchors without positives are
/// dropped and `n_valid` counts the rest.
pub(crate) fn supcon_weights(labels: &[usize]) -> Option<Matrix> {
    let b = labels.len();
    let positives: Vec<usize> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let valid = positives.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        return None;
    }
    let mut w = Matrix::zeros(b, b);
    for i in 0..b {
        if positives[i] == 0 {
            continue;
        }
        let wi = 1.0 / (positives[i] as f64 * valid as f64);
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                w.set(i, j, wi);
            }
        }
    }
    Some(w)
}

/// Supervised contrastive loss over a batch of fine bag representations.
///
/// Each `K_f x d_f` matrix is flattened and l2-normalized. Returns `None`
/// when no anchor has a positive, in which case the loss is zero.
pub fn supcon_node(g: &mut Graph, features: &[NodeId], labels: &[usize], tau: f64) -> Result<Option<NodeId>> {
    if !(tau > 0.0) {
        return Err(HmilError::Config(format!("temperature must be positive, got {tau}")));
    }
    if features.is_empty() || features.len() != labels.len() {
        return Err(HmilError::Data(format!(
            "contrastive batch has {} features and {} labels",
            features.len(),
            labels.len()
        )));
    }
    let Some(weights) = supcon_weights(labels) else {
        return Ok(None);
    };
    let b = labels.len();
    let flat = features
        .iter()
        .map(|&f| {
            let n = g.value(f).len();
            g.reshape(f, 1, n)
        })
        .collect::<Result<Vec<_>>>()?;
    let z = g.concat_rows(&flat)?;
    let z = g.l2_normalize_rows(z)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let mask: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let log_prob = g.log_softmax_rows_masked(sim, mask)?;
    let w = g.constant(weights)?;
    let weighted = g.hadamard(log_prob, w)?;
    let total = g.sum(weighted)?;
    Ok(Some(g.scale(total, -1.0)?))
}

pub fn supcon(features: &[Matrix], labels: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let ids = features
        .iter()
        .map(|f| g.constant(f.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(supcon_node(&mut g, &ids, labels, tau)?.map_or(0.0, |n| g.scalar(n)))
}

/// How the five components are weighted into one objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossMode {
    /// `beta (ce_c + ia + ba) + (1 - beta) reg + ce_f`, `beta = 1 - e/E`.
    Dynamic,
    /// `a (ce_f + ia + ba) + b reg + ce_c`.
    Static { a: f64, b: f64 },
    /// `beta (ce_f + ia + ba) + (1 - beta) reg + ce_c`.
    CoarseFocus,
}

impl std::str::FromStr for LossMode {
    type Err = HmilError;

    /// Parses `dynamic`, `coarse` or `static:a,b`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(LossMode::Dynamic),
            "coarse" | "coarse_focus" => Ok(LossMode::CoarseFocus),
            other => {
                let bad = || HmilError::Config(format!("invalid loss mode `{other}`"));
                let rest = other.strip_prefix("static:").ok_or_else(bad)?;
                let (a, b) = rest.split_once(',').ok_or_else(bad)?;
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                if !(a >= 0.0 && b >= 0.0) {
                    return Err(bad());
                }
                Ok(LossMode::Static { a, b })
            }
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossMode::Dynamic => write!(f, "dynamic"),
            LossMode::CoarseFocus => write!(f, "coarse"),
            LossMode::Static { a, b } => write!(f, "static:{a},{b}"),
        }
    }
}

/// `beta = (E - e) / E`, i.e. `1 - e/E` evaluated with a single rounding.
pub fn schedule_beta(epoch: usize, epochs: usize) -> Result<f64> {
    if epochs == 0 || epoch >= epochs {
        return Err(HmilError::Schedule(format!(
            "epoch {epoch} outside schedule of {epochs} epochs"
        )));
    }
    Ok((epochs - epoch) as f64 / epochs as f64)
}

/// Per-component weights at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce_c: f64,
    pub ce_f: f64,
    pub ia: f64,
    pub ba: f64,
    pub reg: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn at(mode: LossMode, epoch: usize, epochs: usize) -> Result<Self> {
        let beta = schedule_beta(epoch, epochs)?;
        Ok(match mode {
            LossMode::Dynamic => LossWeights {
                ce_c: beta,
                ce_f: 1.0,
                ia: beta,
                ba: beta,
                reg: 1.0 - beta,
                beta,
            },
            LossMode::CoarseFocus => LossWeights {
                ce_c: 1.0,
                ce_f: beta,
                ia: beta,
                ba: beta,
                reg: 1.0 - beta,
                beta,
            },
            LossMode::Static { a, b } => LossWeights {
                ce_c: 1.0,
                ce_f: a,
                ia: a,
                ba: a,
                reg: b,
                beta: a,
            },
        })
    }

    pub fn total(&self, c: &LossComponents) -> f64 {
        self.ce_c * c.ce_c + self.ce_f * c.ce_f + self.ia * c.ia + self.ba * c.ba + self.reg * c.reg
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce_c: f64,
    pub ce_f: f64,
    pub ia: f64,
    pub ba: f64,
    pub reg: f64,
}

/// Components, the weighting coefficient and the combined objective.
///
/// For static weighting `beta` reports the alignment-group weight `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_c: f64,
    pub ce_f: f64,
    pub ia: f64,
    pub ba: f64,
    pub reg: f64,
    pub beta: f64,
    pub total: f64,
}

pub fn combine(components: LossComponents, epoch: usize, epochs: usize, mode: LossMode) -> Result<LossBreakdown> {
    let w = LossWeights::at(mode, epoch, epochs)?;
    Ok(LossBreakdown {
        ce_c: components.ce_c,
        ce_f: components.ce_f,
        ia: components.ia,
        ba: components.ba,
        reg: components.reg,
        beta: w.beta,
        total: w.total(&components),
    })
}
