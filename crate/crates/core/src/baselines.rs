//! Flat MIL baselines: mean pooling, max pooling and single-head gated
//! attention, each followed by one shared linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBag};
use crate::error::{HmilError, Result};
use crate::losses::{cross_entropy_node, LossBreakdown};
use crate::model::{gated_attention, glorot, GatedAttention};
use crate::tensor::{softmax, Graph, Matrix, NodeId};
use crate::train::{fit, BagScores, Learner, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlatVariant {
    Mean,
    Max,
    Abmil,
}

impl std::str::FromStr for FlatVariant {
    type Err = HmilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FlatVariant::Mean),
            "max" => Ok(FlatVariant::Max),
            "abmil" => Ok(FlatVariant::Abmil),
            other => Err(HmilError::Config(format!("unknown flat variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLevel {
    #[default]
    Fine,
    Coarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatConfig {
    pub variant: FlatVariant,
    pub d: usize,
    pub k: usize,
    pub level: LabelLevel,
    pub seed: u64,
}

impl FlatConfig {
    pub fn attention_width(&self) -> usize {
        (self.d / 4).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatModel {
    pub config: FlatConfig,
    /// Present for the attention variant only.
    pub attention: Option<GatedAttention>,
    /// `d x K` classifier weight.
    pub weight: Matrix,
    pub bias: Matrix,
}

impl FlatModel {
    pub fn init(config: FlatConfig) -> Result<Self> {
        if config.d == 0 || config.k == 0 {
            return Err(HmilError::Config("flat model needs d >= 1 and K >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let attention =
            (config.variant == FlatVariant::Abmil).then(|| GatedAttention::init(&mut rng, config.d, config.attention_width(), 1));
        let weight = glorot(&mut rng, config.d, config.k);
        let bias = Matrix::zeros(1, config.k);
        Ok(FlatModel {
            config,
            attention,
            weight,
            bias,
        })
    }

    pub fn named_parameters(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::with_capacity(5);
        if let Some(a) = &self.attention {
            out.extend([("attention.v1", &a.v1), ("attention.v2", &a.v2), ("attention.w", &a.w)]);
        }
        out.extend([("head.weight", &self.weight), ("head.bias", &self.bias)]);
        out
    }

    pub fn parameters(&self) -> Vec<&Matrix> {
        self.named_parameters().into_iter().map(|(_, m)| m).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::with_capacity(5);
        if let Some(a) = &mut self.attention {
            out.extend([&mut a.v1, &mut a.v2, &mut a.w]);
        }
        out.extend([&mut self.weight, &mut self.bias]);
        out
    }

    pub fn load_parameters(&mut self, named: Vec<(String, Matrix)>) -> Result<()> {
        let expected: Vec<(String, (usize, usize))> = self
            .named_parameters()
            .iter()
            .map(|(n, m)| (n.to_string(), m.shape()))
            .collect();
        if expected.len() != named.len()
            || expected.iter().zip(&named).any(|((n, s), (gn, m))| n != gn || *s != m.shape())
        {
            return Err(HmilError::Config("checkpoint parameters do not match the flat model".into()));
        }
        for (slot, (_, m)) in self.parameters_mut().into_iter().zip(named) {
            *slot = m;
        }
        Ok(())
    }

    fn label(&self, bag: &FeatureBag) -> usize {
        match self.config.level {
            LabelLevel::Fine => bag.y_f,
            LabelLevel::Coarse => bag.y_c,
        }
    }

    /// Bag logits (`1 x K`) and, for the attention variant, the `1 x N`
    /// attention row.
    fn forward_nodes(&self, g: &mut Graph, params: &[NodeId], h: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let (hn, d) = g.value(h).shape();
        if d != self.config.d {
            return Err(HmilError::Shape {
                op: "flat_forward",
                lhs: (hn, d),
                rhs: (hn, self.config.d),
            });
        }
        let (pooled, attention, head) = match self.config.variant {
            FlatVariant::Mean => {
                let avg = g.constant(Matrix::filled(1, hn, 1.0 / hn as f64))?;
                (g.matmul(avg, h)?, None, 0)
            }
            FlatVariant::Max => {
                let x = g.value(h);
                let mut sel = Matrix::zeros(d, hn);
                for c in 0..d {
                    let mut best = 0;
                    for r in 1..hn {
                        if x.get(r, c) > x.get(best, c) {
                            best = r;
                        }
                    }
                    sel.set(c, best, 1.0);
                }
                // Row c of sel picks the argmax instance of column c, so the
                // diagonal of sel * h is the columnwise maximum.
                let sel = g.constant(sel)?;
                let picked = g.matmul(sel, h)?;
                let eye = g.constant(Matrix::identity(d))?;
                let diag = g.hadamard(picked, eye)?;
                let ones = g.constant(Matrix::filled(1, d, 1.0))?;
                (g.matmul(ones, diag)?, None, 0)
            }
            FlatVariant::Abmil => {
                let a = gated_attention(g, h, params[0], params[1], params[2])?;
                (g.matmul(a, h)?, Some(a), 3)
            }
        };
        let logits = g.matmul(pooled, params[head])?;
        let logits = g.add(logits, params[head + 1])?;
        Ok((logits, attention))
    }

    /// Class probabilities for one bag.
    pub fn forward(&self, h: &Matrix) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params = self
            .parameters()
            .into_iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let hn = g.constant(h.clone())?;
        let (logits, _) = self.forward_nodes(&mut g, &params, hn)?;
        Ok(softmax(g.value(logits).data()))
    }

    /// Pooled bag vector before the classifier.
    pub fn bag_vector(&self, h: &Matrix) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params = self
            .parameters()
            .into_iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let hn = g.constant(h.clone())?;
        let (logits, attention) = self.forward_nodes(&mut g, &params, hn)?;
        // Pooled vector is the left operand of the head matmul.
        let head_mm = g.parents(logits)[0];
        let pooled = g.parents(head_mm)[0];
        let _ = attention;
        Ok(g.value(pooled).data().to_vec())
    }

    /// Attention weights over instances (attention variant only).
    pub fn attention_weights(&self, h: &Matrix) -> Result<Option<Vec<f64>>> {
        let mut g = Graph::new();
        let params = self
            .parameters()
            .into_iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let hn = g.constant(h.clone())?;
        let (_, attention) = self.forward_nodes(&mut g, &params, hn)?;
        Ok(attention.map(|a| g.value(a).data().to_vec()))
    }
}

impl Learner for FlatModel {
    fn parameters(&self) -> Vec<&Matrix> {
        FlatModel::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        FlatModel::parameters_mut(self)
    }

    fn batch_objective(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        batch: &[&FeatureBag],
        _epoch: usize,
        _cfg: &TrainConfig,
    ) -> Result<(NodeId, LossBreakdown)> {
        let mut acc: Option<NodeId> = None;
        for bag in batch {
            let h = g.constant(bag.features.clone())?;
            let (logits, _) = self.forward_nodes(g, params, h)?;
            let ce = cross_entropy_node(g, logits, self.label(bag))?;
            acc = Some(match acc {
                Some(a) => g.add(a, ce)?,
                None => ce,
            });
        }
        let sum = acc.ok_or_else(|| HmilError::Data("empty batch".into()))?;
        let loss = g.scale(sum, 1.0 / batch.len() as f64)?;
        let ce = g.scalar(loss);
        Ok((
            loss,
            LossBreakdown {
                ce_c: 0.0,
                ce_f: ce,
                ia: 0.0,
                ba: 0.0,
                reg: 0.0,
                beta: 1.0,
                total: ce,
            },
        ))
    }

    fn score(&self, bag: &FeatureBag) -> Result<BagScores> {
        Ok(BagScores {
            target: self.forward(&bag.features)?,
            coarse: None,
        })
    }

    fn target(&self, bag: &FeatureBag) -> usize {
        self.label(bag)
    }

    fn hierarchical(&self) -> bool {
        false
    }
}

/// Trains a flat baseline with cross-entropy on its label level.
pub fn train_flat(model: &FlatModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(FlatModel, TrainHistory)> {
    let k = match model.config.level {
        LabelLevel::Fine => dataset.taxonomy.num_fine(),
        LabelLevel::Coarse => dataset.taxonomy.num_coarse(),
    };
    if model.config.d != dataset.d || model.config.k != k {
        return Err(HmilError::Config(format!(
            "flat model is {} x {}, dataset needs {} x {k}",
            model.config.d, model.config.k, dataset.d
        )));
    }
    fit(model, dataset, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn model(variant: FlatVariant, d: usize) -> FlatModel {
        FlatModel::init(FlatConfig {
            variant,
            d,
            k: 3,
            level: LabelLevel::Fine,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn mean_of_identical_instances() {
        let m = model(FlatVariant::Mean, 3);
        let h = Matrix::from_rows(&[[0.5, -1.0, 2.0]; 4]).unwrap();
        assert_eq!(m.bag_vector(&h).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn max_of_one_hot_rows_is_union() {
        let m = model(FlatVariant::Max, 4);
        let h = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(m.bag_vector(&h).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn abmil_singleton_returns_the_instance() {
        let m = model(FlatVariant::Abmil, 8);
        let h = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8]]).unwrap();
        assert_eq!(m.bag_vector(&h).unwrap(), h.row(0).to_vec());
        assert_eq!(m.attention_weights(&h).unwrap().unwrap(), vec![1.0]);
    }

    #[test]
    fn probabilities_are_normalized() {
        for v in [FlatVariant::Mean, FlatVariant::Max, FlatVariant::Abmil] {
            let m = model(v, 4);
            let h = Matrix::from_rows(&[[0.3, -0.1, 0.9, 0.0], [1.2, 0.4, -0.3, 0.5]]).unwrap();
            let p = m.forward(&h).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let m = model(FlatVariant::Mean, 4);
        assert!(matches!(m.forward(&Matrix::zeros(2, 3)), Err(HmilError::Shape { .. })));
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let h = Matrix::from_rows(&[[0.3, -0.1, 0.9, 0.0], [1.2, 0.4, -0.3, 0.5], [-0.7, 0.2, 0.1, 0.6]]).unwrap();
        let bag = FeatureBag {
            bag_id: "b".into(),
            features: h,
            y_f: 2,
            y_c: 1,
            split: crate::data::Split::Train,
        };
        for v in [FlatVariant::Mean, FlatVariant::Max, FlatVariant::Abmil] {
            let m = model(v, 4);
            let params: Vec<Matrix> = m.parameters().into_iter().cloned().collect();
            let cfg = TrainConfig::default();
            let err = grad_check(&params, 1e-5, |g, ids| {
                Ok(m.batch_objective(g, ids, &[&bag], 0, &cfg)?.0)
            })
            .unwrap();
            assert!(err <= 1e-4, "{v:?}: {err}");
        }
    }
}
