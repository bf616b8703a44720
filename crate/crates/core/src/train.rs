//! Mini-batch training with Adam, the loss schedule and best-epoch selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBag, Split};
use crate::error::{HmilError, Result};
use crate::eval::MetricsReport;
use crate::hierarchy::Projection;
use crate::losses::{
    bag_alignment_node, cross_entropy_node, instance_alignment_node, supcon_node, LossBreakdown, LossComponents,
    LossMode, LossWeights,
};
use crate::model::{BoundHmil, HmilModel};
use crate::tensor::{Graph, Matrix, NodeId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    #[default]
    FineMacroAuc,
    FineF1,
}

/// Which loss terms take part. Disabling a term drops it from the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    /// Coarse branch classification loss.
    pub coarse_branch: bool,
    /// Instance-level attention alignment.
    pub ham: bool,
    /// Bag-level probability alignment.
    pub hba: bool,
    /// Supervised contrastive regularizer on fine bag features.
    pub scl: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            coarse_branch: true,
            ham: true,
            hba: true,
            scl: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// AdamW-style decay applied to the parameters instead of the gradient.
    pub decoupled_weight_decay: bool,
    pub loss_mode: LossMode,
    pub tau: f64,
    pub seed: u64,
    pub select_metric: SelectMetric,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub switches: Switches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 512,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            decoupled_weight_decay: false,
            loss_mode: LossMode::Dynamic,
            tau: 0.1,
            seed: 0,
            select_metric: SelectMetric::FineMacroAuc,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            switches: Switches::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HmilError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyperparameters".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decoupled: bool,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamHyper {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            decoupled: cfg.decoupled_weight_decay,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is added to the gradient
/// (`g + wd * p`) unless `decoupled` is set.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState, h: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(HmilError::Shape {
            op: "adam_step",
            lhs: (params.len(), state.m.len()),
            rhs: (grads.len(), 1),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(HmilError::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let mut gi = g.data()[i];
            if !h.decoupled {
                gi += h.weight_decay * pd[i];
            }
            let mi = &mut m.data_mut()[i];
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            if h.decoupled {
                pd[i] -= h.lr * h.weight_decay * pd[i];
            }
            pd[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Class probabilities for one bag at the target level, plus the coarse
/// branch probabilities for hierarchical models.
#[derive(Clone, Debug)]
pub struct BagScores {
    pub target: Vec<f64>,
    pub coarse: Option<Vec<f64>>,
}

/// A model the shared training loop can optimize.
pub trait Learner: Clone {
    fn parameters(&self) -> Vec<&Matrix>;
    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;

    /// Builds the batch objective on `g` over parameter nodes `params`.
    fn batch_objective(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        batch: &[&FeatureBag],
        epoch: usize,
        cfg: &TrainConfig,
    ) -> Result<(NodeId, LossBreakdown)>;

    fn score(&self, bag: &FeatureBag) -> Result<BagScores>;

    /// Label of `bag` at the level the model predicts.
    fn target(&self, bag: &FeatureBag) -> usize;

    /// Whether the log carries the hierarchical loss columns.
    fn hierarchical(&self) -> bool;
}

/// One training log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ia: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ba: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    pub total: f64,
    pub val_macro_auc: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_coarse_macro_auc: Option<f64>,
    /// Per-batch breakdowns; kept in memory only.
    #[serde(skip)]
    pub batches: Vec<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn mean_breakdown(batches: &[LossBreakdown]) -> LossBreakdown {
    let n = batches.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| batches.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        ce_c: avg(|b| b.ce_c),
        ce_f: avg(|b| b.ce_f),
        ia: avg(|b| b.ia),
        ba: avg(|b| b.ba),
        reg: avg(|b| b.reg),
        beta: batches[0].beta,
        total: avg(|b| b.total),
    }
}

pub(crate) fn validation_report<L: Learner>(model: &L, bags: &[&FeatureBag]) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let mut target = Vec::with_capacity(bags.len());
    let mut coarse = Vec::with_capacity(bags.len());
    for b in bags {
        let s = model.score(b)?;
        target.push(s.target);
        if let Some(c) = s.coarse {
            coarse.push(c);
        }
    }
    let labels: Vec<usize> = bags.iter().map(|b| model.target(b)).collect();
    let report = MetricsReport::compute(&labels, &Matrix::from_rows(&target)?)?;
    let coarse_report = if coarse.len() == bags.len() {
        let yc: Vec<usize> = bags.iter().map(|b| b.y_c).collect();
        Some(MetricsReport::compute(&yc, &Matrix::from_rows(&coarse)?)?)
    } else {
        None
    };
    Ok((report, coarse_report))
}

/// Runs the full schedule and returns the parameters of the best
/// validation epoch together with the per-epoch history.
pub fn fit<L: Learner>(initial: &L, dataset: &Dataset, cfg: &TrainConfig) -> Result<(L, TrainHistory)> {
    cfg.validate()?;
    let train_bags = dataset.split(Split::Train);
    let val_bags = dataset.split(Split::Val);
    if train_bags.is_empty() {
        return Err(HmilError::Data("training split is empty".into()));
    }
    if val_bags.is_empty() {
        return Err(HmilError::Data("validation split is empty".into()));
    }

    let mut model = initial.clone();
    let mut state = AdamState::new(&model.parameters());
    let hyper = AdamHyper::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut batches = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureBag> = chunk.iter().map(|&i| train_bags[i]).collect();
            let mut g = Graph::new();
            let ids = model
                .parameters()
                .into_iter()
                .map(|p| g.param(p.clone()))
                .collect::<Result<Vec<_>>>()?;
            let (loss, breakdown) = model.batch_objective(&mut g, &ids, &batch, epoch, cfg)?;
            let grads = g.backward_allow_unused(loss, &ids)?.into_matrices();
            if let Some(i) = grads.iter().position(|m| !m.is_finite()) {
                return Err(HmilError::Numeric(format!("epoch {epoch}: non-finite gradient for parameter {i}")));
            }
            adam_step(&mut model.parameters_mut(), &grads, &mut state, hyper)?;
            batches.push(breakdown);
        }

        let (val, val_coarse) = validation_report(&model, &val_bags)?;
        let score = match cfg.select_metric {
            SelectMetric::FineMacroAuc => val.macro_auc,
            SelectMetric::FineF1 => val.macro_f1,
        };
        if epoch == 0 || score.is_some_and(|s| s > best_score) {
            best = model.clone();
            best_epoch = epoch;
            best_score = score.unwrap_or(f64::NEG_INFINITY);
        }

        let mean = mean_breakdown(&batches);
        let hierarchical = model.hierarchical();
        records.push(EpochRecord {
            epoch,
            beta: hierarchical.then_some(mean.beta),
            ce_c: hierarchical.then_some(mean.ce_c),
            ce_f: hierarchical.then_some(mean.ce_f),
            ia: hierarchical.then_some(mean.ia),
            ba: hierarchical.then_some(mean.ba),
            reg: hierarchical.then_some(mean.reg),
            ce: (!hierarchical).then_some(mean.ce_f),
            total: mean.total,
            val_macro_auc: val.macro_auc,
            val_macro_f1: val.macro_f1,
            val_accuracy: val.accuracy,
            val_coarse_macro_auc: val_coarse.and_then(|r| r.macro_auc),
            batches,
        });
    }
    Ok((best, TrainHistory { records, best_epoch }))
}

/// Hierarchical model bundled with the projection its losses need.
#[derive(Clone, Debug)]
pub struct HmilLearner {
    pub model: HmilModel,
    pub projection: Projection,
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

fn in_component<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        HmilError::Numeric(m) => HmilError::Numeric(format!("{name}: {m}")),
        other => other,
    })
}

/// Builds the weighted HMIL objective for a batch. Classification and
/// alignment terms are averaged over bags; the contrastive term is
/// computed once over the batch.
pub fn hmil_objective(
    g: &mut Graph,
    bound: &BoundHmil,
    projection: &Projection,
    batch: &[&FeatureBag],
    weights: LossWeights,
    cfg: &TrainConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let sw = cfg.switches;
    let p = g.constant(projection.matrix().clone())?;
    let pt = g.constant(projection.matrix().transpose())?;
    let (mut ce_c, mut ce_f, mut ia, mut ba, mut b_f) = (vec![], vec![], vec![], vec![], vec![]);
    for bag in batch {
        let h = g.constant(bag.features.clone())?;
        let out = bound.forward(g, h)?;
        ce_f.push(in_component("ce_f", cross_entropy_node(g, out.logits_f, bag.y_f))?);
        if sw.coarse_branch {
            ce_c.push(in_component("ce_c", cross_entropy_node(g, out.logits_c, bag.y_c))?);
            if sw.ham {
                ia.push(in_component("ia", instance_alignment_node(g, out.a_c, out.a_f, p))?);
            }
            if sw.hba {
                ba.push(in_component("ba", bag_alignment_node(g, out.p_f, bag.y_c, pt))?);
            }
        }
        b_f.push(out.b_f);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut components = LossComponents::default();
    let mut mean_term = |g: &mut Graph, nodes: &[NodeId], weight: f64| -> Result<Option<f64>> {
        if nodes.is_empty() {
            return Ok(None);
        }
        let s = sum_nodes(g, nodes)?;
        let m = g.scale(s, scale)?;
        terms.push((m, weight));
        Ok(Some(g.scalar(m)))
    };
    components.ce_f = mean_term(g, &ce_f, weights.ce_f)?.unwrap_or(0.0);
    components.ce_c = mean_term(g, &ce_c, weights.ce_c)?.unwrap_or(0.0);
    components.ia = mean_term(g, &ia, weights.ia)?.unwrap_or(0.0);
    components.ba = mean_term(g, &ba, weights.ba)?.unwrap_or(0.0);
    if sw.scl {
        let labels: Vec<usize> = batch.iter().map(|b| b.y_f).collect();
        if let Some(reg) = in_component("reg", supcon_node(g, &b_f, &labels, cfg.tau))? {
            components.reg = g.scalar(reg);
            terms.push((reg, weights.reg));
        }
    }

    let mut weighted = Vec::with_capacity(terms.len());
    for (node, w) in terms {
        weighted.push(g.scale(node, w)?);
    }
    let total = sum_nodes(g, &weighted)?;
    let breakdown = LossBreakdown {
        ce_c: components.ce_c,
        ce_f: components.ce_f,
        ia: components.ia,
        ba: components.ba,
        reg: components.reg,
        beta: weights.beta,
        total: g.scalar(total),
    };
    if !breakdown.total.is_finite() {
        return Err(HmilError::Numeric(format!("non-finite total loss: {breakdown:?}")));
    }
    Ok((total, breakdown))
}

impl Learner for HmilLearner {
    fn parameters(&self) -> Vec<&Matrix> {
        self.model.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.model.parameters_mut()
    }

    fn batch_objective(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        batch: &[&FeatureBag],
        epoch: usize,
        cfg: &TrainConfig,
    ) -> Result<(NodeId, LossBreakdown)> {
        let bound = BoundHmil::from_ids(&self.model, params)?;
        let weights = LossWeights::at(cfg.loss_mode, epoch, cfg.epochs)?;
        hmil_objective(g, &bound, &self.projection, batch, weights, cfg)
    }

    fn score(&self, bag: &FeatureBag) -> Result<BagScores> {
        let out = self.model.forward(&bag.features, &self.projection)?;
        Ok(BagScores {
            target: out.p_f,
            coarse: Some(out.p_c),
        })
    }

    fn target(&self, bag: &FeatureBag) -> usize {
        bag.y_f
    }

    fn hierarchical(&self) -> bool {
        true
    }
}

/// Trains an HMIL model on the dataset's train split, selecting on val.
pub fn train(model: &HmilModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(HmilModel, TrainHistory)> {
    if model.config.d_c != dataset.d {
        return Err(HmilError::Config(format!(
            "model expects width {}, dataset has {}",
            model.config.d_c, dataset.d
        )));
    }
    if model.config.k_c != dataset.taxonomy.num_coarse() || model.config.k_f != dataset.taxonomy.num_fine() {
        return Err(HmilError::Config("model class counts do not match the dataset taxonomy".into()));
    }
    let learner = HmilLearner {
        model: model.clone(),
        projection: dataset.taxonomy.projection(),
    };
    let (best, history) = fit(&learner, dataset, cfg)?;
    Ok((best.model, history))
}
