//! Scoring a dataset split with a trained model and assembling reports.

use serde::{Deserialize, Serialize};

use crate::baselines::LabelLevel;
use crate::checkpoint::AnyModel;
use crate::data::{Dataset, Split};
use crate::error::{HmilError, Result};
use crate::eval::{bootstrap_ci, hierarchy_consistency, MetricsReport, Resample};
use crate::tensor::Matrix;

/// Per-bag probabilities for one split, rows in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitScores {
    pub bag_ids: Vec<String>,
    pub y_f: Vec<usize>,
    pub y_c: Vec<usize>,
    /// `n x K_f`; absent for coarse-level flat models.
    pub fine: Option<Matrix>,
    /// `n x K_c`: the coarse head for HMIL, projected fine scores for a
    /// fine-level flat model.
    pub coarse: Matrix,
    /// Whether `coarse` comes from a separate coarse head.
    pub coarse_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fine: Option<MetricsReport>,
    pub coarse: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hierarchy_consistency: Option<f64>,
}

fn stack(rows: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(rows)
}

pub fn score_split(model: &AnyModel, ds: &Dataset, split: Split) -> Result<SplitScores> {
    let bags = ds.split(split);
    if bags.is_empty() {
        return Err(HmilError::Data(format!("split `{}` is empty", split.as_str())));
    }
    let projection = ds.taxonomy.projection();
    let mut fine = Vec::with_capacity(bags.len());
    let mut coarse = Vec::with_capacity(bags.len());
    for bag in &bags {
        match model {
            AnyModel::Hmil(m) => {
                let out = m.forward(&bag.features, &projection)?;
                fine.push(out.p_f);
                coarse.push(out.p_c);
            }
            AnyModel::Flat(m) => {
                let p = m.forward(&bag.features)?;
                match m.config.level {
                    LabelLevel::Fine => {
                        coarse.push(projection.project_vec(&p)?);
                        fine.push(p);
                    }
                    LabelLevel::Coarse => coarse.push(p),
                }
            }
        }
    }
    Ok(SplitScores {
        bag_ids: bags.iter().map(|b| b.bag_id.clone()).collect(),
        y_f: bags.iter().map(|b| b.y_f).collect(),
        y_c: bags.iter().map(|b| b.y_c).collect(),
        fine: if fine.is_empty() { None } else { Some(stack(&fine)?) },
        coarse: stack(&coarse)?,
        coarse_head: matches!(model, AnyModel::Hmil(_)),
    })
}

fn report(y: &[usize], scores: &Matrix, bootstrap: usize, seed: u64) -> Result<MetricsReport> {
    let mut r = MetricsReport::compute(y, scores)?;
    if bootstrap > 0 {
        r.bootstrap = Some(bootstrap_ci(y, scores, bootstrap, seed, Resample::WithReplacement)?);
    }
    Ok(r)
}

/// Fine and coarse reports for a split; `bootstrap = 0` skips intervals.
pub fn evaluate(model: &AnyModel, ds: &Dataset, split: Split, bootstrap: usize, seed: u64) -> Result<EvaluationReport> {
    let s = score_split(model, ds, split)?;
    let fine = s.fine.as_ref().map(|f| report(&s.y_f, f, bootstrap, seed)).transpose()?;
    let coarse = report(&s.y_c, &s.coarse, bootstrap, seed)?;
    let hierarchy_consistency = match (&s.fine, s.coarse_head) {
        (Some(f), true) => Some(hierarchy_consistency(
            &s.coarse.to_rows(),
            &f.to_rows(),
            &ds.taxonomy.projection(),
        )?),
        _ => None,
    };
    let model = match model {
        AnyModel::Hmil(_) => "hmil".to_string(),
        AnyModel::Flat(m) => serde_json::to_value(m.config.variant)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
    };
    Ok(EvaluationReport {
        split,
        model,
        fine,
        coarse,
        hierarchy_consistency,
    })
}
