//! Classification metrics: one-vs-rest confusion statistics, rank AUC,
//! bootstrap intervals and a fine-to-coarse consistency rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HmilError, Result};
use crate::hierarchy::Projection;
use crate::tensor::{argmax, Matrix};

/// One-vs-rest statistics for one class. `None` marks an undefined value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_sensitivity: Option<f64>,
    pub macro_specificity: Option<f64>,
    pub macro_f1: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn check_labels(labels: &[usize], k: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(y) => Err(HmilError::Label(format!("{what} label {y} out of range for {k} classes"))),
        None => Ok(()),
    }
}

pub fn confusion_metrics(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(HmilError::Data(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(HmilError::Data("cannot score an empty prediction set".into()));
    }
    check_labels(y_true, k, "true")?;
    check_labels(y_pred, k, "predicted")?;

    let mut matrix = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        matrix[t][p] += 1;
    }
    let n = y_true.len();
    let correct: usize = (0..k).map(|c| matrix[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = matrix[c][c];
            let fn_ = matrix[c].iter().sum::<usize>() - tp;
            let fp = (0..k).map(|r| matrix[r][c]).sum::<usize>() - tp;
            let tn = n - tp - fn_ - fp;
            let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
            let support = tp + fn_;
            ClassMetrics {
                support,
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                f1: (support > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
            }
        })
        .collect();
    Ok(ConfusionMetrics {
        accuracy: correct as f64 / n as f64,
        macro_sensitivity: mean_defined(per_class.iter().map(|c| c.sensitivity)),
        macro_specificity: mean_defined(per_class.iter().map(|c| c.specificity)),
        macro_f1: mean_defined(per_class.iter().map(|c| c.f1)),
        per_class,
    })
}

/// Mann-Whitney AUC of `scores` for binary relevance `positive`.
/// Ties count one half. `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Midranks, 1-based, over groups of equal score.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: f64,
}

/// One-vs-rest AUC per class from an `n x K` score matrix.
pub fn auc_ovr(y_true: &[usize], scores: &Matrix) -> Result<AucReport> {
    if y_true.len() != scores.rows() {
        return Err(HmilError::Data(format!(
            "{} labels for {} score rows",
            y_true.len(),
            scores.rows()
        )));
    }
    if y_true.len() < 2 {
        return Err(HmilError::Data("AUC needs at least two samples".into()));
    }
    check_labels(y_true, scores.cols(), "true")?;
    let per_class: Vec<Option<f64>> = (0..scores.cols())
        .map(|k| {
            let relevance: Vec<bool> = y_true.iter().map(|&y| y == k).collect();
            binary_auc(&scores.column(k), &relevance)
        })
        .collect();
    let macro_auc = mean_defined(per_class.iter().copied())
        .ok_or_else(|| HmilError::Data("AUC undefined for every class (single-class input)".into()))?;
    Ok(AucReport { per_class, macro_auc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub accuracy: Option<Interval>,
    pub macro_specificity: Option<Interval>,
    pub macro_sensitivity: Option<Interval>,
    pub macro_f1: Option<Interval>,
    pub macro_auc: Option<Interval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_specificity: Option<f64>,
    pub macro_sensitivity: Option<f64>,
    pub macro_f1: Option<f64>,
    pub auc_per_class: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bootstrap: Option<BootstrapReport>,
}

impl MetricsReport {
    /// Point metrics; predictions are the per-row argmax of `scores`.
    pub fn compute(y_true: &[usize], scores: &Matrix) -> Result<Self> {
        let y_pred = predictions(scores);
        let cm = confusion_metrics(y_true, &y_pred, scores.cols())?;
        let auc = match auc_ovr(y_true, scores) {
            Ok(a) => Some(a),
            Err(HmilError::Data(_)) if y_true.len() == scores.rows() => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            n: y_true.len(),
            accuracy: cm.accuracy,
            macro_specificity: cm.macro_specificity,
            macro_sensitivity: cm.macro_sensitivity,
            macro_f1: cm.macro_f1,
            auc_per_class: auc.as_ref().map_or_else(|| vec![None; scores.cols()], |a| a.per_class.clone()),
            macro_auc: auc.map(|a| a.macro_auc),
            per_class: cm.per_class,
            bootstrap: None,
        })
    }

    fn headline(&self) -> [Option<f64>; 5] {
        [
            Some(self.accuracy),
            self.macro_specificity,
            self.macro_sensitivity,
            self.macro_f1,
            self.macro_auc,
        ]
    }

    /// Per-class rows as CSV.
    pub fn per_class_csv(&self, class_names: &[String]) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("class,support,sensitivity,specificity,f1,auc\n");
        for (i, c) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                name,
                c.support,
                fmt(c.sensitivity),
                fmt(c.specificity),
                fmt(c.f1),
                fmt(self.auc_per_class.get(i).copied().flatten())
            ));
        }
        out
    }
}

pub fn predictions(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows()).map(|r| argmax(scores.row(r))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Draw `n` indices with replacement.
    WithReplacement,
    /// Use indices `0..n` unchanged; reproduces the point estimates.
    Identity,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(mut values: Vec<f64>) -> Option<Interval> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    values.sort_by(f64::total_cmp);
    Some(Interval {
        mean,
        std,
        lo: percentile(&values, 0.025),
        hi: percentile(&values, 0.975),
        replicates: n,
    })
}

/// Non-parametric bootstrap of every headline metric. Replicate `r` draws
/// from a generator seeded by `seed` on stream `r`.
pub fn bootstrap_ci(
    y_true: &[usize],
    scores: &Matrix,
    replicates: usize,
    seed: u64,
    mode: Resample,
) -> Result<BootstrapReport> {
    if replicates == 0 {
        return Err(HmilError::Config("bootstrap needs at least one replicate".into()));
    }
    let n = y_true.len();
    if n != scores.rows() || n == 0 {
        return Err(HmilError::Data(format!("{n} labels for {} score rows", scores.rows())));
    }
    let k = scores.cols();
    let mut samples: [Vec<f64>; 5] = Default::default();
    for r in 0..replicates {
        let idx: Vec<usize> = match mode {
            Resample::Identity => (0..n).collect(),
            Resample::WithReplacement => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            }
        };
        let ys: Vec<usize> = idx.iter().map(|&i| y_true[i]).collect();
        let mut data = Vec::with_capacity(n * k);
        for &i in &idx {
            data.extend_from_slice(scores.row(i));
        }
        let s = Matrix::new(n, k, data)?;
        let report = MetricsReport::compute(&ys, &s)?;
        for (bucket, value) in samples.iter_mut().zip(report.headline()) {
            if let Some(v) = value {
                bucket.push(v);
            }
        }
    }
    let [acc, spec, sens, f1, auc] = samples;
    Ok(BootstrapReport {
        accuracy: summarize(acc),
        macro_specificity: summarize(spec),
        macro_sensitivity: summarize(sens),
        macro_f1: summarize(f1),
        macro_auc: summarize(auc),
    })
}

/// Fraction of samples where `argmax(P p_f) == argmax(p_c)`.
pub fn hierarchy_consistency(p_c: &[Vec<f64>], p_f: &[Vec<f64>], projection: &Projection) -> Result<f64> {
    if p_c.len() != p_f.len() {
        return Err(HmilError::Data(format!(
            "{} coarse and {} fine probability vectors",
            p_c.len(),
            p_f.len()
        )));
    }
    if p_c.is_empty() {
        return Err(HmilError::Data("empty batch".into()));
    }
    let mut agree = 0usize;
    for (c, f) in p_c.iter().zip(p_f) {
        let projected = projection.project_vec(f)?;
        if argmax(&projected) == argmax(c) {
            agree += 1;
        }
    }
    Ok(agree as f64 / p_c.len() as f64)
}
