//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use hmil::tensor::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Pairwise AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn count_class(y_true: &[usize], y_pred: &[usize], k: usize) -> Counts {
    let mut c = Counts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == k, p == k) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Contrastive loss written out anchor by anchor.
pub fn supcon_loops(features: &[Matrix], labels: &[usize], tau: f64) -> f64 {
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|m| {
            let norm = m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            m.data().iter().map(|v| v / norm).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b = z.len();
    let (mut total, mut anchors) = (0.0, 0usize);
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let term: f64 = pos
            .iter()
            .map(|&p| -((dot(&z[i], &z[p]) / tau).exp() / denom).ln())
            .sum::<f64>();
        total += term / pos.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Instance alignment with explicit loops over instances and classes.
pub fn instance_alignment_loops(a_c: &Matrix, a_f: &Matrix, parent: &[usize]) -> f64 {
    let n = a_c.cols();
    let mut sum = 0.0;
    for i in 0..n {
        let mut projected = vec![0.0; a_c.rows()];
        for (f, &c) in parent.iter().enumerate() {
            projected[c] += a_f.get(f, i);
        }
        let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
        for c in 0..a_c.rows() {
            dot += a_c.get(c, i) * projected[c];
            nu += a_c.get(c, i).powi(2);
            nv += projected[c].powi(2);
        }
        sum += dot / (nu.sqrt() * nv.sqrt());
    }
    1.0 - sum / n as f64
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scores drawn from a small grid so that ties are frequent.
pub fn tied_scores(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0..8) as f64 / 8.0).collect()).unwrap()
}
