mod common;

use common::*;
use hmil::eval::{auc_ovr, confusion_metrics};
use hmil::losses::{instance_alignment, supcon};
use hmil::tensor::{Graph, Matrix};
use hmil::Taxonomy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn auc_matches_pairwise_counting_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..500 {
        let n = rng.random_range(2..=100);
        let k = rng.random_range(2..=5);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let s = if trial % 2 == 0 { tied_scores(&mut rng, n, k) } else { random_matrix(&mut rng, n, k, 0.0, 1.0) };
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| pairwise_auc(&s.column(c), &y.iter().map(|&t| t == c).collect::<Vec<_>>()))
            .collect();
        match auc_ovr(&y, &s) {
            Ok(r) => {
                assert_eq!(r.per_class, per_class, "trial {trial}");
                let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
                assert_eq!(r.macro_auc, defined.iter().sum::<f64>() / defined.len() as f64);
            }
            Err(_) => assert!(per_class.iter().all(Option::is_none)),
        }
    }
}

#[test]
fn confusion_metrics_match_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let n = rng.random_range(1..=100);
        let k = rng.random_range(2..=6);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = confusion_metrics(&y, &p, k).unwrap();
        let correct = y.iter().zip(&p).filter(|(a, b)| a == b).count();
        assert_eq!(m.accuracy, correct as f64 / n as f64);
        for c in 0..k {
            let cnt = count_class(&y, &p, c);
            let pc = &m.per_class[c];
            assert_eq!(pc.support, cnt.tp + cnt.fn_);
            let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
            assert_eq!(pc.sensitivity, ratio(cnt.tp, cnt.tp + cnt.fn_));
            assert_eq!(pc.specificity, ratio(cnt.tn, cnt.tn + cnt.fp));
            if cnt.tp + cnt.fn_ > 0 {
                assert_eq!(pc.f1, Some(2.0 * cnt.tp as f64 / (2 * cnt.tp + cnt.fp + cnt.fn_) as f64));
            } else {
                assert_eq!(pc.f1, None);
            }
        }
    }
}

#[test]
fn supcon_matches_anchor_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let b = rng.random_range(2..=10);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
        let feats: Vec<Matrix> = (0..b).map(|_| random_matrix(&mut rng, 4, 3, -2.0, 2.0)).collect();
        let tau = [1.0, 0.1, 0.5][rng.random_range(0..3)];
        let got = supcon(&feats, &labels, tau).unwrap();
        let want = supcon_loops(&feats, &labels, tau);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn instance_alignment_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..300 {
        let k_c = rng.random_range(1..=3);
        let k_f = k_c + rng.random_range(0..=3);
        let n = rng.random_range(1..=12);
        let t = Taxonomy::balanced(k_c, k_f).unwrap();
        let a_c = random_matrix(&mut rng, k_c, n, 0.0, 1.0);
        let a_f = random_matrix(&mut rng, k_f, n, 0.01, 1.0);
        let got = instance_alignment(&a_c, &a_f, &t.projection()).unwrap();
        let want = instance_alignment_loops(&a_c, &a_f, t.parents());
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = random_matrix(&mut rng, m, k, -3.0, 3.0);
        let b = random_matrix(&mut rng, k, n, -3.0, 3.0);
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(an, bn).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
                assert!((g.value(c).get(i, j) - want).abs() <= 1e-12);
            }
        }
    }
}
