//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use hmil::cli::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, run_variant, ModelKind, RunConfig, Variant};
use hmil::data::{generate_synthetic, make_splits, Split, SplitScheme, StratifyOn, SyntheticConfig};
use hmil::eval::{auc_ovr, confusion_metrics, BootstrapReport, Interval, MetricsReport};
use hmil::losses::{bag_alignment, instance_alignment, schedule_beta, supcon, LossMode, LossWeights};
use hmil::tensor::{softmax, Graph, Matrix};
use hmil::{evaluate, train, AnyModel, HmilConfig, HmilModel, Taxonomy, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Gradient correctness on the small configuration.
fn gradients() -> Outcome {
    let t = Instant::now();
    let report = cmd_gradcheck(&RunConfig::default(), false).expect("gradient check runs");
    let elapsed = t.elapsed();
    let worst = report.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let rows: Vec<String> = report.rows.iter().map(|r| format!("{}={:.1e}", r.component, r.max_rel_error)).collect();
    outcome(
        report.rows.len() == 6 && worst <= 1e-4 && elapsed < Duration::from_secs(60),
        format!("{} (max {worst:.1e} <= 1e-4, {elapsed:.2?} < 60s)", rows.join(" ")),
    )
}

/// Schedule values at the start, midpoint and last epoch of 200.
fn schedule() -> Outcome {
    let e = 200;
    let expected = [(0, 1.0), (100, 0.5), (199, 1.0 / 200.0)];
    let mut ok = true;
    for (epoch, beta) in expected {
        let w = LossWeights::at(LossMode::Dynamic, epoch, e).unwrap();
        ok &= schedule_beta(epoch, e).unwrap() == beta && w.beta == beta && w.reg == 1.0 - beta;
        ok &= w.ce_c == beta && w.ia == beta && w.ba == beta && w.ce_f == 1.0;
    }
    ok &= schedule_beta(200, 200).is_err();
    outcome(ok, "beta(0,100,199 of 200) = 1, 0.5, 1/200 exactly; reg weight = 1 - beta")
}

/// Randomized invariants, 1000 trials each.
fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 1000;
    let mut failures = Vec::new();
    for trial in 0..trials {
        let k_c = rng.random_range(1..=4);
        let k_f = k_c + rng.random_range(0..=4);
        let n = rng.random_range(1..=12);
        let t = Taxonomy::balanced(k_c, k_f).unwrap();
        let p = t.projection();

        let a_c = random_matrix(&mut rng, k_c, n, -1.0, 1.0);
        let a_f = random_matrix(&mut rng, k_f, n, 1e-3, 1.0);
        let ia = instance_alignment(&a_c, &a_f, &p).unwrap();
        if !(0.0..=2.0).contains(&ia) {
            failures.push(format!("ia {ia} out of [0,2] (trial {trial})"));
        }
        let matched = instance_alignment(&p.project(&a_f).unwrap(), &a_f, &p).unwrap();
        if matched.abs() > 1e-12 {
            failures.push(format!("ia {matched} for matched attention"));
        }

        let f = rng.random_range(0..k_f);
        let mut one_hot = vec![0.0; k_f];
        one_hot[f] = 1.0;
        if bag_alignment(&one_hot, t.parent(f), &p).unwrap() != 0.0 {
            failures.push("ba nonzero on a correct one-hot".into());
        }

        let bag = random_matrix(&mut rng, k_f, 3, -2.0, 2.0);
        let tau = rng.random_range(0.01..2.0);
        let twin = supcon(&[bag.clone(), bag.clone()], &[0, 0], tau).unwrap();
        let distinct: Vec<usize> = (0..k_f).collect();
        let spread = supcon(&vec![bag.clone(); k_f], &distinct, tau).unwrap();
        if twin.abs() > 1e-12 || spread != 0.0 {
            failures.push(format!("supcon twin {twin} distinct {spread}"));
        }

        let (rows, cols) = (rng.random_range(1..6), rng.random_range(1..9));
        let x = random_matrix(&mut rng, rows, cols, -40.0, 40.0);
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let s = g.softmax_rows(xn).unwrap();
        for r in 0..x.rows() {
            if (g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                failures.push("softmax row off the simplex".into());
            }
            if (softmax(x.row(r)).iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                failures.push("softmax vector off the simplex".into());
            }
        }

        if trial % 10 == 0 {
            let d = 4 * rng.random_range(1..=4);
            let model = HmilModel::init(HmilConfig::new(d, k_c, k_f, trial as u64).unwrap()).unwrap();
            let h = random_matrix(&mut rng, n, d, -3.0, 3.0);
            let out = model.forward(&h, &p).unwrap();
            let rows_ok = |m: &Matrix| (0..m.rows()).all(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let simplex = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && v.iter().all(|&x| x >= 0.0);
            if !(rows_ok(&out.a_c) && rows_ok(&out.a_f) && simplex(&out.p_c) && simplex(&out.p_f)) {
                failures.push("forward normalization".into());
            }
        }
    }
    let n_fail = failures.len();
    outcome(
        failures.is_empty(),
        format!(
            "{trials} trials: ia bounds/zero, ba zero, supcon zero cases, normalizations; {n_fail} violations{}",
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

/// Library results against brute-force references.
fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut worst_loss: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=100);
        let k = rng.random_range(2..=5);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let s = if trial % 2 == 0 {
            tied_scores(&mut rng, n, k)
        } else {
            random_matrix(&mut rng, n, k, 0.0, 1.0)
        };
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| pairwise_auc(&s.column(c), &y.iter().map(|&t| t == c).collect::<Vec<_>>()))
            .collect();
        match auc_ovr(&y, &s) {
            Ok(r) if r.per_class == per_class => {}
            Err(_) if per_class.iter().all(Option::is_none) => {}
            _ => mismatches += 1,
        }

        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = confusion_metrics(&y, &pred, k).unwrap();
        for c in 0..k {
            let cnt = count_class(&y, &pred, c);
            let sens = (cnt.tp + cnt.fn_ > 0).then(|| cnt.tp as f64 / (cnt.tp + cnt.fn_) as f64);
            let spec = (cnt.tn + cnt.fp > 0).then(|| cnt.tn as f64 / (cnt.tn + cnt.fp) as f64);
            if m.per_class[c].sensitivity != sens || m.per_class[c].specificity != spec {
                mismatches += 1;
            }
        }

        let b = rng.random_range(2..=8);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let feats: Vec<Matrix> = (0..b).map(|_| random_matrix(&mut rng, 3, 2, -2.0, 2.0)).collect();
        worst_loss = worst_loss.max((supcon(&feats, &labels, 0.1).unwrap() - supcon_loops(&feats, &labels, 0.1)).abs());

        let t = Taxonomy::balanced(2, 4).unwrap();
        let cols = rng.random_range(1..=10);
        let a_c = random_matrix(&mut rng, 2, cols, 0.0, 1.0);
        let a_f = random_matrix(&mut rng, 4, cols, 0.01, 1.0);
        worst_loss = worst_loss.max(
            (instance_alignment(&a_c, &a_f, &t.projection()).unwrap() - instance_alignment_loops(&a_c, &a_f, t.parents()))
                .abs(),
        );
    }
    outcome(
        mismatches == 0 && worst_loss <= 1e-10,
        format!("1000 instances n<=100: {mismatches} AUC/confusion mismatches; supcon/ia max deviation {worst_loss:.1e} <= 1e-10"),
    )
}

struct PairedRuns {
    full: Vec<f64>,
    abmil: Vec<f64>,
    no_alignment: Vec<f64>,
    consistency_on: Vec<f64>,
    consistency_off: Vec<f64>,
    slowest: Duration,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains the compared variants on the benchmark data for seeds 0..5.
fn paired_runs() -> PairedRuns {
    let grid = Variant::default_grid();
    let pick = |n: &str| grid.iter().find(|v| v.name == n).unwrap().clone();
    let (full, abmil, no_align, no_hba) = (pick("full"), pick("abmil"), pick("no-ham-hba"), pick("no-hba"));
    let mut r = PairedRuns {
        full: vec![],
        abmil: vec![],
        no_alignment: vec![],
        consistency_on: vec![],
        consistency_off: vec![],
        slowest: Duration::ZERO,
    };
    for seed in 0..5u64 {
        let mut cfg = RunConfig::default();
        cfg.dataset.synthetic = Some(SyntheticConfig::benchmark(seed));
        cfg.train.epochs = 60;
        cfg.train.learning_rate = 1e-3;
        cfg.train.batch_size = 32;
        let mut timed = |v: &Variant| {
            let t = Instant::now();
            let run = run_variant(&cfg, v, seed).expect("training run");
            r.slowest = r.slowest.max(t.elapsed());
            run
        };
        let f = timed(&full);
        let a = timed(&abmil);
        let n = timed(&no_align);
        let h = timed(&no_hba);
        r.full.push(f.fine_macro_auc.unwrap());
        r.abmil.push(a.fine_macro_auc.unwrap());
        r.no_alignment.push(n.fine_macro_auc.unwrap());
        r.consistency_on.push(f.hierarchy_consistency.unwrap());
        r.consistency_off.push(h.hierarchy_consistency.unwrap());
    }
    r
}

fn directional(r: &PairedRuns) -> Outcome {
    let (f, a, n) = (mean(&r.full), mean(&r.abmil), mean(&r.no_alignment));
    outcome(
        f >= a && f >= n && r.slowest < Duration::from_secs(600),
        format!(
            "test fine macro-AUC over 5 seeds: HMIL {f:.4} vs ABMIL {a:.4}, vs HAM+HBA off {n:.4}; slowest run {:.1?}",
            r.slowest
        ),
    )
}

fn consistency(r: &PairedRuns) -> Outcome {
    let (on, off) = (mean(&r.consistency_on), mean(&r.consistency_off));
    outcome(on >= off, format!("mean hierarchy consistency HBA on {on:.4} vs off {off:.4}"))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Byte-identical reruns of gen, train (HMIL and ABMIL), eval and gradcheck.
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let synthetic = SyntheticConfig {
        bags_per_fine_class: 15,
        instances_range: [5, 15],
        ..SyntheticConfig::benchmark(21)
    };
    let run_all = || {
        let mut base = RunConfig::default();
        base.seed = 21;
        base.dataset.synthetic = Some(synthetic.clone());
        base.train.epochs = 4;
        base.train.batch_size = 16;
        base.eval.bootstrap = 200;

        let mut gen = base.clone();
        gen.out = Some(root.join("gen"));
        cmd_gen(&gen, true).unwrap();
        let mut tr = base.clone();
        tr.out = Some(root.join("train"));
        let ckpt = cmd_train(&tr, true).unwrap().checkpoint_path;
        let mut flat = base.clone();
        flat.model = ModelKind::Abmil;
        flat.out = Some(root.join("abmil"));
        cmd_train(&flat, true).unwrap();
        let mut ev = base.clone();
        ev.out = Some(root.join("eval"));
        ev.eval.checkpoint = Some(ckpt);
        cmd_eval(&ev, true).unwrap();
        let mut gc = base;
        gc.out = Some(root.join("gradcheck"));
        cmd_gradcheck(&gc, true).unwrap();
        snapshot(root)
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    outcome(
        first.len() == second.len() && differing.is_empty(),
        format!("{} output files compared across two runs; {} differ", first.len(), differing.len()),
    )
}

fn intervals(b: &BootstrapReport) -> [Option<Interval>; 5] {
    [b.accuracy, b.macro_specificity, b.macro_sensitivity, b.macro_f1, b.macro_auc]
}

fn points(r: &MetricsReport) -> [Option<f64>; 5] {
    [Some(r.accuracy), r.macro_specificity, r.macro_sensitivity, r.macro_f1, r.macro_auc]
}

/// 1000-replicate bootstrap on a 200-bag test split.
fn bootstrap() -> Outcome {
    let ds = generate_synthetic(&SyntheticConfig {
        bags_per_fine_class: 125,
        instances_range: [10, 30],
        ..SyntheticConfig::benchmark(8)
    })
    .unwrap();
    let scheme = SplitScheme::Ratio {
        train: 0.5,
        val: 0.1,
        test: 0.4,
    };
    let ds = make_splits(&ds, scheme, 8, StratifyOn::Fine).unwrap();
    let model = HmilModel::init(HmilConfig::new(32, 2, 4, 8).unwrap()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        seed: 8,
        ..TrainConfig::default()
    };
    let (model, _) = train(&model, &ds, &cfg).unwrap();
    let t = Instant::now();
    let report = evaluate(&AnyModel::Hmil(model), &ds, Split::Test, 1000, 8).unwrap();
    let elapsed = t.elapsed();
    let n = report.coarse.n;
    let mut bad = 0;
    let mut checked = 0;
    for r in [report.fine.as_ref().unwrap(), &report.coarse] {
        let b = r.bootstrap.as_ref().unwrap();
        for (iv, point) in intervals(b).iter().zip(points(r)) {
            match (iv, point) {
                (Some(iv), Some(p)) => {
                    checked += 1;
                    if !(iv.lo <= iv.hi && iv.lo <= p && p <= iv.hi && iv.replicates == 1000) {
                        bad += 1;
                    }
                }
                (None, None) => {}
                _ => bad += 1,
            }
        }
    }
    outcome(
        n == 200 && bad == 0 && elapsed < Duration::from_secs(30),
        format!("n={n}, {checked} intervals, {bad} unordered or missing the estimate, {elapsed:.2?} < 30s"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient correctness", gradients()),
        ("2 schedule exactness", schedule()),
        ("3 loss invariants", invariants()),
        ("4 oracle equivalence", oracles()),
    ];
    let runs = paired_runs();
    results.push(("5 directional synthetic reproduction", directional(&runs)));
    results.push(("6 consistency effect", consistency(&runs)));
    results.push(("7 determinism", determinism()));
    results.push(("8 bootstrap sanity", bootstrap()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} — {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
