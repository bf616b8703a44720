//! Command-line front end: dataset generation, training, evaluation,
//! gradient checking and ablation comparison. Every command writes a
//! `run.json` holding the fully resolved configuration.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::{train_flat, FlatConfig, FlatModel, FlatVariant, LabelLevel};
use crate::checkpoint::{AnyModel, Checkpoint};
use crate::data::{generate_synthetic, load_dataset, make_splits, Dataset, SplitScheme, StratifyOn, SyntheticConfig};
use crate::error::{HmilError, Result};
use crate::data::Split;
use crate::evaluate::{evaluate, EvaluationReport};
use crate::hierarchy::Taxonomy;
use crate::losses::{LossMode, LossWeights};
use crate::model::{BoundHmil, HmilConfig, HmilModel};
use crate::tensor::{grad_check_with_fault, OpKind};
use crate::train::{hmil_objective, train, Switches, TrainConfig, TrainHistory};

/// Exit code for a gradient check above threshold.
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hmil", version, about = "Hierarchical multi-instance learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest, taxonomy, bag files).
    Gen(CommonArgs),
    /// Train a model and write its checkpoint and training log.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(CommonArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(CommonArgs),
    /// Train a grid of variants over several seeds and tabulate AUCs.
    Compare(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["hmil", "mean", "max", "abmil"])]
    pub model: Option<String>,
    /// `dynamic`, `coarse` or `static:a,b`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Bootstrap replicates for evaluation; 0 disables intervals.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// `k:i` — fold `i` of a stratified k-fold split is the test set.
    #[arg(long)]
    pub kfold: Option<String>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corrupt the backward rule of one op kind (gradient check self-test).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Hmil,
    Mean,
    Max,
    Abmil,
}

impl ModelKind {
    fn flat_variant(self) -> Option<FlatVariant> {
        match self {
            ModelKind::Hmil => None,
            ModelKind::Mean => Some(FlatVariant::Mean),
            ModelKind::Max => Some(FlatVariant::Max),
            ModelKind::Abmil => Some(FlatVariant::Abmil),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| HmilError::Config(format!("unknown model `{s}`")))
    }
}

/// Where the dataset comes from: a manifest on disk or an inline
/// synthetic configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSource {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub bootstrap: usize,
    pub split: Split,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bootstrap: 1000,
            split: Split::Test,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    pub d_c: usize,
    pub k_c: usize,
    pub k_f: usize,
    pub bags: usize,
    pub max_instances: usize,
    pub epsilon: f64,
    pub threshold: f64,
    pub fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            d_c: 16,
            k_c: 2,
            k_f: 4,
            bags: 4,
            max_instances: 8,
            epsilon: 1e-5,
            threshold: 1e-4,
            fault: None,
        }
    }
}

/// One row of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub switches: Switches,
    #[serde(default = "yes")]
    pub use_ofr: bool,
    #[serde(default)]
    pub loss_mode: Option<LossMode>,
    #[serde(default)]
    pub tau: Option<f64>,
}

fn yes() -> bool {
    true
}

impl Variant {
    fn hmil(name: &str) -> Self {
        Variant {
            name: name.into(),
            model: ModelKind::Hmil,
            switches: Switches::default(),
            use_ofr: true,
            loss_mode: None,
            tau: None,
        }
    }

    fn flat(name: &str, model: ModelKind) -> Self {
        Variant {
            model,
            ..Variant::hmil(name)
        }
    }

    /// Module switches, loss weighting, temperatures and baselines.
    pub fn default_grid() -> Vec<Variant> {
        let mut v = vec![Variant::hmil("full")];
        let mut off = |name: &str, f: fn(&mut Variant)| {
            let mut x = Variant::hmil(name);
            f(&mut x);
            v.push(x);
        };
        off("no-ham", |x| x.switches.ham = false);
        off("no-hba", |x| x.switches.hba = false);
        off("no-ham-hba", |x| {
            x.switches.ham = false;
            x.switches.hba = false
        });
        off("no-ofr", |x| x.use_ofr = false);
        off("no-scl", |x| x.switches.scl = false);
        off("static-1-1", |x| x.loss_mode = Some(LossMode::Static { a: 1.0, b: 1.0 }));
        off("tau-1", |x| x.tau = Some(1.0));
        off("tau-0.01", |x| x.tau = Some(0.01));
        v.push(Variant::flat("mean", ModelKind::Mean));
        v.push(Variant::flat("max", ModelKind::Max));
        v.push(Variant::flat("abmil", ModelKind::Abmil));
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareOptions {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            seeds: vec![0, 1, 2],
            variants: Variant::default_grid(),
        }
    }
}

/// Unified run configuration. `seed` drives model initialization, split
/// assignment, batch order and bootstrap resampling; for `gen` it is the
/// generator seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Optional taxonomy file; must agree with the dataset's own taxonomy.
    pub taxonomy: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub split: SplitScheme,
    pub stratify_on: StratifyOn,
    pub model: ModelKind,
    pub use_ofr: bool,
    /// Label level of a flat baseline.
    pub level: LabelLevel,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
    pub compare: CompareOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            taxonomy: None,
            dataset: DatasetSource::default(),
            split: SplitScheme::default(),
            stratify_on: StratifyOn::default(),
            model: ModelKind::default(),
            use_ofr: true,
            level: LabelLevel::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            gradcheck: GradcheckOptions::default(),
            compare: CompareOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HmilError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HmilError::json(path, e))
    }

    /// Applies command-line overrides on top of the file configuration.
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(o) = &args.out {
            cfg.out = Some(o.clone());
        }
        if let Some(m) = &args.model {
            cfg.model = ModelKind::parse(m)?;
        }
        if let Some(l) = &args.loss {
            cfg.train.loss_mode = l.parse()?;
        }
        if let Some(t) = args.tau {
            cfg.train.tau = t;
        }
        if let Some(b) = args.bootstrap {
            cfg.eval.bootstrap = b;
        }
        if let Some(k) = &args.kfold {
            cfg.split = k.parse()?;
        }
        if let Some(c) = &args.checkpoint {
            cfg.eval.checkpoint = Some(c.clone());
        }
        if let Some(f) = &args.inject_fault {
            cfg.gradcheck.fault = Some(f.clone());
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for p in [&self.taxonomy, &self.dataset.manifest, &self.eval.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(HmilError::Config(format!("path {} does not exist", p.display())));
            }
        }
        if let Some(s) = &self.dataset.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| HmilError::Config("an output directory is required (--out)".into()))
    }

    /// Loads the dataset and assigns splits. A manifest whose bags all
    /// carry split tags keeps them unless a k-fold split is requested.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match (&self.dataset.manifest, &self.dataset.synthetic) {
            (Some(m), None) => load_dataset(m)?,
            (None, Some(s)) => generate_synthetic(s)?,
            (Some(_), Some(_)) => {
                return Err(HmilError::Config("give either dataset.manifest or dataset.synthetic, not both".into()))
            }
            (None, None) => return Err(HmilError::Config("no dataset configured".into())),
        };
        if let Some(t) = &self.taxonomy {
            if Taxonomy::load(t)? != ds.taxonomy {
                return Err(HmilError::Taxonomy(format!(
                    "taxonomy {} differs from the dataset's taxonomy",
                    t.display()
                )));
            }
        }
        let keep = ds.all_assigned() && !matches!(self.split, SplitScheme::KFold { .. });
        if keep {
            Ok(ds)
        } else {
            make_splits(&ds, self.split, self.seed, self.stratify_on)
        }
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| HmilError::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(HmilError::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| HmilError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HmilError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HmilError::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

fn write_run(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            command,
            seed: cfg.seed,
            config: cfg,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub bags: usize,
    pub per_fine_class: Vec<(String, usize)>,
    pub instances_min: usize,
    pub instances_mean: f64,
    pub instances_max: usize,
}

pub fn summarize_dataset(ds: &Dataset) -> DatasetSummary {
    let counts: Vec<usize> = ds.bags.iter().map(|b| b.num_instances()).collect();
    DatasetSummary {
        bags: ds.len(),
        per_fine_class: ds
            .taxonomy
            .fine_names()
            .iter()
            .cloned()
            .zip(ds.fine_counts())
            .collect(),
        instances_min: counts.iter().copied().min().unwrap_or(0),
        instances_mean: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
        instances_max: counts.iter().copied().max().unwrap_or(0),
    }
}

/// Writes a synthetic dataset. `seed` replaces the generator seed.
pub fn cmd_gen(cfg: &RunConfig, force: bool) -> Result<DatasetSummary> {
    let mut synth = cfg
        .dataset
        .synthetic
        .clone()
        .ok_or_else(|| HmilError::Config("gen needs dataset.synthetic in the config".into()))?;
    synth.seed = cfg.seed;
    let out = cfg.out_dir()?;
    prepare_out(out, force)?;
    let ds = generate_synthetic(&synth)?;
    ds.save(out)?;
    let mut resolved = cfg.clone();
    resolved.dataset.synthetic = Some(synth);
    write_run(out, "gen", &resolved)?;
    let summary = summarize_dataset(&ds);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn init_model(cfg: &RunConfig, ds: &Dataset, model: ModelKind, use_ofr: bool, seed: u64) -> Result<AnyModel> {
    let t = &ds.taxonomy;
    Ok(match model.flat_variant() {
        None => {
            let mut c = HmilConfig::new(ds.d, t.num_coarse(), t.num_fine(), seed)?;
            if !use_ofr {
                c = c.without_ofr();
            }
            AnyModel::Hmil(HmilModel::init(c)?)
        }
        Some(variant) => AnyModel::Flat(FlatModel::init(FlatConfig {
            variant,
            d: ds.d,
            k: match cfg.level {
                LabelLevel::Fine => t.num_fine(),
                LabelLevel::Coarse => t.num_coarse(),
            },
            level: cfg.level,
            seed,
        })?),
    })
}

fn fit_any(model: &AnyModel, ds: &Dataset, tc: &TrainConfig) -> Result<(AnyModel, TrainHistory)> {
    Ok(match model {
        AnyModel::Hmil(m) => {
            let (m, h) = train(m, ds, tc)?;
            (AnyModel::Hmil(m), h)
        }
        AnyModel::Flat(m) => {
            let (m, h) = train_flat(m, ds, tc)?;
            (AnyModel::Flat(m), h)
        }
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub checkpoint_path: PathBuf,
}

/// Trains per `cfg`, writing `model.hmil`, `history.jsonl` and `run.json`.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<TrainOutcome> {
    let out = cfg.out_dir()?;
    let ds = cfg.dataset()?;
    prepare_out(out, force)?;
    let model = init_model(cfg, &ds, cfg.model, cfg.use_ofr, cfg.seed)?;
    let (model, history) = fit_any(&model, &ds, &cfg.train)?;
    let checkpoint = Checkpoint::new(model, ds.taxonomy.clone());
    let checkpoint_path = out.join("model.hmil");
    checkpoint.save(&checkpoint_path)?;
    write_text(&out.join("history.jsonl"), &history.to_jsonl())?;
    write_run(out, "train", cfg)?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        checkpoint_path,
    })
}

/// Evaluates the configured checkpoint, writing `report.json` and
/// per-class CSV tables.
pub fn cmd_eval(cfg: &RunConfig, force: bool) -> Result<EvaluationReport> {
    let path = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| HmilError::Config("eval needs --checkpoint".into()))?;
    let out = cfg.out_dir()?;
    let checkpoint = Checkpoint::load(path)?;
    let ds = cfg.dataset()?;
    checkpoint.check_compatible(&ds)?;
    prepare_out(out, force)?;
    let report = evaluate(&checkpoint.model, &ds, cfg.eval.split, cfg.eval.bootstrap, cfg.seed)?;
    write_json(&out.join("report.json"), &report)?;
    if let Some(f) = &report.fine {
        write_text(&out.join("fine_per_class.csv"), &f.per_class_csv(ds.taxonomy.fine_names()))?;
    }
    write_text(
        &out.join("coarse_per_class.csv"),
        &report.coarse.per_class_csv(ds.taxonomy.coarse_names()),
    )?;
    write_run(out, "eval", cfg)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub component: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,max_rel_error,pass\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{}\n", r.component, r.max_rel_error, r.pass));
        }
        s
    }
}

/// Gradient check of every loss component through the full model on a
/// small synthetic batch. Does not write files.
pub fn gradcheck_report(cfg: &RunConfig) -> Result<GradcheckReport> {
    let o = &cfg.gradcheck;
    if o.max_instances == 0 || o.max_instances > 16 || o.d_c > 32 || o.bags < 2 {
        return Err(HmilError::Config(format!(
            "gradient check needs 2+ bags of at most 16 instances and d_c <= 32, got {} bags, {} instances, d_c {}",
            o.bags, o.max_instances, o.d_c
        )));
    }
    let fault: Option<OpKind> = o.fault.as_deref().map(str::parse).transpose()?;
    let taxonomy = Taxonomy::balanced(o.k_c, o.k_f)?;
    let synth = SyntheticConfig {
        taxonomy: taxonomy.to_doc(),
        d_c: o.d_c,
        bags_per_fine_class: 1,
        instances_range: [o.max_instances.min(2), o.max_instances],
        witness_rate: 0.5,
        class_sep_coarse: 2.0,
        class_sep_fine: 1.0,
        noise_sigma: 1.0,
        seed: cfg.seed,
    };
    let mut ds = generate_synthetic(&synth)?;
    // Two bags of the first fine class give the contrastive term a positive pair.
    let first = ds.bags[0].clone();
    ds.bags.truncate(o.bags.saturating_sub(1).max(1));
    ds.bags.push(first);
    let batch: Vec<_> = ds.bags.iter().collect();

    let model = HmilModel::init(HmilConfig::new(o.d_c, o.k_c, o.k_f, cfg.seed)?)?;
    let projection = taxonomy.projection();
    let params: Vec<_> = model.parameters().into_iter().cloned().collect();
    let tc = TrainConfig {
        tau: cfg.train.tau,
        ..TrainConfig::default()
    };
    let isolate = |w: fn(&mut LossWeights)| {
        let mut x = LossWeights {
            ce_c: 0.0,
            ce_f: 0.0,
            ia: 0.0,
            ba: 0.0,
            reg: 0.0,
            beta: 0.0,
        };
        w(&mut x);
        x
    };
    let components: [(&str, LossWeights); 6] = [
        ("ce_c", isolate(|w| w.ce_c = 1.0)),
        ("ce_f", isolate(|w| w.ce_f = 1.0)),
        ("ia", isolate(|w| w.ia = 1.0)),
        ("ba", isolate(|w| w.ba = 1.0)),
        ("reg", isolate(|w| w.reg = 1.0)),
        // Halfway through the schedule every term carries weight.
        ("combined", LossWeights::at(cfg.train.loss_mode, 1, 2)?),
    ];
    let mut rows = Vec::with_capacity(6);
    for (name, weights) in components {
        let err = grad_check_with_fault(&params, o.epsilon, fault, |g, ids| {
            let bound = BoundHmil::from_ids(&model, ids)?;
            Ok(hmil_objective(g, &bound, &projection, &batch, weights, &tc)?.0)
        })?;
        rows.push(GradcheckRow {
            component: name.into(),
            max_rel_error: err,
            pass: err <= o.threshold,
        });
    }
    Ok(GradcheckReport {
        threshold: o.threshold,
        rows,
    })
}

/// Runs the gradient check and writes `gradcheck.csv`/`.json` when an
/// output directory is configured.
pub fn cmd_gradcheck(cfg: &RunConfig, force: bool) -> Result<GradcheckReport> {
    let report = gradcheck_report(cfg)?;
    if let Some(out) = &cfg.out {
        prepare_out(out, force)?;
        write_text(&out.join("gradcheck.csv"), &report.to_csv())?;
        write_json(&out.join("gradcheck.json"), &report)?;
        write_run(out, "gradcheck", cfg)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRun {
    pub variant: String,
    pub seed: u64,
    pub fine_macro_auc: Option<f64>,
    pub coarse_macro_auc: Option<f64>,
    pub hierarchy_consistency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub seeds: usize,
    pub fine_auc_mean: Option<f64>,
    pub fine_auc_std: Option<f64>,
    pub coarse_auc_mean: Option<f64>,
    pub coarse_auc_std: Option<f64>,
    pub consistency_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    pub runs: Vec<CompareRun>,
}

/// Mean and sample standard deviation; `None` when no value is defined.
pub fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

impl CompareTable {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut s = String::from(
            "variant,seeds,fine_auc_mean,fine_auc_std,coarse_auc_mean,coarse_auc_std,consistency_mean\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant,
                r.seeds,
                f(r.fine_auc_mean),
                f(r.fine_auc_std),
                f(r.coarse_auc_mean),
                f(r.coarse_auc_std),
                f(r.consistency_mean)
            ));
        }
        s
    }
}

/// Trains and evaluates one variant for one seed on the test split.
pub fn run_variant(cfg: &RunConfig, variant: &Variant, seed: u64) -> Result<CompareRun> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.train.seed = seed;
    c.train.switches = variant.switches;
    if let Some(m) = variant.loss_mode {
        c.train.loss_mode = m;
    }
    if let Some(t) = variant.tau {
        c.train.tau = t;
    }
    let ds = c.dataset()?;
    let model = init_model(&c, &ds, variant.model, variant.use_ofr, seed)?;
    let (model, _) = fit_any(&model, &ds, &c.train)?;
    let report = evaluate(&model, &ds, Split::Test, 0, seed)?;
    Ok(CompareRun {
        variant: variant.name.clone(),
        seed,
        fine_macro_auc: report.fine.and_then(|r| r.macro_auc),
        coarse_macro_auc: report.coarse.macro_auc,
        hierarchy_consistency: report.hierarchy_consistency,
    })
}

pub fn compare_table(cfg: &RunConfig) -> Result<CompareTable> {
    let o = &cfg.compare;
    if o.seeds.is_empty() || o.variants.is_empty() {
        return Err(HmilError::Config("compare needs at least one seed and one variant".into()));
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for v in &o.variants {
        let vr = o
            .seeds
            .iter()
            .map(|&s| run_variant(cfg, v, s))
            .collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&CompareRun) -> Option<f64>| vr.iter().map(f).collect::<Vec<_>>();
        let (fine_auc_mean, fine_auc_std) = mean_std(&col(|r| r.fine_macro_auc));
        let (coarse_auc_mean, coarse_auc_std) = mean_std(&col(|r| r.coarse_macro_auc));
        rows.push(CompareRow {
            variant: v.name.clone(),
            seeds: vr.len(),
            fine_auc_mean,
            fine_auc_std,
            coarse_auc_mean,
            coarse_auc_std,
            consistency_mean: mean_std(&col(|r| r.hierarchy_consistency)).0,
        });
        runs.extend(vr);
    }
    Ok(CompareTable { rows, runs })
}

/// Writes `compare.csv` and `compare.json`.
pub fn cmd_compare(cfg: &RunConfig, force: bool) -> Result<CompareTable> {
    let out = cfg.out_dir()?;
    prepare_out(out, force)?;
    let table = compare_table(cfg)?;
    write_text(&out.join("compare.csv"), &table.to_csv())?;
    write_json(&out.join("compare.json"), &table)?;
    write_run(out, "compare", cfg)?;
    Ok(table)
}

fn print_line(s: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{s}");
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Gen(a) => RunConfig::resolve(&a).and_then(|c| cmd_gen(&c, a.force)).map(|s| {
            print_line(&format!("{} bags", s.bags));
            for (name, n) in &s.per_fine_class {
                print_line(&format!("  {name}: {n}"));
            }
            print_line(&format!(
                "instances per bag: min {} mean {:.1} max {}",
                s.instances_min, s.instances_mean, s.instances_max
            ));
            0
        }),
        Command::Train(a) => RunConfig::resolve(&a).and_then(|c| cmd_train(&c, a.force)).map(|o| {
            let best = &o.history.records[o.history.best_epoch];
            print_line(&format!(
                "best epoch {} (val macro-AUC {}); checkpoint {}",
                o.history.best_epoch,
                fmt_opt(best.val_macro_auc),
                o.checkpoint_path.display()
            ));
            0
        }),
        Command::Eval(a) => RunConfig::resolve(&a).and_then(|c| cmd_eval(&c, a.force)).map(|r| {
            if let Some(f) = &r.fine {
                print_line(&format!(
                    "fine: n {} acc {:.4} macro-AUC {} macro-F1 {}",
                    f.n,
                    f.accuracy,
                    fmt_opt(f.macro_auc),
                    fmt_opt(f.macro_f1)
                ));
            }
            print_line(&format!(
                "coarse: n {} acc {:.4} macro-AUC {} macro-F1 {}",
                r.coarse.n,
                r.coarse.accuracy,
                fmt_opt(r.coarse.macro_auc),
                fmt_opt(r.coarse.macro_f1)
            ));
            if let Some(h) = r.hierarchy_consistency {
                print_line(&format!("hierarchy consistency {h:.4}"));
            }
            0
        }),
        Command::Gradcheck(a) => RunConfig::resolve(&a).and_then(|c| cmd_gradcheck(&c, a.force)).map(|r| {
            for row in &r.rows {
                print_line(&format!(
                    "{:<9} {:.3e} {}",
                    row.component,
                    row.max_rel_error,
                    if row.pass { "ok" } else { "FAIL" }
                ));
            }
            match r.rows.iter().find(|row| !row.pass) {
                None => 0,
                Some(row) => {
                    eprintln!("gradient check failed for {} (threshold {:e})", row.component, r.threshold);
                    EXIT_THRESHOLD
                }
            }
        }),
        Command::Compare(a) => RunConfig::resolve(&a).and_then(|c| cmd_compare(&c, a.force)).map(|t| {
            print_line(&t.to_csv());
            0
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
