//! Hierarchical multi-instance learning: a dual-branch attention model over
//! bags of instance features with a two-level label taxonomy, its losses,
//! training loop, flat baselines and evaluation protocol.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod evaluate;
pub mod hierarchy;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use baselines::{train_flat, FlatConfig, FlatModel, FlatVariant, LabelLevel};
pub use checkpoint::{AnyModel, Checkpoint};
pub use data::{generate_synthetic, load_dataset, make_splits, Dataset, FeatureBag, Split, SplitScheme, StratifyOn, SyntheticConfig};
pub use error::{HmilError, Result};
pub use evaluate::{evaluate, score_split, EvaluationReport, SplitScores};
pub use eval::{auc_ovr, bootstrap_ci, confusion_metrics, hierarchy_consistency, MetricsReport};
pub use hierarchy::{Projection, Taxonomy};
pub use losses::{combine, LossBreakdown, LossComponents, LossMode};
pub use model::{ForwardOutput, HmilConfig, HmilModel};
pub use train::{train, TrainConfig, TrainHistory};
