use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{HmilError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SplitScheme {
    Ratio { train: f64, val: f64, test: f64 },
    /// Fold `fold` is the test set, fold `fold + 1 (mod k)` the validation set.
    KFold { k: usize, fold: usize },
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl std::str::FromStr for SplitScheme {
    type Err = HmilError;

    /// Parses `k:i` as a k-fold split.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || HmilError::Config(format!("invalid k-fold spec `{s}`, expected k:i"));
        let (k, fold) = s.split_once(':').ok_or_else(bad)?;
        Ok(SplitScheme::KFold {
            k: k.trim().parse().map_err(|_| bad())?,
            fold: fold.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyOn {
    #[default]
    Fine,
    Coarse,
}

/// Bag indices grouped by stratum, each group shuffled.
fn strata(ds: &Dataset, stratify_on: StratifyOn, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = match stratify_on {
        StratifyOn::Fine => ds.taxonomy.num_fine(),
        StratifyOn::Coarse => ds.taxonomy.num_coarse(),
    };
    let mut groups = vec![Vec::new(); k];
    for (i, b) in ds.bags.iter().enumerate() {
        let label = match stratify_on {
            StratifyOn::Fine => b.y_f,
            StratifyOn::Coarse => b.y_c,
        };
        groups[label].push(i);
    }
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups
}

/// Returns a copy of `ds` with every bag tagged train, val or test.
///
/// Ratio splits walk the concatenated, shuffled strata and give each bag
/// to the split furthest behind its target share, which keeps both the
/// global sizes and every stratum's proportions within one bag of target.
pub fn make_splits(ds: &Dataset, scheme: SplitScheme, seed: u64, stratify_on: StratifyOn) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = strata(ds, stratify_on, &mut rng);
    let mut out = ds.clone();
    match scheme {
        SplitScheme::Ratio { train, val, test } => {
            let ratios = [train, val, test];
            if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(HmilError::Config(format!(
                    "split ratios {train}/{val}/{test} must be nonnegative and sum to 1"
                )));
            }
            let splits = [Split::Train, Split::Val, Split::Test];
            let mut counts = [0usize; 3];
            for (pos, &idx) in groups.iter().flatten().enumerate() {
                let n = (pos + 1) as f64;
                let pick = (0..3)
                    .max_by(|&a, &b| {
                        let da = ratios[a] * n - counts[a] as f64;
                        let db = ratios[b] * n - counts[b] as f64;
                        // Ties resolve to the earlier split.
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("three splits");
                counts[pick] += 1;
                out.bags[idx].split = splits[pick];
            }
        }
        SplitScheme::KFold { k, fold } => {
            if k < 3 {
                return Err(HmilError::Config(format!(
                    "k-fold needs k >= 3 to leave a training fold, got {k}"
                )));
            }
            if fold >= k {
                return Err(HmilError::Config(format!("fold index {fold} out of range for k = {k}")));
            }
            let mut offset = 0;
            for (label, g) in groups.iter().enumerate() {
                if !g.is_empty() && g.len() < k {
                    return Err(HmilError::Data(format!(
                        "stratum {label} has {} bags, fewer than k = {k}",
                        g.len()
                    )));
                }
                for (pos, &idx) in g.iter().enumerate() {
                    let f = (offset + pos) % k;
                    out.bags[idx].split = if f == fold {
                        Split::Test
                    } else if f == (fold + 1) % k {
                        Split::Val
                    } else {
                        Split::Train
                    };
                }
                offset += g.len();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureBag;
    use crate::hierarchy::Taxonomy;
    use crate::tensor::Matrix;

    fn balanced(per_class: usize) -> Dataset {
        let t = Taxonomy::balanced(2, 4).unwrap();
        let bags = (0..4 * per_class)
            .map(|i| FeatureBag {
                bag_id: format!("b{i}"),
                features: Matrix::zeros(1, 2),
                y_f: i % 4,
                y_c: t.parent(i % 4),
                split: Split::Unassigned,
            })
            .collect();
        Dataset::new(t, bags, 2).unwrap()
    }

    #[test]
    fn ratio_split_sizes_and_per_class_balance() {
        let ds = make_splits(&balanced(25), SplitScheme::default(), 7, StratifyOn::Fine).unwrap();
        let counts = ds.split_counts();
        assert_eq!(counts[&Split::Train], 70);
        assert_eq!(counts[&Split::Val], 10);
        assert_eq!(counts[&Split::Test], 20);
        for f in 0..4 {
            for (split, share) in [(Split::Train, 0.7), (Split::Val, 0.1), (Split::Test, 0.2)] {
                let n = ds.bags.iter().filter(|b| b.y_f == f && b.split == split).count() as f64;
                assert!((n - 25.0 * share).abs() <= 1.0, "class {f} {split:?}: {n}");
            }
        }
    }

    #[test]
    fn kfold_sweep_partitions_test_folds() {
        let ds = balanced(25);
        let mut seen = vec![0; ds.len()];
        for i in 0..10 {
            let s = make_splits(&ds, SplitScheme::KFold { k: 10, fold: i }, 3, StratifyOn::Fine).unwrap();
            for (j, b) in s.bags.iter().enumerate() {
                if b.split == Split::Test {
                    seen[j] += 1;
                }
            }
            assert!(!s.split(Split::Val).is_empty());
            assert!(s.bags.iter().all(|b| b.split != Split::Unassigned));
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ds = balanced(10);
        let a = make_splits(&ds, SplitScheme::default(), 1, StratifyOn::Coarse).unwrap();
        let b = make_splits(&ds, SplitScheme::default(), 1, StratifyOn::Coarse).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&ds, SplitScheme::default(), 2, StratifyOn::Coarse).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_schemes() {
        let ds = balanced(5);
        let r = SplitScheme::Ratio { train: 0.5, val: 0.1, test: 0.1 };
        assert!(make_splits(&ds, r, 0, StratifyOn::Fine).is_err());
        assert!(make_splits(&ds, SplitScheme::KFold { k: 10, fold: 0 }, 0, StratifyOn::Fine).is_err());
        assert!(make_splits(&ds, SplitScheme::KFold { k: 5, fold: 5 }, 0, StratifyOn::Fine).is_err());
        assert_eq!("10:3".parse::<SplitScheme>().unwrap(), SplitScheme::KFold { k: 10, fold: 3 });
    }
}
