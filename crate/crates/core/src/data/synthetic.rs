//! Witness/background bag generator with a two-level class structure.
//!
//! Coarse classes get mutually orthogonal centers at pairwise distance
//! `class_sep_coarse`; each fine class offsets its parent's center by a
//! random direction of length `class_sep_fine`. A bag of fine class `f`
//! mixes `ceil(witness_rate * N)` witnesses drawn around the fine center
//! with background instances drawn around the origin. The first child of
//! the first coarse class is the negative class: its bags are pure
//! background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBag, Split};
use crate::error::{HmilError, Result};
use crate::hierarchy::{Taxonomy, TaxonomyDoc};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub taxonomy: TaxonomyDoc,
    pub d_c: usize,
    pub bags_per_fine_class: usize,
    /// Inclusive `[min, max]` instances per bag.
    pub instances_range: [usize; 2],
    pub witness_rate: f64,
    pub class_sep_coarse: f64,
    pub class_sep_fine: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Two coarse classes with two fine children each, 32-wide features,
    /// 100 bags per fine class of 30 to 60 instances at a 10% witness rate.
    pub fn benchmark(seed: u64) -> Self {
        SyntheticConfig {
            taxonomy: Taxonomy::balanced(2, 4).expect("valid").to_doc(),
            d_c: 32,
            bags_per_fine_class: 100,
            instances_range: [30, 60],
            witness_rate: 0.1,
            class_sep_coarse: 6.0,
            class_sep_fine: 1.5,
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<Taxonomy> {
        let taxonomy = Taxonomy::from_doc(&self.taxonomy)?;
        let [lo, hi] = self.instances_range;
        let bad = |msg: String| Err(HmilError::Config(msg));
        if self.d_c == 0 {
            return bad("d_c must be positive".into());
        }
        if self.bags_per_fine_class == 0 {
            return bad("bags_per_fine_class must be positive".into());
        }
        if lo == 0 || hi < lo {
            return bad(format!("invalid instances_range [{lo}, {hi}]"));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return bad(format!("witness_rate {} outside (0, 1]", self.witness_rate));
        }
        if !(self.class_sep_coarse > 0.0 && self.class_sep_fine > 0.0) {
            return bad("class separations must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("invalid noise_sigma {}", self.noise_sigma));
        }
        Ok(taxonomy)
    }
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Orthonormal directions by Gram-Schmidt while `k <= d`; random unit
/// vectors beyond that.
fn orthonormal_directions(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = random_direction(rng, d);
        if basis.len() < d {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
        }
        basis.push(v);
    }
    basis
}

/// Class centers `(coarse, fine)` as generated for `cfg`.
pub(crate) fn centers(cfg: &SyntheticConfig, taxonomy: &Taxonomy, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = cfg.d_c;
    let radius = cfg.class_sep_coarse / std::f64::consts::SQRT_2;
    let coarse: Vec<Vec<f64>> = orthonormal_directions(rng, taxonomy.num_coarse(), d)
        .into_iter()
        .map(|u| u.into_iter().map(|x| x * radius).collect())
        .collect();
    let fine = (0..taxonomy.num_fine())
        .map(|f| {
            let offset = random_direction(rng, d);
            coarse[taxonomy.parent(f)]
                .iter()
                .zip(offset)
                .map(|(c, o)| c + cfg.class_sep_fine * o)
                .collect()
        })
        .collect();
    (coarse, fine)
}

pub(crate) fn witness_count(rate: f64, n: usize) -> usize {
    // Guard against products like 0.1 * 30 landing just above an integer.
    ((rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Generates a dataset; a pure function of `cfg`. Features are rounded to
/// `f32` precision so that they survive the bag file format bit-exactly.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let taxonomy = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, fine_centers) = centers(cfg, &taxonomy, &mut rng);
    let negative = taxonomy.children(0)[0];
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| HmilError::Config(e.to_string()))?;
    let d = cfg.d_c;
    let [lo, hi] = cfg.instances_range;

    let mut bags = Vec::with_capacity(cfg.bags_per_fine_class * taxonomy.num_fine());
    for f in 0..taxonomy.num_fine() {
        for _ in 0..cfg.bags_per_fine_class {
            let n = rng.random_range(lo..=hi);
            let witnesses = if f == negative { 0 } else { witness_count(cfg.witness_rate, n) };
            let mut rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            let center = if i < witnesses { fine_centers[f][j] } else { 0.0 };
                            (center + noise.sample(&mut rng)) as f32 as f64
                        })
                        .collect()
                })
                .collect();
            rows.shuffle(&mut rng);
            bags.push(FeatureBag {
                bag_id: format!("bag{:05}", bags.len()),
                features: Matrix::from_rows(&rows)?,
                y_f: f,
                y_c: taxonomy.parent(f),
                split: Split::Unassigned,
            });
        }
    }
    Dataset::new(taxonomy, bags, d)
}
