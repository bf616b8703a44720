//! Two-level label taxonomy and its fine-to-coarse projection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HmilError, Result};
use crate::tensor::Matrix;

/// Coarse and fine class names plus the parent of every fine class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    coarse_names: Vec<String>,
    fine_names: Vec<String>,
    parent: Vec<usize>,
}

/// On-disk form: `{"coarse": [..], "fine": [..], "parent": {"<fine>": "<coarse>"}}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyDoc {
    pub coarse: Vec<String>,
    pub fine: Vec<String>,
    pub parent: BTreeMap<String, String>,
}

impl Taxonomy {
    /// Validates names and `(fine, coarse)` parent pairs.
    pub fn build<S: AsRef<str>>(coarse: &[S], fine: &[S], pairs: &[(S, S)]) -> Result<Self> {
        let coarse_names: Vec<String> = coarse.iter().map(|s| s.as_ref().to_owned()).collect();
        let fine_names: Vec<String> = fine.iter().map(|s| s.as_ref().to_owned()).collect();
        if coarse_names.is_empty() {
            return Err(HmilError::Taxonomy("no coarse classes".into()));
        }
        if fine_names.len() < coarse_names.len() {
            return Err(HmilError::Taxonomy(format!(
                "{} fine classes is fewer than {} coarse classes",
                fine_names.len(),
                coarse_names.len()
            )));
        }
        let coarse_index = index_unique(&coarse_names, "coarse")?;
        let fine_index = index_unique(&fine_names, "fine")?;

        let mut parent: Vec<Option<usize>> = vec![None; fine_names.len()];
        for (f, c) in pairs {
            let (f, c) = (f.as_ref(), c.as_ref());
            let fi = *fine_index
                .get(f)
                .ok_or_else(|| HmilError::Taxonomy(format!("unknown fine class `{f}` in parent pair")))?;
            let ci = *coarse_index
                .get(c)
                .ok_or_else(|| HmilError::Taxonomy(format!("unknown coarse class `{c}` in parent pair")))?;
            if parent[fi].is_some() {
                return Err(HmilError::Taxonomy(format!(
                    "fine class `{f}` has more than one parent"
                )));
            }
            parent[fi] = Some(ci);
        }
        let parent = parent
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| HmilError::Taxonomy(format!("fine class `{}` has no parent", fine_names[i]))))
            .collect::<Result<Vec<_>>>()?;
        for (ci, name) in coarse_names.iter().enumerate() {
            if !parent.contains(&ci) {
                return Err(HmilError::Taxonomy(format!("coarse class `{name}` has no children")));
            }
        }
        Ok(Taxonomy {
            coarse_names,
            fine_names,
            parent,
        })
    }

    /// Taxonomy where fine class `i` is the only child of coarse class `i`.
    pub fn identity(k: usize) -> Result<Self> {
        let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
        let pairs: Vec<(String, String)> = names.iter().map(|n| (n.clone(), n.clone())).collect();
        Taxonomy::build(&names, &names, &pairs)
    }

    /// Evenly splits `k_fine` fine classes over `k_coarse` parents,
    /// in order. Names are `c<i>` and `f<j>`.
    pub fn balanced(k_coarse: usize, k_fine: usize) -> Result<Self> {
        if k_coarse == 0 || k_fine < k_coarse {
            return Err(HmilError::Taxonomy(format!(
                "cannot split {k_fine} fine classes over {k_coarse} coarse classes"
            )));
        }
        let coarse: Vec<String> = (0..k_coarse).map(|i| format!("c{i}")).collect();
        let fine: Vec<String> = (0..k_fine).map(|j| format!("f{j}")).collect();
        let pairs: Vec<(String, String)> = (0..k_fine)
            .map(|j| (fine[j].clone(), coarse[j * k_coarse / k_fine].clone()))
            .collect();
        Taxonomy::build(&coarse, &fine, &pairs)
    }

    pub fn from_doc(doc: &TaxonomyDoc) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = doc.parent.iter().map(|(f, c)| (f.as_str(), c.as_str())).collect();
        let coarse: Vec<&str> = doc.coarse.iter().map(String::as_str).collect();
        let fine: Vec<&str> = doc.fine.iter().map(String::as_str).collect();
        Taxonomy::build(&coarse, &fine, &pairs)
    }

    pub fn to_doc(&self) -> TaxonomyDoc {
        TaxonomyDoc {
            coarse: self.coarse_names.clone(),
            fine: self.fine_names.clone(),
            parent: self
                .fine_names
                .iter()
                .zip(&self.parent)
                .map(|(f, &c)| (f.clone(), self.coarse_names[c].clone()))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaxonomyDoc = serde_json::from_str(text)
            .map_err(|e| HmilError::Taxonomy(format!("invalid taxonomy document: {e}")))?;
        Taxonomy::from_doc(&doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HmilError::io(path, e))?;
        let doc: TaxonomyDoc = serde_json::from_str(&text).map_err(|e| HmilError::json(path, e))?;
        Taxonomy::from_doc(&doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_doc()).expect("taxonomy serializes");
        std::fs::write(path, text).map_err(|e| HmilError::io(path, e))
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn coarse_names(&self) -> &[String] {
        &self.coarse_names
    }

    pub fn fine_names(&self) -> &[String] {
        &self.fine_names
    }

    pub fn parent(&self, fine: usize) -> usize {
        self.parent[fine]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn children(&self, coarse: usize) -> Vec<usize> {
        (0..self.parent.len()).filter(|&f| self.parent[f] == coarse).collect()
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_names.iter().position(|n| n == name)
    }

    pub fn coarse_index(&self, name: &str) -> Option<usize> {
        self.coarse_names.iter().position(|n| n == name)
    }

    pub fn projection(&self) -> Projection {
        let mut m = Matrix::zeros(self.num_coarse(), self.num_fine());
        for (f, &c) in self.parent.iter().enumerate() {
            m.set(c, f, 1.0);
        }
        Projection(m)
    }
}

fn index_unique<'a>(names: &'a [String], level: &str) -> Result<HashMap<&'a str, usize>> {
    let mut seen = HashSet::new();
    let mut index = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if !seen.insert(n.as_str()) {
            return Err(HmilError::Taxonomy(format!("duplicate {level} class `{n}`")));
        }
        index.insert(n.as_str(), i);
    }
    Ok(index)
}

/// `K_c x K_f` 0/1 matrix with `P[c][f] = 1` iff `parent(f) = c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection(Matrix);

impl Projection {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn num_coarse(&self) -> usize {
        self.0.rows()
    }

    pub fn num_fine(&self) -> usize {
        self.0.cols()
    }

    /// Maps a `K_f x n` matrix to `K_c x n` by summing over children.
    pub fn project(&self, v: &Matrix) -> Result<Matrix> {
        self.0.matmul(v)
    }

    /// Projects a single fine-level vector.
    pub fn project_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.num_fine() {
            return Err(HmilError::Shape {
                op: "project",
                lhs: self.0.shape(),
                rhs: (v.len(), 1),
            });
        }
        Ok((0..self.num_coarse())
            .map(|c| self.0.row(c).iter().zip(v).map(|(p, x)| p * x).sum())
            .collect())
    }

    /// Reads the parent of each fine class back out of the matrix.
    pub fn parents(&self) -> Vec<usize> {
        (0..self.num_fine())
            .map(|f| (0..self.num_coarse()).find(|&c| self.0.get(c, f) == 1.0).unwrap_or(usize::MAX))
            .collect()
    }
}
