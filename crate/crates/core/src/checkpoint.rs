//! Binary model container: magic `HMIL`, a `u32` format version, a
//! length-prefixed JSON config block, then named parameter matrices until
//! end of file. All integers little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{FlatConfig, FlatModel, LabelLevel};
use crate::data::Dataset;
use crate::error::{HmilError, Result};
use crate::hierarchy::{Taxonomy, TaxonomyDoc};
use crate::model::{HmilConfig, HmilModel};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMIL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Hmil(HmilModel),
    Flat(FlatModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Hmil(_) => "hmil",
            AnyModel::Flat(_) => "flat",
        }
    }

    fn named_parameters(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            AnyModel::Hmil(m) => m.named_parameters(),
            AnyModel::Flat(m) => m.named_parameters(),
        }
    }

    /// Input feature width.
    pub fn input_width(&self) -> usize {
        match self {
            AnyModel::Hmil(m) => m.config.d_c,
            AnyModel::Flat(m) => m.config.d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub taxonomy: Taxonomy,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ConfigBlock {
    Hmil { config: HmilConfig, taxonomy: TaxonomyDoc },
    Flat { config: FlatConfig, taxonomy: TaxonomyDoc },
}

impl Checkpoint {
    pub fn new(model: AnyModel, taxonomy: Taxonomy) -> Self {
        Checkpoint { model, taxonomy }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let taxonomy = self.taxonomy.to_doc();
        let block = match &self.model {
            AnyModel::Hmil(m) => ConfigBlock::Hmil {
                config: m.config.clone(),
                taxonomy,
            },
            AnyModel::Flat(m) => ConfigBlock::Flat {
                config: m.config.clone(),
                taxonomy,
            },
        };
        let json = serde_json::to_vec(&block).map_err(|e| HmilError::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        for (name, m) in self.model.named_parameters() {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(m.rows())?.to_le_bytes());
            out.extend_from_slice(&len_u32(m.cols())?.to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(HmilError::format(0, "bad magic, not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(HmilError::format(4, format!("unsupported checkpoint version {version}")));
        }
        let json_len = r.u32()? as usize;
        let json_at = r.pos as u64;
        let block: ConfigBlock = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| HmilError::format(json_at, format!("config block: {e}")))?;

        let mut named = Vec::new();
        while r.pos < bytes.len() {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| HmilError::format(at, "parameter name is not UTF-8"))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| HmilError::format(at, "parameter shape overflows"))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            named.push((name, Matrix::new(rows, cols, data)?));
        }

        let (model, taxonomy) = match block {
            ConfigBlock::Hmil { config, taxonomy } => {
                let mut m = HmilModel::init(config)?;
                m.load_parameters(named)?;
                (AnyModel::Hmil(m), taxonomy)
            }
            ConfigBlock::Flat { config, taxonomy } => {
                let mut m = FlatModel::init(config)?;
                m.load_parameters(named)?;
                (AnyModel::Flat(m), taxonomy)
            }
        };
        Ok(Checkpoint {
            model,
            taxonomy: Taxonomy::from_doc(&taxonomy)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| HmilError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HmilError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails with an error naming the first field on which the checkpoint
    /// and the dataset disagree.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        let mismatch = |field: &'static str, checkpoint: String, dataset: String| {
            Err(HmilError::Incompatible {
                field,
                checkpoint,
                dataset,
            })
        };
        if self.model.input_width() != ds.d {
            return mismatch("d", self.model.input_width().to_string(), ds.d.to_string());
        }
        let (ct, dt) = (&self.taxonomy, &ds.taxonomy);
        if ct.coarse_names() != dt.coarse_names() {
            return mismatch("coarse_classes", ct.coarse_names().join(","), dt.coarse_names().join(","));
        }
        if ct.fine_names() != dt.fine_names() {
            return mismatch("fine_classes", ct.fine_names().join(","), dt.fine_names().join(","));
        }
        if ct.parents() != dt.parents() {
            return mismatch("parent", format!("{:?}", ct.parents()), format!("{:?}", dt.parents()));
        }
        if let AnyModel::Flat(m) = &self.model {
            let k = match m.config.level {
                LabelLevel::Fine => dt.num_fine(),
                LabelLevel::Coarse => dt.num_coarse(),
            };
            if m.config.k != k {
                return mismatch("k", m.config.k.to_string(), k.to_string());
            }
        }
        Ok(())
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| HmilError::Config(format!("length {n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HmilError::format(self.bytes.len() as u64, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
