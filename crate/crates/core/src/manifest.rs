//! Dataset manifest: volume/label paths and train/val/test membership.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{Dims, IntensityVolume, LabelVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    /// Relative to the manifest directory unless absolute.
    pub image: PathBuf,
    /// Dense ground truth, when available.
    #[serde(default)]
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Sizes of a train/val/test split of `n` items in proportion to `ratios`.
/// Rounding remainders go to the training split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let val = ((n as f64) * ratios[1] / total).round() as usize;
    let test = ((n as f64) * ratios[2] / total).round() as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    [n - val - test, val, test]
}

/// Seeded assignment of ids to splits of the given sizes.
pub fn random_split(ids: &[String], counts: [usize; 3], seed: u64) -> Result<Split> {
    if counts.iter().sum::<usize>() != ids.len() {
        return Err(Error::Validation(format!(
            "split sizes {counts:?} do not add up to {} volumes",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = order.into_iter();
    let mut take = |n| {
        let mut v: Vec<String> = rest.by_ref().take(n).collect();
        v.sort();
        v
    };
    Ok(Split {
        train: take(counts[0]),
        val: take(counts[1]),
        test: take(counts[2]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    /// Shape every volume is resampled to before training.
    pub target_shape: Dims,
    pub volumes: Vec<VolumeEntry>,
    pub split: Split,
    /// Directory the relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_volumes(&self) -> usize {
        self.volumes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: HashSet<&str> = self.volumes.iter().map(|v| v.id.as_str()).collect();
        if ids.len() != self.volumes.len() {
            return Err(Error::Validation("duplicate volume ids".into()));
        }
        let mut seen = HashSet::new();
        for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
            for id in self.split.get(name) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Validation(format!("split lists unknown volume {id}")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::Validation(format!("volume {id} appears in two splits")));
                }
            }
        }
        if seen.len() != self.volumes.len() {
            return Err(Error::Validation(format!(
                "{} volumes but splits cover {}",
                self.volumes.len(),
                seen.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("need at least two classes".into()));
        }
        if self.target_shape.contains(&0) {
            return Err(Error::Validation("target shape has a zero axis".into()));
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Result<&VolumeEntry> {
        self.volumes
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::Validation(format!("no volume {id} in manifest")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_image(&self, id: &str) -> Result<IntensityVolume> {
        let e = self.entry(id)?;
        let mut v = nifti::load_volume(self.resolve(&e.image))?;
        v.id = id.to_string();
        Ok(v)
    }

    pub fn load_label(&self, id: &str) -> Result<LabelVolume> {
        let e = self.entry(id)?;
        let p = e
            .label
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("volume {id} has no ground truth")))?;
        nifti::load_labels(self.resolve(p), self.num_classes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Conventional manifest file name inside a data directory.
pub const MANIFEST_FILE: &str = "manifest.json";

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:02}")).collect()
    }

    #[test]
    fn twelve_four_four() {
        assert_eq!(split_counts(20, [12.0, 4.0, 4.0]), [12, 4, 4]);
        assert_eq!(split_counts(20, [0.6, 0.2, 0.2]), [12, 4, 4]);
        assert_eq!(split_counts(3, [1.0, 1.0, 1.0]), [1, 1, 1]);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let all = ids(20);
        let a = random_split(&all, [12, 4, 4], 1).unwrap();
        assert_eq!(a, random_split(&all, [12, 4, 4], 1).unwrap());
        assert_ne!(a, random_split(&all, [12, 4, 4], 2).unwrap());
        let m = DatasetManifest {
            num_classes: 4,
            target_shape: [8, 8, 8],
            volumes: all
                .iter()
                .map(|id| VolumeEntry { id: id.clone(), image: format!("{id}.nii").into(), label: None })
                .collect(),
            split: a,
            root: PathBuf::new(),
        };
        m.validate().unwrap();
        let mut bad = m.clone();
        bad.split.val.push(bad.split.train[0].clone());
        assert!(bad.validate().is_err());
        let mut short = m.clone();
        short.split.test.pop();
        assert!(short.validate().is_err());
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        std::fs::write(&p, r#"{"num_classes":2,"target_shape":[1,1,1],"volumes":[],"split":{"train":[],"val":[],"test":[]},"extra":1}"#).unwrap();
        assert!(matches!(DatasetManifest::load(&p), Err(Error::Json { .. })));
    }
}
