//! Run configuration: a TOML file with `data`, `model`, `teaching`, `optim`
//! and `eval` sections. Missing keys take defaults; unknown keys are errors.

use std::path::{Path, PathBuf};

use crossseg_core::phantom::PhantomSpec;
use crossseg_core::teaching::{RampSchedule, SelectionThresholds};
use crossseg_core::{Dims, Error, Result};
use crossseg_nn::AdamConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeachingMode {
    /// 3D and two 2D networks teaching each other.
    CrossTeaching,
    /// The 3D network alone, supervised by the annotated slices only.
    Sparse3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnits {
    /// Unit spacing on the resampled grid.
    Voxel,
    /// Spacing of the resampled grid in the volume's physical units.
    Physical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Volumes generated by `phantom-gen`.
    pub num_volumes: usize,
    /// Train/val/test proportions.
    pub split: [f64; 3],
    /// Slice distance on the transverse and coronal planes.
    pub distances: [usize; 2],
    /// Index of the first annotated slice per plane; centred when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offsets: Option<[usize; 2]>,
    /// Directory of saved cross annotations; derived from dense labels when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    pub phantom: PhantomSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_volumes: 20,
            split: [12.0, 4.0, 4.0],
            distances: [12, 12],
            offsets: None,
            annotations: None,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { base_channels: 8, depth: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeachingSection {
    pub mode: TeachingMode,
    pub t_q: f64,
    pub t_h: f64,
    pub t_s: f64,
    /// Final pseudo-label weight.
    pub w_max: f64,
    /// Ramp length as a fraction of the iterations.
    pub ramp_fraction: f64,
}

impl Default for TeachingSection {
    fn default() -> Self {
        let t = SelectionThresholds::default();
        TeachingSection {
            mode: TeachingMode::CrossTeaching,
            t_q: t.t_q,
            t_h: t.t_h,
            t_s: t.t_s,
            w_max: 0.1,
            ramp_fraction: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub batch_volumes: usize,
    pub patch: Dims,
    pub seed: u64,
    /// Most slices per 2D forward pass.
    pub slice_chunk: usize,
    pub checkpoint_every: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimSection {
            learning_rate: a.learning_rate,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            iterations: 6000,
            batch_volumes: 1,
            patch: [176, 176, 96],
            seed: 0,
            slice_chunk: 32,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub distance_units: DistanceUnits,
    /// Evaluate the 3D network on the validation split at every checkpoint.
    pub validate: bool,
    /// Smallest slice distance tried by the budget search.
    pub budget_min_distance: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            distance_units: DistanceUnits::Voxel,
            validate: true,
            budget_min_distance: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub teaching: TeachingSection,
    pub optim: OptimSection,
    pub eval: EvalSection,
}

/// Resolved training parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TeachingMode,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_volumes: usize,
    pub patch: Dims,
    pub thresholds: SelectionThresholds,
    pub ramp: RampSchedule,
    pub seed: u64,
    pub slice_chunk: usize,
    pub checkpoint_every: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl RunConfig {
    /// Parses TOML text, reporting every unknown key at once.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(value, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Validation(format!("config: {e}")))?;
        if !unknown.is_empty() {
            return Err(Error::Validation(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every constraint and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let o = &self.optim;
        let t = &self.teaching;
        for (name, v) in [
            ("optim.learning_rate", o.learning_rate),
            ("optim.eps", o.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be positive"));
            }
        }
        if !(o.weight_decay >= 0.0) {
            bad.push("optim.weight_decay must be nonnegative".into());
        }
        for (name, v) in [("optim.beta1", o.beta1), ("optim.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                bad.push(format!("{name} must lie in [0, 1)"));
            }
        }
        for (name, v) in [
            ("optim.batch_volumes", o.batch_volumes),
            ("optim.slice_chunk", o.slice_chunk),
            ("optim.checkpoint_every", o.checkpoint_every),
            ("model.depth", self.model.depth.saturating_sub(1)),
            ("data.num_volumes", self.data.num_volumes.saturating_sub(2)),
        ] {
            if v == 0 {
                bad.push(format!("{name} is too small"));
            }
        }
        if o.patch.contains(&0) {
            bad.push("optim.patch has a zero axis".into());
        }
        // TOML integers are signed 64-bit.
        for (name, v) in [("optim.seed", o.seed), ("data.phantom.seed", self.data.phantom.seed)] {
            if v > i64::MAX as u64 {
                bad.push(format!("{name} must not exceed {}", i64::MAX));
            }
        }
        if self.model.base_channels < 4 {
            bad.push("model.base_channels must be at least 4".into());
        }
        if let Err(e) = self.thresholds().validate() {
            bad.push(format!("teaching: {e}"));
        }
        if !(t.w_max >= 0.0 && t.w_max.is_finite()) {
            bad.push("teaching.w_max must be nonnegative".into());
        }
        if !(t.ramp_fraction >= 0.0 && t.ramp_fraction <= 1.0) {
            bad.push("teaching.ramp_fraction must lie in [0, 1]".into());
        }
        if self.data.distances.contains(&0) {
            bad.push("data.distances must be positive".into());
        }
        if let Some(off) = self.data.offsets {
            if off[0] >= self.data.distances[0] || off[1] >= self.data.distances[1] {
                bad.push("data.offsets must be smaller than data.distances".into());
            }
        }
        if self.data.split.iter().any(|&r| !(r > 0.0)) {
            bad.push("data.split ratios must be positive".into());
        }
        if let Err(e) = self.data.phantom.validate() {
            bad.push(format!("data.phantom: {e}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }

    pub fn thresholds(&self) -> SelectionThresholds {
        SelectionThresholds { t_q: self.teaching.t_q, t_h: self.teaching.t_h, t_s: self.teaching.t_s }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optim;
        let ramp_len = (o.iterations as f64 * self.teaching.ramp_fraction).ceil() as usize;
        TrainConfig {
            mode: self.teaching.mode,
            adam: AdamConfig {
                learning_rate: o.learning_rate,
                weight_decay: o.weight_decay,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            iterations: o.iterations,
            batch_volumes: o.batch_volumes,
            patch: o.patch,
            thresholds: self.thresholds(),
            ramp: RampSchedule::new(self.teaching.w_max, ramp_len),
            seed: o.seed,
            slice_chunk: o.slice_chunk,
            checkpoint_every: o.checkpoint_every,
            base_channels: self.model.base_channels,
            depth: self.model.depth,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        RunConfig::default().train_config()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_train_config_defaults() {
        let t = TrainConfig::default();
        assert_eq!(t.adam.learning_rate, 0.001);
        assert_eq!(t.adam.weight_decay, 0.0001);
        assert_eq!(t.iterations, 6000);
        assert_eq!(t.batch_volumes, 1);
        assert_eq!(t.patch, [176, 176, 96]);
        assert_eq!(t.ramp, RampSchedule::default());
        assert_eq!(t.thresholds, SelectionThresholds::default());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::from_toml("[optim]\nlr = 1\nseed = 3\n[model]\nwidth = 2\n[extra]\na = 1\n")
            .unwrap_err()
            .to_string();
        for key in ["optim.lr", "model.width", "extra"] {
            assert!(err.contains(key), "{err}");
        }
        assert!(!err.contains("seed"));
    }

    #[test]
    fn invalid_values_are_all_listed() {
        let err = RunConfig::from_toml("[optim]\nlearning_rate = -1.0\nslice_chunk = 0\n[teaching]\nt_s = 0.95\n")
            .unwrap_err()
            .to_string();
        for key in ["learning_rate", "slice_chunk", "soft threshold"] {
            assert!(err.contains(key), "{err}");
        }
        let mut c = RunConfig::default();
        c.optim.seed = u64::MAX;
        assert!(c.validate().unwrap_err().to_string().contains("optim.seed"));
    }

    proptest! {
        #[test]
        fn any_valid_config_round_trips(
            lr in 1e-6f64..1.0,
            wd in 0.0f64..0.1,
            iterations in 0usize..100_000,
            patch in proptest::array::uniform3(1usize..512),
            t_s in 0.01f64..0.98,
            gap in 0.0f64..1.0,
            distances in proptest::array::uniform2(1usize..64),
            seed in 0..=i64::MAX as u64,
            sparse: bool,
        ) {
            let mut c = RunConfig::default();
            c.optim.learning_rate = lr;
            c.optim.weight_decay = wd;
            c.optim.iterations = iterations;
            c.optim.patch = patch;
            c.optim.seed = seed;
            c.teaching.t_s = t_s;
            c.teaching.t_h = t_s + gap * (0.99 - t_s);
            c.data.distances = distances;
            c.data.offsets = Some(distances.map(|d| d / 2));
            if sparse {
                c.teaching.mode = TeachingMode::Sparse3d;
            }
            prop_assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.data.offsets = Some([1, 2]);
        c.teaching.mode = TeachingMode::Sparse3d;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
