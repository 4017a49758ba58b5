//! Synthetic multi-class volumes with exact dense labels.
//!
//! Class 1 is a large ellipsoid, class 2 a smaller ellipsoid nested off-centre
//! inside it, class 3 a wavy tube running along the second axis through the
//! middle of the volume. Further classes are small ellipsoids. All structures
//! cross the central transverse and coronal slices. Intensity is the class
//! mean plus Gaussian noise.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::manifest::{random_split, split_counts, DatasetManifest, VolumeEntry, MANIFEST_FILE};
use crate::nifti;
use crate::volume::{Dims, IntensityVolume, LabelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Dims,
    pub num_foreground_classes: usize,
    /// Mean intensity per class, background first.
    pub class_means: Vec<f64>,
    pub noise_sigma: f64,
    /// Maximum centre displacement as a fraction of each extent.
    pub center_jitter: f64,
    /// Maximum relative radius perturbation.
    pub radius_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 32],
            num_foreground_classes: 3,
            class_means: vec![0.0, 1.0, 2.0, 3.0],
            noise_sigma: 0.5,
            center_jitter: 0.08,
            radius_jitter: 0.2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn num_classes(&self) -> usize {
        self.num_foreground_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 8) {
            return Err(Error::Validation(format!("phantom shape {:?} below 8 voxels per axis", self.shape)));
        }
        if self.num_foreground_classes == 0 || self.num_classes() > crate::volume::MAX_CLASSES {
            return Err(Error::Validation("need 1 to 253 foreground classes".into()));
        }
        if self.class_means.len() != self.num_classes() {
            return Err(Error::Validation(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.num_classes()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise sigma must be finite and nonnegative".into()));
        }
        for i in 0..self.class_means.len() {
            for j in i + 1..self.class_means.len() {
                if (self.class_means[i] - self.class_means[j]).abs() < 2.0 * self.noise_sigma {
                    return Err(Error::Validation(format!(
                        "class means {i} and {j} closer than twice the noise sigma"
                    )));
                }
            }
        }
        if !(0.0..0.25).contains(&self.center_jitter) || !(0.0..0.5).contains(&self.radius_jitter) {
            return Err(Error::Validation("jitter outside supported range".into()));
        }
        Ok(())
    }
}

/// Nominal geometry in units of the volume extents (centre fractions and
/// radius fractions), before jitter.
pub mod nominal {
    pub const CHAMBER_RADII: [f64; 3] = [0.32, 0.30, 0.36];
    pub const INNER_OFFSET: [f64; 3] = [0.08, -0.06, 0.0];
    pub const INNER_RADII: [f64; 3] = [0.14, 0.14, 0.20];
    /// Tube radius as a fraction of the smaller of the first and last extents.
    pub const TUBE_RADIUS: f64 = 0.09;
    pub const TUBE_WAVE: f64 = 0.06;
    pub const EXTRA_RADII: f64 = 0.07;
}

#[derive(Clone, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug)]
struct Tube {
    /// Centre line position in (h, d).
    axis: [f64; 2],
    radius: f64,
    wave: f64,
    phase: f64,
    /// Extent along the second axis, as (start, end).
    span: [f64; 2],
}

impl Tube {
    fn contains(&self, p: [f64; 3], w: f64) -> bool {
        if p[1] < self.span[0] || p[1] > self.span[1] {
            return false;
        }
        let t = p[1] / w * std::f64::consts::TAU + self.phase;
        let ch = self.axis[0] + self.wave * t.sin();
        let cd = self.axis[1] + self.wave * 0.5 * t.cos();
        (p[0] - ch).powi(2) + (p[2] - cd).powi(2) <= self.radius * self.radius
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    if amount == 0.0 {
        0.0
    } else {
        rng.random_range(-amount..=amount)
    }
}

fn rasterize(spec: &PhantomSpec, rng: &mut ChaCha8Rng, scale: f64) -> Array3<u8> {
    let d = spec.shape;
    let ext = d.map(|x| x as f64);
    let mid = ext.map(|x| (x - 1.0) / 2.0);
    let cj = spec.center_jitter * scale;
    let rj = spec.radius_jitter * scale;

    let chamber = Ellipsoid {
        center: std::array::from_fn(|a| mid[a] + jitter(rng, cj) * ext[a]),
        radii: std::array::from_fn(|a| nominal::CHAMBER_RADII[a] * ext[a] * (1.0 + jitter(rng, rj))),
    };
    let inner = Ellipsoid {
        center: std::array::from_fn(|a| {
            chamber.center[a] + (nominal::INNER_OFFSET[a] + jitter(rng, cj * 0.5)) * ext[a]
        }),
        radii: std::array::from_fn(|a| nominal::INNER_RADII[a] * ext[a] * (1.0 + jitter(rng, rj))),
    };
    let small = ext[0].min(ext[2]);
    let tube = Tube {
        axis: [
            mid[0] - (0.22 + jitter(rng, cj * 0.5)) * ext[0],
            mid[2] + jitter(rng, cj * 0.5) * ext[2],
        ],
        radius: (nominal::TUBE_RADIUS * small * (1.0 + jitter(rng, rj))).max(1.0),
        wave: nominal::TUBE_WAVE * small * (1.0 + jitter(rng, rj)),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
        span: [0.1 * ext[1], 0.9 * ext[1]],
    };
    let extras: Vec<Ellipsoid> = (3..spec.num_foreground_classes)
        .map(|i| {
            let angle = i as f64 * 2.399 + jitter(rng, 0.3);
            Ellipsoid {
                center: [
                    mid[0] + 0.3 * ext[0] * angle.cos(),
                    mid[1] - 0.25 * ext[1],
                    mid[2] + 0.05 * ext[2] * angle.sin(),
                ],
                radii: std::array::from_fn(|a| nominal::EXTRA_RADII * ext[a].max(8.0) * (1.0 + jitter(rng, rj))),
            }
        })
        .collect();

    let n_fg = spec.num_foreground_classes;
    Array3::from_shape_fn(d, |(i, j, k)| {
        let p = [i as f64, j as f64, k as f64];
        let mut class = 0u8;
        if chamber.contains(p) {
            class = 1;
        }
        if n_fg >= 2 && inner.contains(p) {
            class = 2;
        }
        if n_fg >= 3 && tube.contains(p, ext[1]) {
            class = 3;
        }
        for (e, ell) in extras.iter().enumerate() {
            if ell.contains(p) {
                class = (4 + e) as u8;
            }
        }
        class
    })
}

fn class_counts(labels: &Array3<u8>, k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &v in labels {
        c[v as usize] += 1;
    }
    c
}

/// Volume `volume_index` of the phantom family described by `spec`.
pub fn generate_phantom(spec: &PhantomSpec, volume_index: usize) -> Result<(IntensityVolume, LabelVolume)> {
    spec.validate()?;
    let k = spec.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(volume_index as u64);
    let mut scale = 1.0;
    let labels = loop {
        let labels = rasterize(spec, &mut rng, scale);
        if class_counts(&labels, k).iter().all(|&c| c > 0) {
            break labels;
        }
        if scale == 0.0 {
            return Err(Error::Validation(format!(
                "phantom geometry for {:?} loses a class even without jitter",
                spec.shape
            )));
        }
        log::warn!("phantom {volume_index}: a class vanished, regenerating with less jitter");
        scale = if scale < 0.1 { 0.0 } else { scale * 0.5 };
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma is finite");
    let intensity = labels.mapv(|c| {
        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (spec.class_means[c as usize] + n) as f32
    });
    Ok((
        IntensityVolume::new(phantom_id(volume_index), intensity, [1.0; 3])?,
        LabelVolume::new(labels, k)?,
    ))
}

pub fn phantom_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Writes `n` phantoms and a manifest with a seeded train/val/test split.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n: usize,
    ratios: [f64; 3],
    out_dir: &Path,
    exec: Execution,
) -> Result<DatasetManifest> {
    if n < 3 {
        return Err(Error::Validation(format!("need at least 3 volumes, got {n}")));
    }
    spec.validate()?;
    for sub in ["images", "labels"] {
        let p = out_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let entries = exec.map_range(n, |i| -> Result<VolumeEntry> {
        let (img, lab) = generate_phantom(spec, i)?;
        let image = Path::new("images").join(format!("{}.nii.gz", img.id));
        let label = Path::new("labels").join(format!("{}.nii.gz", img.id));
        nifti::save_volume(out_dir.join(&image), &img)?;
        nifti::save_labels(out_dir.join(&label), &lab, img.spacing)?;
        Ok(VolumeEntry {
            id: img.id,
            image,
            label: Some(label),
        })
    });
    let volumes = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = volumes.iter().map(|v| v.id.clone()).collect();
    let counts = split_counts(n, ratios);
    if counts.contains(&0) {
        return Err(Error::Validation(format!("split {counts:?} leaves a split empty")));
    }
    let manifest = DatasetManifest {
        num_classes: spec.num_classes(),
        target_shape: spec.shape,
        volumes,
        split: random_split(&ids, counts, spec.seed)?,
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
