//! Cross annotation: equally spaced labeled slices on the transverse and
//! coronal planes, and the distance-halving search for the slice budget.

use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{Dims, LabelVolume, Plane, UNLABELED};

/// Sparse labels: ground truth on the listed slices, [`UNLABELED`] elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossAnnotation {
    labels: LabelVolume,
    slices: [Vec<usize>; 2],
    distances: [usize; 2],
}

fn plane_slot(plane: Plane) -> usize {
    match plane {
        Plane::Transverse => 0,
        Plane::Coronal => 1,
    }
}

/// Slice indices `offset, offset + distance, ...` below `extent`.
pub fn uniform_slices(extent: usize, distance: usize, offset: usize) -> Vec<usize> {
    (offset..extent).step_by(distance.max(1)).collect()
}

/// Default offset for a given spacing: half a period, or the centre slice when
/// only one slice fits.
pub fn centered_offset(extent: usize, distance: usize) -> usize {
    if distance >= extent {
        extent / 2
    } else {
        distance / 2
    }
}

/// Splits a total slice budget between the two planes proportionally to their
/// extents. Each plane gets at least one slice.
pub fn split_budget(total: usize, dims: Dims) -> [usize; 2] {
    let ea = Plane::Transverse.extent(dims) as f64;
    let eb = Plane::Coronal.extent(dims) as f64;
    let total = total.max(2);
    let a = ((total as f64 * ea / (ea + eb)).round() as usize).clamp(1, total - 1);
    [a, total - a]
}

/// Distance and centred offset placing `count` uniformly spaced slices on an axis.
pub fn layout_for_count(extent: usize, count: usize) -> (usize, usize) {
    let distance = (extent / count.max(1)).max(1);
    (distance, centered_offset(extent, distance))
}

impl CrossAnnotation {
    /// Keeps the dense labels on slices `offset + k * distance` of each plane.
    pub fn from_dense(dense: &LabelVolume, distances: [usize; 2], offsets: [usize; 2]) -> Result<Self> {
        for (i, plane) in Plane::BOTH.iter().enumerate() {
            if distances[i] == 0 {
                return Err(Error::Validation(format!("{plane:?} distance must be >= 1")));
            }
            if offsets[i] >= distances[i] && offsets[i] != 0 {
                return Err(Error::Validation(format!(
                    "{plane:?} offset {} not below distance {}",
                    offsets[i], distances[i]
                )));
            }
        }
        let dims = dense.dims();
        let slices = [
            uniform_slices(Plane::Transverse.extent(dims), distances[0], offsets[0]),
            uniform_slices(Plane::Coronal.extent(dims), distances[1], offsets[1]),
        ];
        Self::from_slice_lists(dense, slices, distances)
    }

    /// Keeps the dense labels on explicit slice lists.
    pub fn from_slice_lists(
        dense: &LabelVolume,
        mut slices: [Vec<usize>; 2],
        distances: [usize; 2],
    ) -> Result<Self> {
        let dims = dense.dims();
        for (i, plane) in Plane::BOTH.iter().enumerate() {
            slices[i].sort_unstable();
            slices[i].dedup();
            if let Some(&bad) = slices[i].iter().find(|&&s| s >= plane.extent(dims)) {
                return Err(Error::OutOfRange(format!(
                    "{plane:?} slice {bad} of {}",
                    plane.extent(dims)
                )));
            }
        }
        let mut out = Array3::from_elem(dims, UNLABELED);
        for (i, plane) in Plane::BOTH.iter().enumerate() {
            let ax = Axis(plane.axis());
            for &s in &slices[i] {
                let src = dense.data().index_axis(ax, s);
                if src.iter().any(|&v| v == UNLABELED) {
                    return Err(Error::Validation(format!(
                        "{plane:?} slice {s} of the source labels has unlabeled voxels"
                    )));
                }
                out.index_axis_mut(ax, s).assign(&src);
            }
        }
        Ok(CrossAnnotation {
            labels: LabelVolume::new(out, dense.num_classes())?,
            slices,
            distances,
        })
    }

    /// Assembles an annotation from its parts, checking the slice invariant.
    pub fn from_parts(labels: LabelVolume, slices: [Vec<usize>; 2], distances: [usize; 2]) -> Result<Self> {
        let rebuilt = Self::from_slice_lists(&labels, slices, distances)?;
        if rebuilt.labels != labels {
            return Err(Error::Validation(
                "labeled voxels do not coincide with the listed slices".into(),
            ));
        }
        Ok(rebuilt)
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn slices(&self, plane: Plane) -> &[usize] {
        &self.slices[plane_slot(plane)]
    }

    pub fn distance(&self, plane: Plane) -> usize {
        self.distances[plane_slot(plane)]
    }

    pub fn distances(&self) -> [usize; 2] {
        self.distances
    }

    pub fn total_slices(&self) -> usize {
        self.slices.iter().map(Vec::len).sum()
    }

    /// True where ground truth exists.
    pub fn annotated_mask(&self) -> Array3<bool> {
        self.labels.data().mapv(|v| v != UNLABELED)
    }

    pub fn count_annotated(&self) -> usize {
        self.labels.count_labeled()
    }

    /// Restricts the annotation to a box, remapping slice indices to the box frame.
    pub fn crop(&self, offset: Dims, size: Dims) -> Result<Self> {
        let dims = self.dims();
        for a in 0..3 {
            if size[a] == 0 || offset[a] + size[a] > dims[a] {
                return Err(Error::Shape(format!(
                    "crop {offset:?}+{size:?} outside {dims:?}"
                )));
            }
        }
        let labels = crop_grid(self.labels.data(), offset, size);
        let slices = Plane::BOTH.map(|plane| {
            let (lo, n) = (offset[plane.axis()], size[plane.axis()]);
            self.slices(plane)
                .iter()
                .filter(|&&s| s >= lo && s < lo + n)
                .map(|&s| s - lo)
                .collect()
        });
        Ok(CrossAnnotation {
            labels: LabelVolume::new(labels, self.num_classes())?,
            slices,
            distances: self.distances,
        })
    }

    /// Writes `<stem>.nii.gz` (sentinel = K) and `<stem>.json` listing the slices.
    pub fn save(&self, dir: &Path, stem: &str, spacing: [f64; 3]) -> Result<()> {
        nifti::save_labels(dir.join(format!("{stem}.nii.gz")), &self.labels, spacing)?;
        let side = Sidecar {
            num_classes: self.num_classes(),
            dims: self.dims(),
            transverse: PlaneRecord {
                distance: self.distances[0],
                slices: self.slices[0].clone(),
            },
            coronal: PlaneRecord {
                distance: self.distances[1],
                slices: self.slices[1].clone(),
            },
        };
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        let labels = nifti::load_labels(dir.join(format!("{stem}.nii.gz")), side.num_classes)?;
        if labels.dims() != side.dims {
            return Err(Error::Shape(format!(
                "{}: sidecar dims {:?} vs image {:?}",
                path.display(),
                side.dims,
                labels.dims()
            )));
        }
        Self::from_parts(
            labels,
            [side.transverse.slices, side.coronal.slices],
            [side.transverse.distance, side.coronal.distance],
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneRecord {
    distance: usize,
    slices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    num_classes: usize,
    dims: Dims,
    transverse: PlaneRecord,
    coronal: PlaneRecord,
}

pub(crate) fn crop_grid<T: Clone>(a: &Array3<T>, offset: Dims, size: Dims) -> Array3<T> {
    use ndarray::s;
    a.slice(s![
        offset[0]..offset[0] + size[0],
        offset[1]..offset[1] + size[1],
        offset[2]..offset[2] + size[2]
    ])
    .to_owned()
}

/// One evaluated distance pair of [`slice_budget_search`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetStep {
    pub distances: [usize; 2],
    pub dice: f64,
    /// Improvement over the previous step; `None` for the starting point.
    pub gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSearch {
    pub chosen: [usize; 2],
    pub history: Vec<BudgetStep>,
}

/// Halves both slice distances until the validation gain falls below half the
/// previous gain.
///
/// `train_and_eval` maps a distance pair to validation Dice. At least one
/// halving always happens. A nonpositive gain stops immediately, as does
/// reaching `min_distance` on both planes. The returned pair is the one in force
/// when the search stopped.
pub fn slice_budget_search<E, F>(
    mut train_and_eval: F,
    initial: [usize; 2],
    min_distance: usize,
) -> std::result::Result<BudgetSearch, E>
where
    F: FnMut([usize; 2]) -> std::result::Result<f64, E>,
{
    let min_distance = min_distance.max(1);
    let mut current = initial.map(|d| d.max(1));
    let mut prev_dice = train_and_eval(current)?;
    let mut history = vec![BudgetStep {
        distances: current,
        dice: prev_dice,
        gain: None,
    }];
    let mut prev_gain: Option<f64> = None;
    while current.iter().any(|&d| d > min_distance) {
        current = current.map(|d| (d / 2).max(min_distance).min(d));
        let dice = train_and_eval(current)?;
        let gain = dice - prev_dice;
        history.push(BudgetStep {
            distances: current,
            dice,
            gain: Some(gain),
        });
        log::info!("slice budget {current:?}: dice {dice:.4} gain {gain:.4}");
        if gain <= 0.0 || prev_gain.is_some_and(|pg| gain < pg / 2.0) {
            break;
        }
        prev_gain = Some(gain);
        prev_dice = dice;
    }
    Ok(BudgetSearch {
        chosen: current,
        history,
    })
}
