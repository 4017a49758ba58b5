//! Volume types and slice geometry.
//!
//! Grids are indexed `(h, w, d)`. Transverse slices fix an index along `d`
//! (slice shape `h × w`); coronal slices fix an index along `w` (slice shape
//! `h × d`).

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// In-memory marker for voxels without ground truth. Stored files use `K` instead.
pub const UNLABELED: u8 = u8::MAX;

/// Largest supported class count; `UNLABELED` must stay out of range.
pub const MAX_CLASSES: usize = 254;

pub fn dims_of<T>(a: &Array3<T>) -> Dims {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// Annotation planes. `Transverse` slices along axis 2, `Coronal` along axis 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Transverse,
    Coronal,
}

impl Plane {
    pub const BOTH: [Plane; 2] = [Plane::Transverse, Plane::Coronal];

    pub fn axis(self) -> usize {
        match self {
            Plane::Transverse => 2,
            Plane::Coronal => 1,
        }
    }

    /// Number of slices of this plane in a grid of shape `dims`.
    pub fn extent(self, dims: Dims) -> usize {
        dims[self.axis()]
    }

    /// Axis permutation that moves the slicing axis last.
    ///
    /// The permutation is an involution, so it also maps a stack back.
    pub fn stack_permutation(self) -> [usize; 3] {
        match self {
            Plane::Transverse => [0, 1, 2],
            Plane::Coronal => [0, 2, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVolume {
    pub id: String,
    pub data: Array3<f32>,
    /// Physical voxel size per axis (mm).
    pub spacing: [f64; 3],
}

impl IntensityVolume {
    pub fn new(id: impl Into<String>, data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("intensity volume has non-finite values".into()));
        }
        if data.is_empty() {
            return Err(Error::Validation("intensity volume is empty".into()));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation(format!("invalid spacing {spacing:?}")));
        }
        Ok(IntensityVolume {
            id: id.into(),
            data: data.as_standard_layout().into_owned(),
            spacing,
        })
    }

    pub fn dims(&self) -> Dims {
        dims_of(&self.data)
    }
}

/// Class-index grid. Values are `< num_classes` or [`UNLABELED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array3<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(Error::Validation(format!(
                "class count {num_classes} outside 1..={MAX_CLASSES}"
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|&&v| v != UNLABELED && usize::from(v) >= num_classes)
        {
            return Err(Error::Validation(format!(
                "label value {bad} not below class count {num_classes}"
            )));
        }
        Ok(LabelVolume {
            data: data.as_standard_layout().into_owned(),
            num_classes,
        })
    }

    pub fn unlabeled(dims: Dims, num_classes: usize) -> Result<Self> {
        Self::new(Array3::from_elem(dims, UNLABELED), num_classes)
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, u8> {
        self.data.view()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Dims {
        dims_of(&self.data)
    }

    pub fn into_inner(self) -> Array3<u8> {
        self.data
    }

    pub fn is_labeled(&self, idx: Dims) -> bool {
        self.data[idx] != UNLABELED
    }

    pub fn count_labeled(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Binary mask of voxels equal to `class`.
    pub fn class_mask(&self, class: u8) -> Array3<bool> {
        self.data.mapv(|v| v == class)
    }

    pub(crate) fn check_same_dims(&self, dims: Dims, what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::Shape(format!(
                "{what}: labels {:?} vs {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }
}

/// Extracts slice `index` of `plane` from a grid.
pub fn slice_extract<T: Clone>(v: &Array3<T>, plane: Plane, index: usize) -> Result<Array2<T>> {
    let extent = plane.extent(dims_of(v));
    if index >= extent {
        return Err(Error::OutOfRange(format!(
            "{plane:?} slice {index} of {extent}"
        )));
    }
    Ok(v.index_axis(Axis(plane.axis()), index).to_owned())
}

/// Inverse of extracting every slice of `plane` in order.
pub fn stack_slices<T: Clone>(slices: &[Array2<T>], plane: Plane) -> Result<Array3<T>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Shape("no slices to stack".into()))?;
    if slices.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Shape("slices differ in shape".into()));
    }
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    ndarray::stack(Axis(plane.axis()), &views)
        .map_err(|e| Error::Shape(e.to_string()))
        .map(|a| a.as_standard_layout().into_owned())
}

/// Reorders a grid so that the slices of `plane` run along the last axis.
///
/// This is the layout consumed by the 2D networks: each fixed index of the last
/// axis is one slice. Applying it twice restores the original grid.
pub fn to_slice_stack<T: Clone>(v: &Array3<T>, plane: Plane) -> Array3<T> {
    v.view()
        .permuted_axes(plane.stack_permutation())
        .as_standard_layout()
        .into_owned()
}
