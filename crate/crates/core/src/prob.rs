//! Per-voxel class distributions produced by the networks.

use ndarray::{Array3, Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{Dims, LabelVolume, Plane};

/// Which network produced a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum NetSource {
    Net3d,
    /// 2D network trained on transverse slices.
    Net2dTransverse,
    /// 2D network trained on coronal slices.
    Net2dCoronal,
}

impl NetSource {
    pub const ALL: [NetSource; 3] = [
        NetSource::Net3d,
        NetSource::Net2dTransverse,
        NetSource::Net2dCoronal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetSource::Net3d => "net3d",
            NetSource::Net2dTransverse => "net2d_transverse",
            NetSource::Net2dCoronal => "net2d_coronal",
        }
    }

    pub fn plane(self) -> Option<Plane> {
        match self {
            NetSource::Net3d => None,
            NetSource::Net2dTransverse => Some(Plane::Transverse),
            NetSource::Net2dCoronal => Some(Plane::Coronal),
        }
    }
}

/// Probabilities laid out `(class, h, w, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityField<T: Real = f32> {
    probs: Array4<T>,
    source: NetSource,
}

impl<T: Real> ProbabilityField<T> {
    /// Wraps a `(K, h, w, d)` array, checking that each voxel is a distribution.
    pub fn new(probs: Array4<T>, source: NetSource) -> Result<Self> {
        let field = Self::new_unchecked(probs, source);
        field.validate(1e-5)?;
        Ok(field)
    }

    /// Wraps without checking normalization (network outputs are normalized by construction).
    pub fn new_unchecked(probs: Array4<T>, source: NetSource) -> Self {
        ProbabilityField {
            probs: probs.as_standard_layout().into_owned(),
            source,
        }
    }

    /// Checks values lie in `[0, 1]` and sum to one within `tol` at every voxel.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.probs.shape()[0] == 0 {
            return Err(Error::Shape("probability field without classes".into()));
        }
        if self
            .probs
            .iter()
            .any(|&p| !(p.as_f64() >= 0.0 && p.as_f64() <= 1.0 + tol))
        {
            return Err(Error::Validation("probability outside [0, 1]".into()));
        }
        let sums = self.probs.sum_axis(Axis(0));
        if let Some(s) = sums.iter().find(|s| (s.as_f64() - 1.0).abs() > tol) {
            return Err(Error::Validation(format!(
                "class probabilities sum to {}",
                s.as_f64()
            )));
        }
        Ok(())
    }

    /// One-hot field of a dense label grid. Unlabeled voxels get a uniform distribution.
    pub fn one_hot(labels: &LabelVolume, source: NetSource) -> Self {
        let k = labels.num_classes();
        let d = labels.dims();
        let uniform = T::one() / T::of(k as f64);
        let probs = Array4::from_shape_fn((k, d[0], d[1], d[2]), |(c, i, j, l)| {
            let v = labels.data()[[i, j, l]];
            if usize::from(v) == c {
                T::one()
            } else if usize::from(v) >= k {
                uniform
            } else {
                T::zero()
            }
        });
        Self::new_unchecked(probs, source)
    }

    pub fn probs(&self) -> &Array4<T> {
        &self.probs
    }

    pub fn into_probs(self) -> Array4<T> {
        self.probs
    }

    pub fn source(&self) -> NetSource {
        self.source
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn dims(&self) -> Dims {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-voxel maximum class probability.
    pub fn confidence(&self) -> Array3<T> {
        self.probs
            .fold_axis(Axis(0), T::neg_infinity(), |&m, &p| if p > m { p } else { m })
    }

    /// Per-voxel argmax, ties going to the lowest class index.
    pub fn hard_prediction(&self) -> LabelVolume {
        let d = self.dims();
        let mut best = Array3::<u8>::zeros(d);
        let mut best_p = self.probs.index_axis(Axis(0), 0).to_owned();
        for c in 1..self.num_classes() {
            Zip::from(&mut best)
                .and(&mut best_p)
                .and(&self.probs.index_axis(Axis(0), c))
                .for_each(|b, bp, &p| {
                    if p > *bp {
                        *bp = p;
                        *b = c as u8;
                    }
                });
        }
        LabelVolume::new(best, self.num_classes()).expect("argmax is a valid class")
    }

    pub(crate) fn check_dims(&self, dims: Dims, what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::Shape(format!(
                "{what}: probability field {:?} vs {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }
}
