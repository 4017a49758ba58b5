use crossseg_core::{Dims, Error, Real, Result};
use ndarray::{Array3, Array4};

/// Channel-last feature map: element `(x, y, z, c)` lives at
/// `((x * Y + y) * Z + z) * C + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature<T> {
    dims: Dims,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Feature {
            dims,
            channels,
            data: vec![T::zero(); dims.iter().product::<usize>() * channels],
        }
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() * channels {
            return Err(Error::Shape(format!(
                "{} values for {dims:?}x{channels}",
                data.len()
            )));
        }
        Ok(Feature { dims, channels, data })
    }

    /// Single-channel map of a grid.
    pub fn from_grid(grid: &Array3<T>) -> Self {
        let s = grid.shape();
        Feature {
            dims: [s[0], s[1], s[2]],
            channels: 1,
            data: grid.as_standard_layout().iter().copied().collect(),
        }
    }

    /// Channel-last `(x, y, z, c)` to class-first `(c, x, y, z)`.
    pub fn to_class_first(&self) -> Array4<T> {
        let [x, y, z] = self.dims;
        Array4::from_shape_vec((x, y, z, self.channels), self.data.clone())
            .expect("length checked on construction")
            .permuted_axes([3, 0, 1, 2])
            .as_standard_layout()
            .into_owned()
    }

    pub fn from_class_first(a: &Array4<T>) -> Self {
        let s = a.shape();
        let data = a.view().permuted_axes([1, 2, 3, 0]).iter().copied().collect();
        Feature {
            dims: [s[1], s[2], s[3]],
            channels: s[0],
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}
