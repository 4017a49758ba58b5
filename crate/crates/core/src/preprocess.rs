//! Resampling, normalization and patch sampling.

use ndarray::Array3;
use rand::Rng;

use crate::annotation::{crop_grid, CrossAnnotation};
use crate::error::{Error, Result};
use crate::volume::{dims_of, Dims, IntensityVolume, LabelVolume};

/// Rescales to zero mean and unit population standard deviation.
pub fn z_score_normalize(v: &IntensityVolume) -> Result<IntensityVolume> {
    let n = v.data.len();
    if n < 2 {
        return Err(Error::Degenerate("z-score needs more than one voxel".into()));
    }
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let var = v
        .data
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    if !(var > 0.0) {
        return Err(Error::Degenerate(format!("volume {} has zero variance", v.id)));
    }
    let sd = var.sqrt();
    IntensityVolume::new(
        v.id.clone(),
        v.data.mapv(|x| ((x as f64 - mean) / sd) as f32),
        v.spacing,
    )
}

/// Source coordinate of target index `i` (corner-aligned grids).
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

fn check_target(target: Dims) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::Shape(format!("resample target {target:?} has a zero axis")));
    }
    Ok(())
}

fn resampled_spacing(spacing: [f64; 3], src: Dims, dst: Dims) -> [f64; 3] {
    std::array::from_fn(|a| spacing[a] * src[a] as f64 / dst[a] as f64)
}

/// Trilinear resampling with corner-aligned grids.
pub fn resample_trilinear(v: &IntensityVolume, target: Dims) -> Result<IntensityVolume> {
    check_target(target)?;
    let src = v.dims();
    if src == target {
        return Ok(v.clone());
    }
    // Per-axis lower index and upper weight.
    let taps: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| {
        (0..target[a])
            .map(|i| {
                let x = source_coord(i, src[a], target[a]);
                let lo = (x.floor() as usize).min(src[a] - 1);
                let hi = (lo + 1).min(src[a] - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    });
    let d = &v.data;
    let out = Array3::from_shape_fn(target, |(i, j, k)| {
        let (i0, i1, fi) = taps[0][i];
        let (j0, j1, fj) = taps[1][j];
        let (k0, k1, fk) = taps[2][k];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let at = |a, b, c| d[[a, b, c]] as f64;
        let c00 = lerp(at(i0, j0, k0), at(i1, j0, k0), fi);
        let c10 = lerp(at(i0, j1, k0), at(i1, j1, k0), fi);
        let c01 = lerp(at(i0, j0, k1), at(i1, j0, k1), fi);
        let c11 = lerp(at(i0, j1, k1), at(i1, j1, k1), fi);
        lerp(lerp(c00, c10, fj), lerp(c01, c11, fj), fk) as f32
    });
    IntensityVolume::new(v.id.clone(), out, resampled_spacing(v.spacing, src, target))
}

/// Nearest-neighbour resampling for label grids; never introduces new values.
pub fn resample_nearest(labels: &LabelVolume, target: Dims) -> Result<LabelVolume> {
    check_target(target)?;
    let src = labels.dims();
    let idx: [Vec<usize>; 3] = std::array::from_fn(|a| {
        (0..target[a])
            .map(|i| (source_coord(i, src[a], target[a]).round() as usize).min(src[a] - 1))
            .collect()
    });
    let d = labels.data();
    let out = Array3::from_shape_fn(target, |(i, j, k)| d[[idx[0][i], idx[1][j], idx[2][k]]]);
    LabelVolume::new(out, labels.num_classes())
}

/// Resample to `target`, then z-score normalize.
pub fn preprocess(v: &IntensityVolume, target: Dims) -> Result<IntensityVolume> {
    z_score_normalize(&resample_trilinear(v, target)?)
}

/// Uniformly random patch origin with `patch` fitting inside `dims`.
pub fn random_offset<R: Rng + ?Sized>(dims: Dims, patch: Dims, rng: &mut R) -> Result<Dims> {
    if (0..3).any(|a| patch[a] == 0 || patch[a] > dims[a]) {
        return Err(Error::Shape(format!("patch {patch:?} does not fit in {dims:?}")));
    }
    Ok(std::array::from_fn(|a| rng.random_range(0..=dims[a] - patch[a])))
}

/// Crops the same random box from a volume and its annotation.
pub fn random_crop<R: Rng + ?Sized>(
    v: &IntensityVolume,
    y: &CrossAnnotation,
    patch: Dims,
    rng: &mut R,
) -> Result<(IntensityVolume, CrossAnnotation, Dims)> {
    if y.dims() != v.dims() {
        return Err(Error::Shape(format!(
            "annotation {:?} vs volume {:?}",
            y.dims(),
            v.dims()
        )));
    }
    let offset = random_offset(v.dims(), patch, rng)?;
    let data = crop_grid(&v.data, offset, patch);
    Ok((
        IntensityVolume::new(v.id.clone(), data, v.spacing)?,
        y.crop(offset, patch)?,
        offset,
    ))
}

/// Crop of a dense grid at a known offset.
pub fn crop<T: Clone>(a: &Array3<T>, offset: Dims, size: Dims) -> Result<Array3<T>> {
    let dims = dims_of(a);
    if (0..3).any(|i| size[i] == 0 || offset[i] + size[i] > dims[i]) {
        return Err(Error::Shape(format!("crop {offset:?}+{size:?} outside {dims:?}")));
    }
    Ok(crop_grid(a, offset, size))
}
