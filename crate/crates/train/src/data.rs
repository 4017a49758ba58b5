//! Loading, preprocessing and annotating the volumes of a manifest split.

use crossseg_core::annotation::{centered_offset, CrossAnnotation};
use crossseg_core::manifest::{DatasetManifest, SplitName};
use crossseg_core::preprocess::{preprocess, resample_nearest};
use crossseg_core::{Error, Execution, IntensityVolume, LabelVolume, Plane, Result};

use crate::config::DataSection;

/// A preprocessed volume with its dense ground truth, if any.
#[derive(Clone, Debug)]
pub struct PreparedVolume {
    pub image: IntensityVolume,
    pub truth: Option<LabelVolume>,
}

/// Resamples to the manifest target shape and z-score normalizes. The image
/// spacing is rescaled so physical extents are preserved.
pub fn prepare(manifest: &DatasetManifest, id: &str) -> Result<PreparedVolume> {
    let raw = manifest.load_image(id)?;
    let from = raw.dims();
    let to = manifest.target_shape;
    let mut image = preprocess(&raw, to)?;
    image.spacing = std::array::from_fn(|a| raw.spacing[a] * from[a] as f64 / to[a] as f64);
    let truth = match manifest.entry(id)?.label {
        Some(_) => {
            let dense = manifest.load_label(id)?;
            if dense.dims() != from {
                return Err(Error::Shape(format!("{id}: labels {:?} vs image {from:?}", dense.dims())));
            }
            Some(resample_nearest(&dense, to)?)
        }
        None => None,
    };
    Ok(PreparedVolume { image, truth })
}

pub fn prepare_split(manifest: &DatasetManifest, split: SplitName, exec: Execution) -> Result<Vec<PreparedVolume>> {
    let ids = manifest.split.get(split);
    exec.map_range(ids.len(), |i| prepare(manifest, &ids[i]))
        .into_iter()
        .collect()
}

/// Offsets from the config, or the centred default for each plane.
pub fn resolve_offsets(data: &DataSection, dims: crossseg_core::Dims) -> [usize; 2] {
    data.offsets.unwrap_or_else(|| {
        [
            centered_offset(Plane::Transverse.extent(dims), data.distances[0]),
            centered_offset(Plane::Coronal.extent(dims), data.distances[1]),
        ]
    })
}

/// Cross annotation of a training volume: loaded from the configured
/// directory, or cut from its dense labels.
pub fn annotate(data: &DataSection, v: &PreparedVolume) -> Result<CrossAnnotation> {
    let y = match &data.annotations {
        Some(dir) => CrossAnnotation::load(dir, &v.image.id)?,
        None => {
            let dense = v
                .truth
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("{}: no labels to annotate from", v.image.id)))?;
            CrossAnnotation::from_dense(dense, data.distances, resolve_offsets(data, dense.dims()))?
        }
    };
    if y.dims() != v.image.dims() {
        return Err(Error::Shape(format!(
            "{}: annotation {:?} vs volume {:?}",
            v.image.id,
            y.dims(),
            v.image.dims()
        )));
    }
    Ok(y)
}
