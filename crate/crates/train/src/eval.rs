//! Full-volume inference with the 3D network and metric reports.

use crossseg_core::manifest::{DatasetManifest, SplitName};
use crossseg_core::metrics::{dice, evaluate_labels, MetricsReport};
use crossseg_core::{Error, Execution, IntensityVolume, LabelVolume, NetSource, Result};
use crossseg_nn::{predict_field, Dimensionality, Network};

use crate::config::DistanceUnits;
use crate::data::{prepare_split, PreparedVolume};

/// Argmax of a single full-volume forward pass of the 3D network.
pub fn infer_3d(net: &Network<f32>, volume: &IntensityVolume, exec: Execution) -> Result<LabelVolume> {
    if net.config().dimensionality != Dimensionality::Three {
        return Err(Error::Validation("inference needs the 3D network".into()));
    }
    Ok(predict_field(net, &volume.data, NetSource::Net3d, 1, exec)?.hard_prediction())
}

/// Mean over volumes of the foreground-averaged Dice.
pub fn validation_dice(net: &Network<f32>, volumes: &[PreparedVolume], exec: Execution) -> Result<f64> {
    let mut total = 0.0;
    for v in volumes {
        let truth = v
            .truth
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{}: no ground truth", v.image.id)))?;
        let pred = infer_3d(net, &v.image, exec)?;
        let k = truth.num_classes() as u8;
        let per: f64 = (1..k).map(|c| dice(&pred.class_mask(c), &truth.class_mask(c))).sum();
        total += per / f64::from(k - 1);
    }
    Ok(total / volumes.len().max(1) as f64)
}

pub fn evaluate_prepared(
    net: &Network<f32>,
    volumes: &[PreparedVolume],
    units: DistanceUnits,
    exec: Execution,
) -> Result<MetricsReport> {
    let mut out = Vec::new();
    let mut degenerate = false;
    for v in volumes {
        let truth = v
            .truth
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{}: evaluation needs dense ground truth", v.image.id)))?;
        let pred = infer_3d(net, &v.image, exec)?;
        degenerate |= pred.data().iter().all(|&c| c == 0);
        let spacing = match units {
            DistanceUnits::Voxel => [1.0; 3],
            DistanceUnits::Physical => v.image.spacing,
        };
        out.push(evaluate_labels(&v.image.id, &pred, truth, spacing, exec)?);
    }
    Ok(MetricsReport::from_volumes(out, degenerate))
}

/// Metrics of the 3D network on one split of a dataset.
pub fn evaluate(
    net: &Network<f32>,
    manifest: &DatasetManifest,
    split: SplitName,
    units: DistanceUnits,
    exec: Execution,
) -> Result<MetricsReport> {
    let volumes = prepare_split(manifest, split, exec)?;
    if volumes.is_empty() {
        return Err(Error::Validation(format!("split {split:?} is empty")));
    }
    evaluate_prepared(net, &volumes, units, exec)
}
