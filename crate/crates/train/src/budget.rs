//! Slice budget search wired to real training runs.

use std::path::Path;

use crossseg_core::annotation::{slice_budget_search, BudgetSearch};
use crossseg_core::manifest::{DatasetManifest, SplitName};
use crossseg_core::{Error, Execution, Plane, Result};

use crate::config::RunConfig;
use crate::eval::evaluate;
use crate::trainer::train;

pub const BUDGET_FILE: &str = "budget_search.json";

/// Starts from one centred slice per plane and halves the distances, training
/// a fresh run for each pair and scoring it by validation Dice (percent).
pub fn budget_search(manifest: &DatasetManifest, run: &RunConfig, out_dir: &Path, exec: Execution) -> Result<BudgetSearch> {
    let dims = manifest.target_shape;
    let initial = [Plane::Transverse.extent(dims), Plane::Coronal.extent(dims)];
    let search = slice_budget_search(
        |d: [usize; 2]| -> Result<f64> {
            let mut cfg = run.clone();
            cfg.data.distances = d;
            cfg.data.offsets = None;
            cfg.data.annotations = None;
            cfg.eval.validate = false;
            let dir = out_dir.join(format!("distances_{}x{}", d[0], d[1]));
            let outcome = train(manifest, &cfg, &dir, exec)?;
            let report = evaluate(outcome.state.net3d(), manifest, SplitName::Val, cfg.eval.distance_units, exec)?;
            let dice = report.dice.map(|m| m.mean).unwrap_or(0.0);
            log::info!("distances {d:?}: validation dice {dice:.2}");
            Ok(dice)
        },
        initial,
        run.eval.budget_min_distance,
    )?;
    let path = out_dir.join(BUDGET_FILE);
    let text = serde_json::to_string_pretty(&search).expect("search serializes");
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(search)
}
