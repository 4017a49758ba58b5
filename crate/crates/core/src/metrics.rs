//! Overlap and surface-distance metrics for segmentation masks.
//!
//! Surfaces are foreground voxels with at least one 6-connected background
//! neighbour; voxels outside the grid count as background. Distances are
//! Euclidean and scaled by voxel spacing. HD95 is the 95th percentile (linear
//! interpolation) of the pooled distances from each surface to the other; ASD
//! is their mean.

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::volume::{dims_of, LabelVolume};

fn counts(a: &Array3<bool>, b: &Array3<bool>) -> (usize, usize, usize) {
    assert_eq!(a.shape(), b.shape(), "metric masks differ in shape");
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    Zip::from(a).and(b).for_each(|&x, &y| {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    });
    (inter, na, nb)
}

/// `2|a∩b| / (|a| + |b|)`; 1 when both masks are empty.
pub fn dice(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let (inter, na, nb) = counts(a, b);
    if na + nb == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (na + nb) as f64
}

/// `|a∩b| / |a∪b|`; 1 when both masks are empty.
pub fn jaccard(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let (inter, na, nb) = counts(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Foreground voxels with a background face neighbour (or on the grid border).
pub fn surface(mask: &Array3<bool>) -> Array3<bool> {
    let d = dims_of(mask);
    Array3::from_shape_fn(d, |(i, j, k)| {
        if !mask[[i, j, k]] {
            return false;
        }
        let p = [i, j, k];
        (0..3).any(|a| {
            let lo = p[a] == 0 || {
                let mut q = p;
                q[a] -= 1;
                !mask[q]
            };
            let hi = p[a] + 1 == d[a] || {
                let mut q = p;
                q[a] += 1;
                !mask[q]
            };
            lo || hi
        })
    })
}

/// Exact squared distance to the nearest feature along one line
/// (lower envelope of parabolas). `f` holds squared distances, `INFINITY` for
/// no feature.
fn edt_line(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
                    if s <= *z.last().expect("parallel stacks") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let r = v[k];
        out.push((x - pos(r)).powi(2) + f[r]);
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel of
/// `features`, with per-axis spacing. All `INFINITY` when there are no features.
pub fn squared_distance_transform(features: &Array3<bool>, spacing: [f64; 3], exec: Execution) -> Array3<f64> {
    let mut dist = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    for (axis, &step) in spacing.iter().enumerate() {
        let lanes = Zip::from(dist.lanes_mut(Axis(axis)));
        let run = |mut lane: ndarray::ArrayViewMut1<f64>| {
            let mut buf: Vec<f64> = lane.iter().copied().collect();
            let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
            edt_line(&mut buf, step, &mut v, &mut z, &mut out);
            lane.iter_mut().zip(buf).for_each(|(d, b)| *d = b);
        };
        #[cfg(feature = "parallel")]
        if exec.is_parallel() {
            lanes.par_for_each(run);
            continue;
        }
        let _ = exec;
        lanes.for_each(run);
    }
    dist
}

/// Distances from each surface voxel of `a` to the surface of `b`, followed by
/// those from `b` to `a`. `None` if either mask is empty.
pub fn pooled_surface_distances(
    a: &Array3<bool>,
    b: &Array3<bool>,
    spacing: [f64; 3],
    exec: Execution,
) -> Option<Vec<f64>> {
    assert_eq!(a.shape(), b.shape(), "metric masks differ in shape");
    let sa = surface(a);
    let sb = surface(b);
    if !sa.iter().any(|&x| x) || !sb.iter().any(|&x| x) {
        return None;
    }
    let to_b = squared_distance_transform(&sb, spacing, exec);
    let to_a = squared_distance_transform(&sa, spacing, exec);
    let mut out: Vec<f64> = Zip::from(&sa)
        .and(&to_b)
        .fold(Vec::new(), |mut acc, &s, &d| {
            if s {
                acc.push(d.sqrt());
            }
            acc
        });
    Zip::from(&sb).and(&to_a).for_each(|&s, &d| {
        if s {
            out.push(d.sqrt());
        }
    });
    Some(out)
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// HD95 and ASD of a pair of masks; `None` when either mask is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub hd95: f64,
    pub asd: f64,
}

pub fn surface_metrics(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3], exec: Execution) -> Option<SurfaceMetrics> {
    let d = pooled_surface_distances(a, b, spacing, exec)?;
    Some(SurfaceMetrics {
        hd95: percentile(&d, 95.0),
        asd: d.iter().sum::<f64>() / d.len() as f64,
    })
}

pub fn hd95(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Option<f64> {
    surface_metrics(a, b, spacing, Execution::default()).map(|m| m.hd95)
}

pub fn asd(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Option<f64> {
    surface_metrics(a, b, spacing, Execution::default()).map(|m| m.asd)
}

/// Metrics of one foreground class in one volume. Fractions are in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when the prediction or ground truth has no voxel of this class.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub classes: Vec<ClassMetrics>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl VolumeMetrics {
    pub fn mean_dice(&self) -> f64 {
        mean_of(self.classes.iter().map(|c| c.dice)).unwrap_or(f64::NAN)
    }
    pub fn mean_jaccard(&self) -> f64 {
        mean_of(self.classes.iter().map(|c| c.jaccard)).unwrap_or(f64::NAN)
    }
    /// Mean over classes where the distance is defined.
    pub fn mean_hd95(&self) -> Option<f64> {
        mean_of(self.classes.iter().filter_map(|c| c.hd95))
    }
    pub fn mean_asd(&self) -> Option<f64> {
        mean_of(self.classes.iter().filter_map(|c| c.asd))
    }
}

/// Per-foreground-class metrics of a prediction against dense ground truth.
pub fn evaluate_labels(
    volume_id: &str,
    pred: &LabelVolume,
    truth: &LabelVolume,
    spacing: [f64; 3],
    exec: Execution,
) -> Result<VolumeMetrics> {
    pred.check_same_dims(truth.dims(), "evaluation")?;
    if truth.count_labeled() != truth.data().len() {
        return Err(Error::Validation(format!("{volume_id}: ground truth is not dense")));
    }
    let classes = (1..truth.num_classes() as u8)
        .map(|c| {
            let p = pred.class_mask(c);
            let t = truth.class_mask(c);
            let sm = surface_metrics(&p, &t, spacing, exec);
            ClassMetrics {
                class: c,
                dice: dice(&p, &t),
                jaccard: jaccard(&p, &t),
                hd95: sm.map(|m| m.hd95),
                asd: sm.map(|m| m.asd),
            }
        })
        .collect();
    Ok(VolumeMetrics {
        volume_id: volume_id.to_string(),
        classes,
    })
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

/// Macro-averaged metrics over volumes. Dice and Jaccard are percentages here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volumes: Vec<VolumeMetrics>,
    pub dice: Option<MeanStd>,
    pub jaccard: Option<MeanStd>,
    pub hd95: Option<MeanStd>,
    pub asd: Option<MeanStd>,
    /// Classes whose surface distances were undefined, and similar remarks.
    pub notes: Vec<String>,
    /// Some prediction contained no foreground at all.
    pub degenerate: bool,
}

impl MetricsReport {
    /// Aggregates per-volume metrics; volumes are sorted by id first.
    pub fn from_volumes(mut volumes: Vec<VolumeMetrics>, degenerate: bool) -> Self {
        volumes.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));
        let mut notes = Vec::new();
        for v in &volumes {
            for c in &v.classes {
                if c.hd95.is_none() {
                    notes.push(format!(
                        "{}: class {} empty in prediction or ground truth; surface distances skipped",
                        v.volume_id, c.class
                    ));
                }
            }
        }
        if degenerate {
            notes.push("degenerate output: a prediction has no foreground voxels".into());
        }
        let pct = |f: fn(&VolumeMetrics) -> f64| {
            MeanStd::of(&volumes.iter().map(|v| 100.0 * f(v)).collect::<Vec<_>>())
        };
        let dist = |f: fn(&VolumeMetrics) -> Option<f64>| {
            MeanStd::of(&volumes.iter().filter_map(f).collect::<Vec<_>>())
        };
        MetricsReport {
            dice: pct(VolumeMetrics::mean_dice),
            jaccard: pct(VolumeMetrics::mean_jaccard),
            hd95: dist(VolumeMetrics::mean_hd95),
            asd: dist(VolumeMetrics::mean_asd),
            volumes,
            notes,
            degenerate,
        }
    }

    /// CSV with one row per volume and class; Dice and Jaccard as percentages,
    /// undefined distances as `skipped`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["volume_id", "class", "dice", "jaccard", "hd95", "asd"])?;
        let opt = |x: Option<f64>| x.map_or_else(|| "skipped".to_string(), |x| format!("{x:.6}"));
        for v in &self.volumes {
            for c in &v.classes {
                out.write_record([
                    v.volume_id.clone(),
                    c.class.to_string(),
                    format!("{:.6}", 100.0 * c.dice),
                    format!("{:.6}", 100.0 * c.jaccard),
                    opt(c.hd95),
                    opt(c.asd),
                ])?;
            }
        }
        let stats = [&self.dice, &self.jaccard, &self.hd95, &self.asd];
        for (name, pick) in [("mean", (|m: &MeanStd| m.mean) as fn(&MeanStd) -> f64), ("std", |m| m.std)] {
            let mut row = vec![name.to_string(), "all".to_string()];
            row.extend(stats.iter().map(|m| opt(m.as_ref().map(pick))));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let fmt = |m: &Option<MeanStd>| m.map_or_else(|| "n/a".to_string(), |m| m.to_string());
        let mut s = String::new();
        s.push_str("volume            dice(%)  jaccard(%)  hd95(vox)  asd(vox)\n");
        for v in &self.volumes {
            let opt = |x: Option<f64>| x.map_or_else(|| "skipped".to_string(), |x| format!("{x:.2}"));
            s.push_str(&format!(
                "{:<16} {:>8.2} {:>11.2} {:>10} {:>9}\n",
                v.volume_id,
                100.0 * v.mean_dice(),
                100.0 * v.mean_jaccard(),
                opt(v.mean_hd95()),
                opt(v.mean_asd())
            ));
        }
        s.push_str(&format!(
            "mean±std         dice {}  jaccard {}  hd95 {}  asd {}\n",
            fmt(&self.dice),
            fmt(&self.jaccard),
            fmt(&self.hd95),
            fmt(&self.asd)
        ));
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }
}
