//! Pseudo-label selection and masked losses for 3D-2D cross-teaching.
//!
//! The 3D network teaches both 2D networks with its confident voxels
//! ([`select_hard_soft`]); the 2D networks teach the 3D network where their
//! argmax agree ([`fuse_consistent`]), minus voxels the 3D network is more
//! sure about ([`label_correction`]). Pseudo labels are overwritten by ground
//! truth where it exists ([`mix_labels`]) and weighted by a ramped `w`
//! ([`build_weight_mask`]). Each network minimises half masked cross-entropy
//! plus half masked soft Dice.

use ndarray::{Array3, Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::annotation::CrossAnnotation;
use crate::error::{Error, Result};
use crate::prob::ProbabilityField;
use crate::real::Real;
use crate::volume::{dims_of, LabelVolume, UNLABELED};

/// Probabilities are clamped to this before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

/// Confidence thresholds for selecting 3D pseudo labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionThresholds {
    /// Pseudo accuracy at or above which a prediction counts as reliable.
    pub t_q: f64,
    /// Confidence cutoff for unreliable predictions.
    pub t_h: f64,
    /// Confidence cutoff for reliable predictions.
    pub t_s: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        SelectionThresholds {
            t_q: 0.98,
            t_h: 0.9,
            t_s: 0.7,
        }
    }
}

impl SelectionThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_q", self.t_q), ("t_h", self.t_h), ("t_s", self.t_s)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Validation(format!("{name} = {v} is outside (0, 1)")));
            }
        }
        if self.t_s > self.t_h {
            return Err(Error::Validation(format!(
                "soft threshold {} exceeds hard threshold {}",
                self.t_s, self.t_h
            )));
        }
        Ok(())
    }

    /// Confidence cutoff in force for a prediction with pseudo accuracy `acc`.
    pub fn cutoff(&self, acc: f64) -> f64 {
        if acc >= self.t_q {
            self.t_s
        } else {
            self.t_h
        }
    }
}

/// Gaussian ramp from 0 to `w_max` over `length` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSchedule {
    pub w_max: f64,
    pub length: usize,
}

impl RampSchedule {
    pub fn new(w_max: f64, length: usize) -> Self {
        RampSchedule { w_max, length }
    }

    /// Ramp covering the first 40% of `iterations`.
    pub fn for_iterations(iterations: usize) -> Self {
        RampSchedule::new(0.1, (iterations * 2).div_ceil(5))
    }

    pub fn weight(&self, t: usize) -> f64 {
        ramp_weight(t, self)
    }
}

impl Default for RampSchedule {
    fn default() -> Self {
        RampSchedule::for_iterations(6000)
    }
}

/// `w_max * exp(-5 (1 - t/L)^2)` for `t < L`, `w_max` afterwards, and exactly 0 at `t = 0`.
pub fn ramp_weight(t: usize, s: &RampSchedule) -> f64 {
    if t == 0 {
        return 0.0;
    }
    if t >= s.length {
        return s.w_max;
    }
    let phase = 1.0 - t as f64 / s.length as f64;
    s.w_max * (-5.0 * phase * phase).exp()
}

/// Agreement between a prediction and the sparse annotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoAccuracy {
    pub value: f64,
    pub correct: usize,
    pub annotated: usize,
}

/// Fraction of annotated voxels where the argmax prediction equals the annotation.
///
/// The denominator is the annotated voxel count, not the full grid.
pub fn estimate_pseudo_accuracy<T: Real>(
    p: &ProbabilityField<T>,
    y: &CrossAnnotation,
) -> Result<PseudoAccuracy> {
    p.check_dims(y.dims(), "pseudo accuracy")?;
    let hard = p.hard_prediction();
    let mut correct = 0usize;
    let mut annotated = 0usize;
    Zip::from(y.labels().data())
        .and(hard.data())
        .for_each(|&t, &h| {
            if t != UNLABELED {
                annotated += 1;
                correct += usize::from(t == h);
            }
        });
    if annotated == 0 {
        return Err(Error::Degenerate("no annotated voxels to estimate accuracy".into()));
    }
    Ok(PseudoAccuracy {
        value: correct as f64 / annotated as f64,
        correct,
        annotated,
    })
}

/// Selected pseudo labels: the class where `selected`, [`UNLABELED`] elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: LabelVolume,
    pub selected: Array3<bool>,
}

impl PseudoLabels {
    fn from_hard(hard: LabelVolume, selected: Array3<bool>) -> Self {
        let k = hard.num_classes();
        let mut data = hard.into_inner();
        Zip::from(&mut data).and(&selected).for_each(|v, &s| {
            if !s {
                *v = UNLABELED;
            }
        });
        PseudoLabels {
            labels: LabelVolume::new(data, k).expect("argmax labels are valid"),
            selected,
        }
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Hard-soft confidence selection on a 3D prediction.
///
/// Reliable predictions (`acc >= t_q`) keep voxels with confidence `>= t_s`,
/// unreliable ones only those `>= t_h`.
pub fn select_hard_soft<T: Real>(
    p3d: &ProbabilityField<T>,
    acc: &PseudoAccuracy,
    th: &SelectionThresholds,
) -> PseudoLabels {
    let cutoff = th.cutoff(acc.value);
    let selected = p3d.confidence().mapv(|c| c.as_f64() >= cutoff);
    PseudoLabels::from_hard(p3d.hard_prediction(), selected)
}

/// Voxels where the two 2D networks predict the same class.
pub fn fuse_consistent<T: Real>(
    pa: &ProbabilityField<T>,
    pb: &ProbabilityField<T>,
) -> Result<PseudoLabels> {
    pb.check_dims(pa.dims(), "consistent fusion")?;
    if pa.num_classes() != pb.num_classes() {
        return Err(Error::Shape("fused fields differ in class count".into()));
    }
    let ha = pa.hard_prediction();
    let hb = pb.hard_prediction();
    let consensus = Zip::from(ha.data())
        .and(hb.data())
        .map_collect(|a, b| a == b);
    Ok(PseudoLabels::from_hard(ha, consensus))
}

/// Voxels excluded from supervising the 3D network: the 2D pseudo label
/// disagrees with the 3D argmax and the 3D confidence is strictly above both
/// 2D confidences.
pub fn label_correction<T: Real>(
    pseudo2d: &LabelVolume,
    p3d: &ProbabilityField<T>,
    pa: &ProbabilityField<T>,
    pb: &ProbabilityField<T>,
) -> Result<Array3<bool>> {
    let dims = pseudo2d.dims();
    for (f, name) in [(p3d, "3d"), (pa, "2d transverse"), (pb, "2d coronal")] {
        f.check_dims(dims, name)?;
    }
    let hard3d = p3d.hard_prediction();
    let (c3, ca, cb) = (p3d.confidence(), pa.confidence(), pb.confidence());
    let mut veto = Array3::from_elem(dims, false);
    Zip::from(&mut veto)
        .and(pseudo2d.data())
        .and(hard3d.data())
        .and(&c3)
        .and(&ca)
        .and(&cb)
        .for_each(|v, &pl, &h, &c3, &ca, &cb| {
            *v = pl != UNLABELED && h != pl && c3 > ca && c3 > cb;
        });
    Ok(veto)
}

/// Ground truth where annotated, the pseudo label elsewhere.
pub fn mix_labels(y: &CrossAnnotation, pseudo: &LabelVolume) -> Result<LabelVolume> {
    pseudo.check_same_dims(y.dims(), "mix")?;
    let mixed = Zip::from(y.labels().data())
        .and(pseudo.data())
        .map_collect(|&gt, &p| if gt != UNLABELED { gt } else { p });
    LabelVolume::new(mixed, y.num_classes())
}

/// Per-voxel loss weights: 1 on ground truth, `w` on selected non-vetoed
/// pseudo labels, 0 elsewhere.
pub fn build_weight_mask(
    y: &CrossAnnotation,
    selected: &Array3<bool>,
    veto: &Array3<bool>,
    w: f64,
) -> Result<Array3<f64>> {
    let dims = y.dims();
    if dims_of(selected) != dims || dims_of(veto) != dims {
        return Err(Error::Shape("weight mask inputs differ in shape".into()));
    }
    Ok(Zip::from(y.labels().data())
        .and(selected)
        .and(veto)
        .map_collect(|&gt, &s, &v| {
            if gt != UNLABELED {
                1.0
            } else if s && !v {
                w
            } else {
                0.0
            }
        }))
}

/// Mixed labels and loss weights for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTarget {
    labels: LabelVolume,
    weights: Array3<f64>,
}

impl SupervisionTarget {
    /// Mixes `pseudo` into the annotation and weights it per [`build_weight_mask`].
    pub fn assemble(y: &CrossAnnotation, pseudo: &PseudoLabels, veto: Option<&Array3<bool>>, w: f64) -> Result<Self> {
        let labels = mix_labels(y, &pseudo.labels)?;
        let no_veto;
        let veto = match veto {
            Some(v) => v,
            None => {
                no_veto = Array3::from_elem(y.dims(), false);
                &no_veto
            }
        };
        let weights = build_weight_mask(y, &pseudo.selected, veto, w)?;
        Ok(SupervisionTarget { labels, weights })
    }

    /// Annotation only: weight 1 on annotated voxels, 0 elsewhere.
    pub fn sparse(y: &CrossAnnotation) -> Self {
        SupervisionTarget {
            labels: y.labels().clone(),
            weights: y.labels().data().mapv(|v| if v != UNLABELED { 1.0 } else { 0.0 }),
        }
    }

    /// Every voxel of a dense label grid with weight 1.
    pub fn dense(labels: &LabelVolume) -> Result<Self> {
        if labels.count_labeled() != labels.data().len() {
            return Err(Error::Validation("dense target has unlabeled voxels".into()));
        }
        Ok(SupervisionTarget {
            labels: labels.clone(),
            weights: Array3::ones(labels.dims()),
        })
    }

    /// Arbitrary labels and weights; positive weights require a label.
    pub fn new(labels: LabelVolume, weights: Array3<f64>) -> Result<Self> {
        if dims_of(&weights) != labels.dims() {
            return Err(Error::Shape("weights and labels differ in shape".into()));
        }
        let ok = Zip::from(labels.data())
            .and(&weights)
            .all(|&l, &m| m.is_finite() && m >= 0.0 && (m == 0.0 || l != UNLABELED));
        if !ok {
            return Err(Error::Validation(
                "weights must be finite, nonnegative and zero on unlabeled voxels".into(),
            ));
        }
        Ok(SupervisionTarget { labels, weights })
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.sum()
    }

    /// Copy with all weights multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        SupervisionTarget {
            labels: self.labels.clone(),
            weights: self.weights.mapv(|m| m * factor),
        }
    }

    fn check_field<T: Real>(&self, p: &ProbabilityField<T>) -> Result<f64> {
        p.check_dims(self.labels.dims(), "loss")?;
        if p.num_classes() != self.labels.num_classes() {
            return Err(Error::Shape(format!(
                "field has {} classes, target {}",
                p.num_classes(),
                self.labels.num_classes()
            )));
        }
        let total = self.total_weight();
        if !(total > 0.0) {
            return Err(Error::Degenerate("all voxel weights are zero".into()));
        }
        Ok(total)
    }
}

/// A scalar loss and its gradient with respect to the probabilities.
#[derive(Clone, Debug)]
pub struct LossTerm<T: Real> {
    pub value: f64,
    pub grad: Array4<T>,
}

/// Weighted mean of `-log p[target]`.
pub fn masked_cross_entropy<T: Real>(
    p: &ProbabilityField<T>,
    target: &SupervisionTarget,
) -> Result<LossTerm<T>> {
    let total = target.check_field(p)?;
    let probs = p.probs();
    let mut grad = Array4::<T>::zeros(probs.raw_dim());
    let mut sum = 0.0;
    for ((i, j, l), &m) in target.weights.indexed_iter() {
        if m == 0.0 {
            continue;
        }
        let c = usize::from(target.labels.data()[[i, j, l]]);
        let q = probs[[c, i, j, l]].as_f64();
        let clamped = q.max(LOG_CLAMP);
        sum -= m * clamped.ln();
        if q > LOG_CLAMP {
            grad[[c, i, j, l]] = T::of(-m / (total * q));
        }
    }
    Ok(LossTerm {
        value: sum / total,
        grad,
    })
}

/// Weighted soft Dice loss, evaluated per class against one-hot targets and
/// averaged over classes that have at least one weighted target voxel.
pub fn masked_dice<T: Real>(
    p: &ProbabilityField<T>,
    target: &SupervisionTarget,
) -> Result<LossTerm<T>> {
    target.check_field(p)?;
    let k = p.num_classes();
    let probs = p.probs();
    // intersection = sum m p y, denominator = sum m (p^2 + y^2)
    let mut inter = vec![0.0f64; k];
    let mut denom = vec![0.0f64; k];
    let mut present = vec![false; k];
    for ((i, j, l), &m) in target.weights.indexed_iter() {
        if m == 0.0 {
            continue;
        }
        let t = usize::from(target.labels.data()[[i, j, l]]);
        present[t] = true;
        for c in 0..k {
            let q = probs[[c, i, j, l]].as_f64();
            denom[c] += m * q * q;
            if c == t {
                inter[c] += m * q;
                denom[c] += m;
            }
        }
    }
    let classes: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
    let n = classes.len() as f64;
    let score: f64 = classes.iter().map(|&c| 2.0 * inter[c] / denom[c]).sum::<f64>() / n;
    let mut grad = Array4::<T>::zeros(probs.raw_dim());
    for ((i, j, l), &m) in target.weights.indexed_iter() {
        if m == 0.0 {
            continue;
        }
        let t = usize::from(target.labels.data()[[i, j, l]]);
        for &c in &classes {
            let q = probs[[c, i, j, l]].as_f64();
            let y = if c == t { 1.0 } else { 0.0 };
            let d = denom[c];
            let g = -2.0 * m * (y * d - 2.0 * inter[c] * q) / (d * d * n);
            grad[[c, i, j, l]] = T::of(g);
        }
    }
    Ok(LossTerm {
        value: 1.0 - score,
        grad,
    })
}

/// Equal-weight combination of the two losses.
pub fn total_loss(ce: f64, dice: f64) -> f64 {
    0.5 * ce + 0.5 * dice
}

/// Both losses, their combination and the combined gradient.
#[derive(Clone, Debug)]
pub struct CombinedLoss<T: Real> {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
    pub grad: Array4<T>,
}

pub fn combined_loss<T: Real>(
    p: &ProbabilityField<T>,
    target: &SupervisionTarget,
) -> Result<CombinedLoss<T>> {
    let ce = masked_cross_entropy(p, target)?;
    let dice = masked_dice(p, target)?;
    let half = T::of(0.5);
    let grad = Zip::from(&ce.grad)
        .and(&dice.grad)
        .map_collect(|&a, &b| half * a + half * b);
    Ok(CombinedLoss {
        ce: ce.value,
        dice: dice.value,
        total: total_loss(ce.value, dice.value),
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::NetSource;
    use crate::volume::Dims;
    use ndarray::Axis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(seed: u64, k: usize, dims: Dims, sharpness: f64) -> ProbabilityField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array4::from_shape_fn((k, dims[0], dims[1], dims[2]), |_| {
            (sharpness * rng.random_range(0.0..1.0f64)).exp()
        });
        for mut lane in p.lanes_mut(Axis(0)) {
            let s: f64 = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        ProbabilityField::new(p, NetSource::Net3d).unwrap()
    }

    fn dense(seed: u64, k: usize, dims: Dims) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabelVolume::new(Array3::from_shape_fn(dims, |_| rng.random_range(0..k as u8)), k).unwrap()
    }

    fn cross(seed: u64, k: usize, dims: Dims, ta: Vec<usize>, tb: Vec<usize>) -> CrossAnnotation {
        CrossAnnotation::from_slice_lists(&dense(seed, k, dims), [ta, tb], [1, 1]).unwrap()
    }

    fn single_voxel_field(probs: &[f64]) -> ProbabilityField<f64> {
        let p = Array4::from_shape_vec((probs.len(), 1, 1, 1), probs.to_vec()).unwrap();
        ProbabilityField::new(p, NetSource::Net3d).unwrap()
    }

    fn single_voxel_target(class: u8, k: usize, m: f64) -> SupervisionTarget {
        SupervisionTarget::new(
            LabelVolume::new(Array3::from_elem([1, 1, 1], class), k).unwrap(),
            Array3::from_elem([1, 1, 1], m),
        )
        .unwrap()
    }

    #[test]
    fn default_thresholds() {
        let t = SelectionThresholds::default();
        assert_eq!((t.t_q, t.t_h, t.t_s), (0.98, 0.9, 0.7));
        t.validate().unwrap();
        assert!(SelectionThresholds { t_q: 0.9, t_h: 0.5, t_s: 0.7 }.validate().is_err());
        assert!(SelectionThresholds { t_q: 1.0, t_h: 0.9, t_s: 0.7 }.validate().is_err());
    }

    #[test]
    fn ramp_endpoints_and_midpoint() {
        let s = RampSchedule::new(0.1, 100);
        assert_eq!(ramp_weight(0, &s), 0.0);
        assert_eq!(ramp_weight(100, &s), 0.1);
        assert_eq!(ramp_weight(1000, &s), 0.1);
        assert!((ramp_weight(50, &s) - 0.02865047968601901).abs() < 1e-12);
        assert!((0.1 * (-1.25f64).exp() - 0.02865).abs() < 1e-5);
        let mut prev = 0.0;
        for t in 0..150 {
            let w = ramp_weight(t, &s);
            assert!(w >= prev);
            prev = w;
        }
        assert_eq!(RampSchedule::for_iterations(6000).length, 2400);
    }

    #[test]
    fn pseudo_accuracy_counts() {
        let y = cross(1, 3, [4, 4, 4], vec![1], vec![2]);
        let perfect = ProbabilityField::<f64>::one_hot(y.labels(), NetSource::Net3d);
        let acc = estimate_pseudo_accuracy(&perfect, &y).unwrap();
        assert_eq!(acc.value, 1.0);
        assert_eq!(acc.annotated, y.count_annotated());

        let shifted = y.labels().data().mapv(|v| if v == UNLABELED { 0 } else { (v + 1) % 3 });
        let wrong = ProbabilityField::<f64>::one_hot(&LabelVolume::new(shifted, 3).unwrap(), NetSource::Net3d);
        assert_eq!(estimate_pseudo_accuracy(&wrong, &y).unwrap().value, 0.0);
    }

    #[test]
    fn pseudo_accuracy_six_of_eight() {
        // one transverse slice on a 2x4x1 grid gives 8 annotated voxels
        let labels = LabelVolume::new(Array3::zeros([2, 4, 1]), 2).unwrap();
        let y = CrossAnnotation::from_slice_lists(&labels, [vec![0], vec![]], [1, 1]).unwrap();
        let mut pred = Array3::zeros([2, 4, 1]);
        pred[[0, 0, 0]] = 1;
        pred[[1, 3, 0]] = 1;
        let p = ProbabilityField::<f64>::one_hot(&LabelVolume::new(pred, 2).unwrap(), NetSource::Net3d);
        let acc = estimate_pseudo_accuracy(&p, &y).unwrap();
        assert_eq!((acc.correct, acc.annotated, acc.value), (6, 8, 0.75));
    }

    #[test]
    fn pseudo_accuracy_needs_annotation() {
        let y = cross(1, 3, [2, 2, 2], vec![], vec![]);
        let p = field(0, 3, [2, 2, 2], 1.0);
        assert!(matches!(estimate_pseudo_accuracy(&p, &y), Err(Error::Degenerate(_))));
    }

    fn acc(v: f64) -> PseudoAccuracy {
        PseudoAccuracy { value: v, correct: 0, annotated: 1 }
    }

    #[test]
    fn hard_soft_examples() {
        let th = SelectionThresholds::default();
        let p75 = single_voxel_field(&[0.75, 0.25]);
        let p95 = single_voxel_field(&[0.05, 0.95]);
        assert!(select_hard_soft(&p75, &acc(0.99), &th).selected[[0, 0, 0]]);
        assert!(!select_hard_soft(&p75, &acc(0.95), &th).selected[[0, 0, 0]]);
        let s = select_hard_soft(&p95, &acc(0.95), &th);
        assert!(s.selected[[0, 0, 0]]);
        assert_eq!(s.labels.data()[[0, 0, 0]], 1);
        let r = select_hard_soft(&p75, &acc(0.95), &th);
        assert_eq!(r.labels.data()[[0, 0, 0]], UNLABELED);
    }

    #[test]
    fn collapsed_thresholds_ignore_reliability() {
        let th = SelectionThresholds { t_q: 0.98, t_h: 0.6, t_s: 0.6 };
        let p = field(4, 3, [5, 5, 5], 4.0);
        assert_eq!(
            select_hard_soft(&p, &acc(0.99), &th),
            select_hard_soft(&p, &acc(0.10), &th)
        );
    }

    #[test]
    fn fusion_of_identical_and_opposed_fields() {
        let p = field(3, 3, [3, 3, 3], 3.0);
        let f = fuse_consistent(&p, &p).unwrap();
        assert_eq!(f.count(), 27);
        assert_eq!(f.labels, p.hard_prediction());

        let a = ProbabilityField::<f64>::one_hot(&LabelVolume::new(Array3::zeros([2, 2, 2]), 2).unwrap(), NetSource::Net2dTransverse);
        let b = ProbabilityField::<f64>::one_hot(&LabelVolume::new(Array3::ones([2, 2, 2]), 2).unwrap(), NetSource::Net2dCoronal);
        let f = fuse_consistent(&a, &b).unwrap();
        assert_eq!(f.count(), 0);
        assert_eq!(f.labels.count_labeled(), 0);
    }

    #[test]
    fn fusion_matches_voxel_scan() {
        let a = field(10, 3, [4, 4, 4], 2.0);
        let b = field(11, 3, [4, 4, 4], 2.0);
        let f = fuse_consistent(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for l in 0..4 {
                    let arg = |p: &ProbabilityField<f64>| {
                        (0..3).fold(0, |best, c| if p.probs()[[c, i, j, l]] > p.probs()[[best, i, j, l]] { c } else { best })
                    };
                    let agree = arg(&a) == arg(&b);
                    assert_eq!(f.selected[[i, j, l]], agree);
                    let expect = if agree { arg(&a) as u8 } else { UNLABELED };
                    assert_eq!(f.labels.data()[[i, j, l]], expect);
                }
            }
        }
    }

    fn correction_case(conf3d: f64, pseudo: u8) -> bool {
        let p3d = single_voxel_field(&[conf3d, 1.0 - conf3d]);
        let pa = single_voxel_field(&[0.4, 0.6]);
        let pb = single_voxel_field(&[0.3, 0.7]);
        let pl = LabelVolume::new(Array3::from_elem([1, 1, 1], pseudo), 2).unwrap();
        label_correction(&pl, &p3d, &pa, &pb).unwrap()[[0, 0, 0]]
    }

    #[test]
    fn label_correction_examples() {
        // 3D argmax 0 agrees with pseudo label 0
        assert!(!correction_case(0.9, 0));
        // disagreement, 0.9 above both 0.6 and 0.7
        assert!(correction_case(0.9, 1));
        // disagreement, 0.65 is not above 0.7
        assert!(!correction_case(0.65, 1));
        // tie with the larger 2D confidence does not veto
        assert!(!correction_case(0.7, 1));
        // unlabeled pseudo voxels are never vetoed
        assert!(!correction_case(0.9, UNLABELED));
    }

    #[test]
    fn mix_examples() {
        let d = dense(5, 3, [4, 4, 4]);
        let full = CrossAnnotation::from_dense(&d, [1, 1], [0, 0]).unwrap();
        let pseudo = dense(6, 3, [4, 4, 4]);
        assert_eq!(mix_labels(&full, &pseudo).unwrap(), d);
        let empty = CrossAnnotation::from_slice_lists(&d, [vec![], vec![]], [1, 1]).unwrap();
        assert_eq!(mix_labels(&empty, &pseudo).unwrap(), pseudo);
    }

    #[test]
    fn mix_matches_voxelwise_merge() {
        let y = cross(7, 4, [5, 6, 4], vec![0, 2], vec![]);
        let p = field(8, 4, [5, 6, 4], 3.0);
        let partial = select_hard_soft(&p, &acc(0.5), &SelectionThresholds { t_q: 0.9, t_h: 0.5, t_s: 0.5 });
        let mixed = mix_labels(&y, &partial.labels).unwrap();
        for ((i, j, l), &v) in mixed.data().indexed_iter() {
            let gt = y.labels().data()[[i, j, l]];
            let expect = if gt != UNLABELED { gt } else { partial.labels.data()[[i, j, l]] };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn weight_mask_precedence_and_veto() {
        let y = cross(1, 2, [2, 2, 2], vec![0], vec![]);
        let all = Array3::from_elem([2, 2, 2], true);
        let none = Array3::from_elem([2, 2, 2], false);
        let m = build_weight_mask(&y, &all, &none, 0.05).unwrap();
        assert_eq!(m[[0, 0, 0]], 1.0);
        assert_eq!(m[[0, 0, 1]], 0.05);
        let m = build_weight_mask(&y, &all, &all, 0.05).unwrap();
        assert_eq!(m[[0, 0, 0]], 1.0);
        assert_eq!(m[[0, 0, 1]], 0.0);
    }

    #[test]
    fn weight_mask_histogram_matches_construction() {
        let dims = [6, 5, 4];
        let y = cross(2, 3, dims, vec![1], vec![3]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sel = Array3::from_shape_fn(dims, |_| rng.random_bool(0.6));
        let veto = Array3::from_shape_fn(dims, |_| rng.random_bool(0.2));
        let m = build_weight_mask(&y, &sel, &veto, 0.05).unwrap();
        let (mut n0, mut nw, mut n1) = (0, 0, 0);
        for (idx, &v) in m.indexed_iter() {
            let idx = [idx.0, idx.1, idx.2];
            let expect = if y.labels().is_labeled(idx) {
                1.0
            } else if sel[idx] && !veto[idx] {
                0.05
            } else {
                0.0
            };
            assert_eq!(v, expect);
            match v {
                x if x == 0.0 => n0 += 1,
                x if x == 0.05 => nw += 1,
                _ => n1 += 1,
            }
        }
        assert_eq!(n1, y.count_annotated());
        assert_eq!(n0 + nw + n1, 120);
        assert!(nw > 0 && n0 > 0);
    }

    #[test]
    fn cross_entropy_examples() {
        let target = single_voxel_target(0, 2, 1.0);
        let e = (-1.0f64).exp();
        let ce = masked_cross_entropy(&single_voxel_field(&[e, 1.0 - e]), &target).unwrap();
        assert!((ce.value - 1.0).abs() < 1e-12);
        let perfect = masked_cross_entropy(&single_voxel_field(&[1.0, 0.0]), &target).unwrap();
        assert_eq!(perfect.value, 0.0);

        let y = cross(3, 3, [4, 4, 4], vec![1], vec![2]);
        let t = SupervisionTarget::sparse(&y);
        let p = field(1, 3, [4, 4, 4], 2.0);
        let a = masked_cross_entropy(&p, &t).unwrap().value;
        let b = masked_cross_entropy(&p, &t.scaled(2.0)).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let target = single_voxel_target(1, 2, 1.0);
        // only class 1 has a weighted target voxel, so the binary form applies
        let d = masked_dice(&single_voxel_field(&[0.5, 0.5]), &target).unwrap();
        assert!((d.value - 0.2).abs() < 1e-12);
        let perfect = masked_dice(&single_voxel_field(&[0.0, 1.0]), &target).unwrap();
        assert_eq!(perfect.value, 0.0);
    }

    #[test]
    fn all_zero_mask_is_degenerate() {
        let y = cross(3, 3, [2, 2, 2], vec![], vec![]);
        let t = SupervisionTarget::sparse(&y);
        let p = field(1, 3, [2, 2, 2], 1.0);
        assert!(matches!(masked_cross_entropy(&p, &t), Err(Error::Degenerate(_))));
        assert!(matches!(masked_dice(&p, &t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn total_loss_is_mean() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert!((total_loss(0.4, 0.2) - 0.3).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        assert!((total_loss(a, b) - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn unmasked_voxels_do_not_matter() {
        let dims = [4, 3, 3];
        let y = cross(9, 3, dims, vec![1], vec![]);
        let t = SupervisionTarget::sparse(&y);
        let p = field(2, 3, dims, 2.0);
        let q = field(99, 3, dims, 2.0);
        // copy p onto annotated voxels of q
        let mut mixed = q.probs().clone();
        for ((c, i, j, l), v) in mixed.indexed_iter_mut() {
            if y.labels().is_labeled([i, j, l]) {
                *v = p.probs()[[c, i, j, l]];
            }
        }
        let r = ProbabilityField::new(mixed, NetSource::Net3d).unwrap();
        assert_eq!(masked_dice(&p, &t).unwrap().value, masked_dice(&r, &t).unwrap().value);
        assert_eq!(
            masked_cross_entropy(&p, &t).unwrap().value,
            masked_cross_entropy(&r, &t).unwrap().value
        );
    }

    proptest! {
        #[test]
        fn mix_is_dominated_by_ground_truth(seed in 0u64..10_000, ta in 0usize..4, tb in 0usize..5) {
            let y = cross(seed, 3, [3, 5, 4], vec![ta], vec![tb]);
            let pseudo = dense(seed + 1, 3, [3, 5, 4]);
            let mixed = mix_labels(&y, &pseudo).unwrap();
            for (idx, &gt) in y.labels().data().indexed_iter() {
                if gt != UNLABELED {
                    prop_assert_eq!(mixed.data()[idx], gt);
                }
            }
        }

        #[test]
        fn raising_the_active_threshold_shrinks_selection(
            seed in 0u64..10_000, a in 0.3f64..0.95, b in 0.3f64..0.95, q in 0.0f64..1.0,
        ) {
            let p = field(seed, 3, [4, 4, 3], 5.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let loose = select_hard_soft(&p, &acc(q), &SelectionThresholds { t_q: 0.5, t_h: lo.max(0.96), t_s: lo });
            let tight = select_hard_soft(&p, &acc(q), &SelectionThresholds { t_q: 0.5, t_h: hi.max(0.96), t_s: hi });
            for (idx, &s) in tight.selected.indexed_iter() {
                prop_assert!(!s || loose.selected[idx]);
            }
        }

        #[test]
        fn hard_soft_dominates_single_hard_threshold(
            seed in 0u64..10_000, ts in 0.3f64..0.9, dh in 0.0f64..0.09, q in 0.9f64..1.0,
        ) {
            let th = SelectionThresholds { t_q: 0.9, t_h: ts + dh, t_s: ts };
            let single = SelectionThresholds { t_q: 0.9, t_h: ts + dh, t_s: ts + dh };
            let p = field(seed, 4, [3, 3, 3], 5.0);
            let hs = select_hard_soft(&p, &acc(q), &th);
            let hh = select_hard_soft(&p, &acc(q), &single);
            for (idx, &s) in hh.selected.indexed_iter() {
                prop_assert!(!s || hs.selected[idx]);
            }
        }

        #[test]
        fn weight_mask_codomain(seed in 0u64..10_000, w in 0.0f64..0.1) {
            let dims = [4, 5, 3];
            let y = cross(seed, 3, dims, vec![seed as usize % 3], vec![]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = Array3::from_shape_fn(dims, |_| rng.random_bool(0.5));
            let veto = Array3::from_shape_fn(dims, |_| rng.random_bool(0.3));
            let m = build_weight_mask(&y, &sel, &veto, w).unwrap();
            for (idx, &v) in m.indexed_iter() {
                prop_assert!(v == 0.0 || v == w || v == 1.0);
                prop_assert_eq!(v == 1.0 && w != 1.0, y.labels().data()[idx] != UNLABELED);
            }
        }

        #[test]
        fn pseudo_accuracy_matches_brute_force(seed in 0u64..10_000) {
            let dims = [3, 4, 5];
            let y = cross(seed, 3, dims, vec![1, 3], vec![2]);
            let p = field(seed + 7, 3, dims, 3.0);
            let acc = estimate_pseudo_accuracy(&p, &y).unwrap();
            let (mut hit, mut n) = (0usize, 0usize);
            for i in 0..3 { for j in 0..4 { for l in 0..5 {
                let gt = y.labels().data()[[i, j, l]];
                if gt == UNLABELED { continue; }
                n += 1;
                let mut best = 0;
                for c in 1..3 { if p.probs()[[c, i, j, l]] > p.probs()[[best, i, j, l]] { best = c; } }
                if best as u8 == gt { hit += 1; }
            }}}
            prop_assert_eq!(acc.annotated, n);
            prop_assert_eq!(acc.value, hit as f64 / n as f64);
        }

        #[test]
        fn veto_never_hits_agreeing_voxels(seed in 0u64..10_000) {
            let dims = [3, 3, 3];
            let p3 = field(seed, 3, dims, 4.0);
            let pa = field(seed + 1, 3, dims, 4.0);
            let pb = field(seed + 2, 3, dims, 4.0);
            let fused = fuse_consistent(&pa, &pb).unwrap();
            let veto = label_correction(&fused.labels, &p3, &pa, &pb).unwrap();
            let h = p3.hard_prediction();
            for (idx, &v) in veto.indexed_iter() {
                if h.data()[idx] == fused.labels.data()[idx] {
                    prop_assert!(!v);
                }
            }
        }

        #[test]
        fn perfect_prediction_has_zero_loss(seed in 0u64..10_000) {
            let dims = [3, 4, 2];
            let y = cross(seed, 3, dims, vec![0], vec![1]);
            let t = SupervisionTarget::sparse(&y);
            // predict the annotation exactly; unannotated voxels get arbitrary one-hot values
            let filled = y.labels().data().mapv(|v| if v == UNLABELED { 2 } else { v });
            let p = ProbabilityField::<f64>::one_hot(&LabelVolume::new(filled, 3).unwrap(), NetSource::Net3d);
            prop_assert_eq!(masked_cross_entropy(&p, &t).unwrap().value, 0.0);
            prop_assert!(masked_dice(&p, &t).unwrap().value.abs() < 1e-15);
        }
    }
}
