//! The cross-teaching optimization loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crossseg_core::annotation::CrossAnnotation;
use crossseg_core::manifest::{DatasetManifest, SplitName};
use crossseg_core::preprocess::random_crop;
use crossseg_core::teaching::{
    combined_loss, estimate_pseudo_accuracy, fuse_consistent, label_correction, select_hard_soft, PseudoAccuracy,
    SupervisionTarget,
};
use crossseg_core::{Error, Execution, IntensityVolume, NetSource, ProbabilityField, Result};
use crossseg_nn::checkpoint::{save_checkpoint, sha256_hex};
use crossseg_nn::{backward_field, forward_field, AdamW, Dimensionality, FieldCache, Network, NetworkConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TeachingMode, TrainConfig};
use crate::data::{annotate, prepare_split, PreparedVolume};
use crate::eval::validation_dice;

/// One network and its optimizer.
#[derive(Clone, Debug)]
pub struct Member {
    pub net: Network<f32>,
    pub opt: AdamW,
}

/// Three networks in [`NetSource::ALL`] order, plus the step history.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub members: [Member; 3],
    pub iteration: usize,
    pub history: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetLoss {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub w: f64,
    /// Pseudo accuracy of the 3D prediction (cross-teaching only).
    pub p_acc: Option<f64>,
    /// Mean loss over the batch, keyed by network name.
    pub losses: BTreeMap<String, NetLoss>,
    /// 3D pseudo-label voxels selected to teach the 2D networks.
    pub selected_3d: usize,
    /// Voxels where the 2D networks agree.
    pub fused_2d: usize,
    /// Fused voxels excluded by label correction.
    pub vetoed: usize,
    /// Networks whose update was skipped for lack of supervised voxels.
    pub skipped: Vec<String>,
}

/// Seeds of the three networks derived from the run seed.
pub fn network_seeds(seed: u64) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    [rng.random(), rng.random(), rng.random()]
}

pub fn network_config(cfg: &TrainConfig, source: NetSource, num_classes: usize) -> NetworkConfig {
    let idx = NetSource::ALL.iter().position(|&s| s == source).expect("known source");
    NetworkConfig {
        num_classes,
        base_channels: cfg.base_channels,
        depth: cfg.depth,
        dimensionality: if source == NetSource::Net3d { Dimensionality::Three } else { Dimensionality::Two },
        seed: network_seeds(cfg.seed)[idx],
    }
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        let member = |s| -> Result<Member> {
            let net = Network::new(network_config(cfg, s, num_classes))?;
            let opt = AdamW::new(cfg.adam, net.num_params());
            Ok(Member { net, opt })
        };
        Ok(TrainState {
            members: [member(NetSource::Net3d)?, member(NetSource::Net2dTransverse)?, member(NetSource::Net2dCoronal)?],
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn net3d(&self) -> &Network<f32> {
        &self.members[0].net
    }
}

/// Checks that a patch fits the volume and passes through every network.
pub fn check_patch(cfg: &TrainConfig, dims: crossseg_core::Dims, num_classes: usize) -> Result<()> {
    if (0..3).any(|a| cfg.patch[a] > dims[a]) {
        return Err(Error::Validation(format!("patch {:?} exceeds volume {dims:?}", cfg.patch)));
    }
    let p = cfg.patch;
    network_config(cfg, NetSource::Net3d, num_classes).check_input(p)?;
    let c2 = network_config(cfg, NetSource::Net2dTransverse, num_classes);
    c2.check_input(p)?;
    c2.check_input([p[0], p[2], p[1]])
}

struct Forward {
    field: ProbabilityField<f32>,
    cache: FieldCache<f32>,
}

fn forward(m: &Member, x: &ndarray::Array3<f32>, s: NetSource, cfg: &TrainConfig, exec: Execution) -> Result<Forward> {
    let (field, cache) = forward_field(&m.net, x, s, cfg.slice_chunk, exec)?;
    Ok(Forward { field, cache })
}

fn accumulate(acc: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

fn apply(members: &mut [Member; 3], grads: [Option<Vec<f32>>; 3], counts: [usize; 3]) {
    for ((m, g), n) in members.iter_mut().zip(grads).zip(counts) {
        if let Some(mut g) = g {
            let inv = 1.0 / n as f32;
            g.iter_mut().for_each(|v| *v *= inv);
            m.opt.step(m.net.params_mut(), &g);
        }
    }
}

fn mean_losses(sums: &[Vec<NetLoss>; 3]) -> BTreeMap<String, NetLoss> {
    let mut out = BTreeMap::new();
    for (s, v) in NetSource::ALL.iter().zip(sums) {
        if v.is_empty() {
            continue;
        }
        let n = v.len() as f64;
        out.insert(
            s.name().to_string(),
            NetLoss {
                ce: v.iter().map(|l| l.ce).sum::<f64>() / n,
                dice: v.iter().map(|l| l.dice).sum::<f64>() / n,
                total: v.iter().map(|l| l.total).sum::<f64>() / n,
            },
        );
    }
    out
}

/// One optimization step over a batch of (volume, annotation) pairs.
///
/// Each pair contributes one random patch. Every network is trained on the
/// mixed target built from the other networks' detached predictions; the
/// gradients are averaged over the batch and applied with one Adam step.
pub fn train_step<R: Rng>(
    state: &mut TrainState,
    batch: &[(&IntensityVolume, &CrossAnnotation)],
    cfg: &TrainConfig,
    rng: &mut R,
    exec: Execution,
) -> Result<StepRecord> {
    let w = cfg.ramp.weight(state.iteration);
    let active = match cfg.mode {
        TeachingMode::CrossTeaching => vec![0, 1, 2],
        TeachingMode::Sparse3d => vec![0],
    };
    let mut grads: [Option<Vec<f32>>; 3] = [None, None, None];
    let mut counts = [0usize; 3];
    let mut losses: [Vec<NetLoss>; 3] = Default::default();
    let mut rec = StepRecord {
        iteration: state.iteration,
        w,
        p_acc: None,
        losses: BTreeMap::new(),
        selected_3d: 0,
        fused_2d: 0,
        vetoed: 0,
        skipped: Vec::new(),
    };
    let mut acc_sum = (0.0, 0usize);
    for (v, y) in batch {
        let (patch, yp, _) = random_crop(v, y, cfg.patch, rng)?;
        let x = &patch.data;
        let fwd: Vec<Forward> = active
            .iter()
            .map(|&i| forward(&state.members[i], x, NetSource::ALL[i], cfg, exec))
            .collect::<Result<_>>()?;
        let targets = match cfg.mode {
            TeachingMode::Sparse3d => vec![SupervisionTarget::sparse(&yp)],
            TeachingMode::CrossTeaching => {
                let (p3, pa, pb) = (&fwd[0].field, &fwd[1].field, &fwd[2].field);
                // A patch without annotation gives no evidence of reliability.
                let acc = match estimate_pseudo_accuracy(p3, &yp) {
                    Ok(a) => {
                        acc_sum = (acc_sum.0 + a.value, acc_sum.1 + 1);
                        a
                    }
                    Err(Error::Degenerate(_)) => PseudoAccuracy { value: 0.0, correct: 0, annotated: 0 },
                    Err(e) => return Err(e),
                };
                let pseudo3d = select_hard_soft(p3, &acc, &cfg.thresholds);
                rec.selected_3d += pseudo3d.count();
                let t2 = SupervisionTarget::assemble(&yp, &pseudo3d, None, w)?;
                let fused = fuse_consistent(pa, pb)?;
                let veto = label_correction(&fused.labels, p3, pa, pb)?;
                rec.fused_2d += fused.count();
                rec.vetoed += veto.iter().filter(|&&b| b).count();
                let t3 = SupervisionTarget::assemble(&yp, &fused, Some(&veto), w)?;
                vec![t3, t2.clone(), t2]
            }
        };
        for ((&i, f), t) in active.iter().zip(&fwd).zip(&targets) {
            let name = NetSource::ALL[i].name();
            match combined_loss(&f.field, t) {
                Ok(l) => {
                    let g = backward_field(&state.members[i].net, &f.cache, &l.grad, exec)?;
                    accumulate(&mut grads[i], g);
                    counts[i] += 1;
                    losses[i].push(NetLoss { ce: l.ce, dice: l.dice, total: l.total });
                }
                Err(Error::Degenerate(msg)) => {
                    log::warn!("iteration {}: skipping {name}: {msg}", state.iteration);
                    rec.skipped.push(name.to_string());
                }
                Err(e) => return Err(e),
            }
        }
    }
    apply(&mut state.members, grads, counts);
    if acc_sum.1 > 0 {
        rec.p_acc = Some(acc_sum.0 / acc_sum.1 as f64);
    }
    rec.losses = mean_losses(&losses);
    state.iteration += 1;
    state.history.push(rec.clone());
    Ok(rec)
}

/// Independent sparse-only training of all three networks: each is fit to
/// the annotated voxels of its patch and nothing else. Serves as the
/// reference that [`train_step`] must reduce to when the pseudo-label weight
/// is zero. Consumes the random generator exactly like [`train_step`].
pub fn sparse_reference_step<R: Rng>(
    state: &mut TrainState,
    batch: &[(&IntensityVolume, &CrossAnnotation)],
    cfg: &TrainConfig,
    rng: &mut R,
    exec: Execution,
) -> Result<StepRecord> {
    let mut grads: [Option<Vec<f32>>; 3] = [None, None, None];
    let mut counts = [0usize; 3];
    let mut losses: [Vec<NetLoss>; 3] = Default::default();
    for (v, y) in batch {
        let (patch, yp, _) = random_crop(v, y, cfg.patch, rng)?;
        let target = SupervisionTarget::sparse(&yp);
        for (i, &s) in NetSource::ALL.iter().enumerate() {
            let f = forward(&state.members[i], &patch.data, s, cfg, exec)?;
            let l = combined_loss(&f.field, &target)?;
            accumulate(&mut grads[i], backward_field(&state.members[i].net, &f.cache, &l.grad, exec)?);
            counts[i] += 1;
            losses[i].push(NetLoss { ce: l.ce, dice: l.dice, total: l.total });
        }
    }
    apply(&mut state.members, grads, counts);
    let rec = StepRecord {
        iteration: state.iteration,
        w: 0.0,
        p_acc: None,
        losses: mean_losses(&losses),
        selected_3d: 0,
        fused_2d: 0,
        vetoed: 0,
        skipped: Vec::new(),
    };
    state.iteration += 1;
    state.history.push(rec.clone());
    Ok(rec)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Validation { iteration: usize, dice: f64 },
    Checkpoint { iteration: usize, paths: Vec<PathBuf> },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Mean foreground Dice of the 3D network on the validation split.
    pub validation: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_stem(source: NetSource, iteration: usize) -> String {
    format!("{}_{iteration:06}", source.name())
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn save_all(state: &TrainState, mode: TeachingMode, dir: &Path, run_hash: &str) -> Result<Vec<PathBuf>> {
    let n = if mode == TeachingMode::Sparse3d { 1 } else { 3 };
    let mut paths = Vec::new();
    for (m, &s) in state.members.iter().zip(&NetSource::ALL).take(n) {
        let stem = checkpoint_stem(s, state.iteration);
        save_checkpoint(&m.net, dir, &stem, state.iteration, Some(run_hash.to_string()))?;
        paths.push(dir.join(format!("{stem}.json")));
    }
    Ok(paths)
}

/// Trains on the manifest's training split, writing the echoed config, a
/// JSONL log and checkpoints into `run_dir`.
pub fn train(manifest: &DatasetManifest, run: &RunConfig, run_dir: &Path, exec: Execution) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = run.train_config();
    std::fs::create_dir_all(run_dir).map_err(|e| io(run_dir, e))?;
    let echo = run.to_toml();
    let echo_path = run_dir.join(CONFIG_ECHO);
    std::fs::write(&echo_path, &echo).map_err(|e| io(&echo_path, e))?;
    let run_hash = sha256_hex(echo.as_bytes());

    let k = manifest.num_classes;
    check_patch(&cfg, manifest.target_shape, k)?;
    let train_set = prepare_split(manifest, SplitName::Train, exec)?;
    if train_set.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let annotations: Vec<CrossAnnotation> = train_set.iter().map(|v| annotate(&run.data, v)).collect::<Result<_>>()?;
    let val_set: Vec<PreparedVolume> = if run.eval.validate {
        prepare_split(manifest, SplitName::Val, exec)?
    } else {
        Vec::new()
    };

    let mut state = TrainState::new(&cfg, k)?;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    let log_path = run_dir.join(LOG_FILE);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| io(&log_path, e))?);
    let mut emit = |r: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(r).expect("log record serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| io(&log_path, e))
    };

    let mut checkpoints = save_all(&state, cfg.mode, &ckpt_dir, &run_hash)?;
    emit(&LogRecord::Checkpoint { iteration: 0, paths: checkpoints.clone() })?;
    let mut validation = Vec::new();

    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crop_rng.set_stream(2);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(3);
    let mut order: Vec<usize> = Vec::new();
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_volumes);
        for _ in 0..cfg.batch_volumes {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled");
            batch.push((&train_set[i].image, &annotations[i]));
        }
        let rec = train_step(&mut state, &batch, &cfg, &mut crop_rng, exec)?;
        if let Some(l) = rec.losses.get(NetSource::Net3d.name()) {
            log::debug!("iteration {it}: 3D loss {:.4} w {:.4}", l.total, rec.w);
        }
        emit(&LogRecord::Step(rec))?;
        let done = it + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
            let paths = save_all(&state, cfg.mode, &ckpt_dir, &run_hash)?;
            emit(&LogRecord::Checkpoint { iteration: done, paths: paths.clone() })?;
            checkpoints.extend(paths);
            if !val_set.is_empty() {
                let dice = validation_dice(state.net3d(), &val_set, exec)?;
                log::info!("iteration {done}: validation dice {dice:.4}");
                emit(&LogRecord::Validation { iteration: done, dice })?;
                validation.push((done, dice));
            }
        }
    }
    Ok(TrainOutcome { state, validation, checkpoints })
}
