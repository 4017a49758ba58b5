use std::path::Path;

use crossseg_core::annotation::{centered_offset, CrossAnnotation};
use crossseg_core::manifest::{DatasetManifest, MANIFEST_FILE};
use crossseg_core::phantom::{generate_dataset, generate_phantom, PhantomSpec};
use crossseg_core::preprocess::z_score_normalize;
use crossseg_core::teaching::RampSchedule;
use crossseg_core::{Execution, IntensityVolume, NetSource, Plane};
use crossseg_nn::checkpoint::{load_checkpoint, split_checkpoint_path};
use crossseg_train::trainer::{LogRecord, CHECKPOINT_DIR, CONFIG_ECHO, LOG_FILE};
use crossseg_train::{
    infer_3d, sparse_reference_step, train, train_step, RunConfig, TeachingMode, TrainConfig, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXEC: Execution = Execution::Parallel;

fn small_spec() -> PhantomSpec {
    PhantomSpec { shape: [32, 32, 16], ..PhantomSpec::default() }
}

fn small_config() -> TrainConfig {
    let mut run = RunConfig::default();
    run.model.base_channels = 4;
    run.model.depth = 2;
    run.optim.patch = [16, 16, 16];
    run.optim.iterations = 40;
    run.train_config()
}

fn volumes(n: usize, distances: [usize; 2]) -> Vec<(IntensityVolume, CrossAnnotation)> {
    let spec = small_spec();
    (0..n)
        .map(|i| {
            let (img, lab) = generate_phantom(&spec, i).unwrap();
            let d = lab.dims();
            let off = [
                centered_offset(Plane::Transverse.extent(d), distances[0]),
                centered_offset(Plane::Coronal.extent(d), distances[1]),
            ];
            (z_score_normalize(&img).unwrap(), CrossAnnotation::from_dense(&lab, distances, off).unwrap())
        })
        .collect()
}

fn run_steps(
    cfg: &TrainConfig,
    data: &[(IntensityVolume, CrossAnnotation)],
    steps: usize,
    reference: bool,
) -> TrainState {
    let mut state = TrainState::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for s in 0..steps {
        let (v, y) = &data[s % data.len()];
        let batch = [(v, y)];
        if reference {
            sparse_reference_step(&mut state, &batch, cfg, &mut rng, EXEC).unwrap();
        } else {
            train_step(&mut state, &batch, cfg, &mut rng, EXEC).unwrap();
        }
    }
    state
}

fn max_loss_gap(a: &TrainState, b: &TrainState) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.history.iter().zip(&b.history) {
        assert_eq!(ra.losses.len(), rb.losses.len());
        for (name, la) in &ra.losses {
            let lb = &rb.losses[name];
            worst = worst.max((la.total - lb.total).abs()).max((la.ce - lb.ce).abs());
        }
    }
    worst
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = volumes(2, [4, 4]);
    let cfg = TrainConfig { ramp: RampSchedule::new(0.1, 4), ..small_config() };
    let a = run_steps(&cfg, &data, 10, false);
    let b = run_steps(&cfg, &data, 10, false);
    assert_eq!(a.history, b.history);
    for (ma, mb) in a.members.iter().zip(&b.members) {
        assert_eq!(ma.net.params(), mb.net.params());
    }
    assert!(a.history.iter().any(|r| r.w > 0.0));
}

#[test]
fn zero_pseudo_weight_reduces_to_sparse_training() {
    let data = volumes(2, [4, 4]);
    let cfg = TrainConfig { ramp: RampSchedule::new(0.0, 4), ..small_config() };
    let ct = run_steps(&cfg, &data, 10, false);
    let reference = run_steps(&cfg, &data, 10, true);
    assert!(max_loss_gap(&ct, &reference) <= 1e-7);
    for (a, b) in ct.members.iter().zip(&reference.members) {
        assert_eq!(a.net.params(), b.net.params());
    }
}

#[test]
fn fully_annotated_volume_ignores_pseudo_labels() {
    let data = volumes(1, [1, 1]);
    assert_eq!(data[0].1.count_annotated(), data[0].1.labels().data().len());
    let cfg = TrainConfig { ramp: RampSchedule::new(0.1, 2), ..small_config() };
    let ct = run_steps(&cfg, &data, 5, false);
    let reference = run_steps(&cfg, &data, 5, true);
    assert!(ct.history.iter().skip(1).all(|r| r.w > 0.0));
    assert!(max_loss_gap(&ct, &reference) <= 1e-7);
}

#[test]
fn teachers_are_detached() {
    // The coronal net learns from the 3D prediction alone, so wrecking the
    // transverse net must leave its update untouched.
    let data = volumes(1, [4, 4]);
    let cfg = TrainConfig { ramp: RampSchedule::new(0.1, 1), ..small_config() };
    let mut a = TrainState::new(&cfg, 4).unwrap();
    let mut b = a.clone();
    let mut ra = ChaCha8Rng::seed_from_u64(3);
    let mut rb = ChaCha8Rng::seed_from_u64(3);
    let batch = [(&data[0].0, &data[0].1)];
    for _ in 0..3 {
        train_step(&mut a, &batch, &cfg, &mut ra, EXEC).unwrap();
        train_step(&mut b, &batch, &cfg, &mut rb, EXEC).unwrap();
    }
    assert_eq!(a.net3d().params(), b.net3d().params());
    let before_3d = a.net3d().params().to_vec();
    b.members[1].net.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let mut a2 = a.clone();
    train_step(&mut a2, &batch, &cfg, &mut ra.clone(), EXEC).unwrap();
    train_step(&mut b, &batch, &cfg, &mut ra, EXEC).unwrap();
    assert_ne!(a2.net3d().params(), &before_3d[..]);
    assert_ne!(b.members[1].net.params(), a2.members[1].net.params());
    assert_eq!(b.members[2].net.params(), a2.members[2].net.params());
}

fn write_dataset(dir: &Path, n: usize) -> DatasetManifest {
    generate_dataset(&small_spec(), n, [3.0, 1.0, 1.0], dir, EXEC).unwrap();
    DatasetManifest::load(dir.join(MANIFEST_FILE)).unwrap()
}

fn small_run(iterations: usize) -> RunConfig {
    let mut run = RunConfig::default();
    run.data.phantom = small_spec();
    run.data.distances = [4, 4];
    run.model.base_channels = 4;
    run.model.depth = 2;
    run.optim.patch = [16, 16, 16];
    run.optim.iterations = iterations;
    run.optim.checkpoint_every = 2;
    run
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let m = write_dataset(&tmp.path().join("data"), 5);
    let run_dir = tmp.path().join("run");
    let out = train(&m, &small_run(0), &run_dir, EXEC).unwrap();
    assert_eq!(out.state.iteration, 0);
    assert!(out.validation.is_empty());
    assert_eq!(out.checkpoints.len(), 3);
    let mut files: Vec<String> = std::fs::read_dir(run_dir.join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files.len(), 6);
    assert!(files.iter().all(|f| f.contains("_000000.")));
    let echoed = std::fs::read_to_string(run_dir.join(CONFIG_ECHO)).unwrap();
    assert_eq!(RunConfig::from_toml(&echoed).unwrap(), small_run(0));
    let log = std::fs::read_to_string(run_dir.join(LOG_FILE)).unwrap();
    let records: Vec<LogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 1);
    assert!(matches!(records[0], LogRecord::Checkpoint { iteration: 0, .. }));
}

#[test]
fn checkpoint_reproduces_final_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let m = write_dataset(&tmp.path().join("data"), 5);
    let mut run = small_run(3);
    run.teaching.mode = TeachingMode::Sparse3d;
    let out = train(&m, &run, &tmp.path().join("run"), EXEC).unwrap();
    // Sparse mode saves the 3D net only: iterations 0, 2 and 3.
    assert_eq!(out.checkpoints.len(), 3);
    assert_eq!(out.validation.iter().map(|v| v.0).collect::<Vec<_>>(), [2, 3]);
    let last = out.checkpoints.last().unwrap();
    assert!(last.to_string_lossy().contains(NetSource::Net3d.name()));
    let (dir, stem) = split_checkpoint_path(last).unwrap();
    let (net, meta) = load_checkpoint(&dir, &stem).unwrap();
    assert_eq!(meta.iteration, 3);
    assert_eq!(net.params(), out.state.net3d().params());
    let (img, _) = generate_phantom(&small_spec(), 0).unwrap();
    let v = z_score_normalize(&img).unwrap();
    assert_eq!(
        infer_3d(&net, &v, EXEC).unwrap().data(),
        infer_3d(out.state.net3d(), &v, EXEC).unwrap().data()
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

#[test]
fn loss_decreases_over_short_training() {
    let data = volumes(3, [4, 4]);
    let mut run = RunConfig::default();
    run.model.base_channels = 4;
    run.model.depth = 2;
    run.optim.patch = [16, 16, 16];
    run.optim.iterations = 200;
    let cfg = run.train_config();
    let state = run_steps(&cfg, &data, 200, false);
    for s in NetSource::ALL {
        let l: Vec<f64> = state.history.iter().map(|r| r.losses[s.name()].total).collect();
        let (first, last) = (median(l[..50].to_vec()), median(l[150..].to_vec()));
        assert!(last < first, "{}: {first} -> {last}", s.name());
    }
}

#[test]
fn committed_configs_parse_and_round_trip() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["mmwhs.cfg", "phantom.cfg"] {
        let c = RunConfig::load(&root.join(name)).unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c, "{name}");
    }
    let m = RunConfig::load(&root.join("mmwhs.cfg")).unwrap().train_config();
    assert_eq!(m.adam.learning_rate, 0.001);
    assert_eq!(m.adam.weight_decay, 0.0001);
    assert_eq!(m.iterations, 6000);
    assert_eq!(m.batch_volumes, 1);
    assert_eq!(m.patch, [176, 176, 96]);
    assert_eq!((m.thresholds.t_q, m.thresholds.t_h, m.thresholds.t_s), (0.98, 0.9, 0.7));
}

#[test]
fn crops_without_annotation_skip_instead_of_failing() {
    let (img, lab) = generate_phantom(&small_spec(), 0).unwrap();
    let y = CrossAnnotation::from_slice_lists(&lab, [vec![], vec![8]], [1, 1]).unwrap();
    let v = z_score_normalize(&img).unwrap();
    let cfg = TrainConfig { ramp: RampSchedule::new(0.1, 2), ..small_config() };
    let mut state = TrainState::new(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..8 {
        train_step(&mut state, &[(&v, &y)], &cfg, &mut rng, EXEC).unwrap();
    }
    let blind = state.history.iter().filter(|r| r.p_acc.is_none()).count();
    assert!(blind > 0 && blind < 8, "{blind} of 8 crops missed the annotation");
}
