use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crossseg_core::annotation::CrossAnnotation;
use crossseg_core::manifest::{DatasetManifest, SplitName, MANIFEST_FILE};
use crossseg_core::phantom::generate_dataset;
use crossseg_core::preprocess::{resample_trilinear, z_score_normalize};
use crossseg_core::{nifti, Execution, Plane};
use crossseg_nn::checkpoint::{load_checkpoint, split_checkpoint_path};
use crossseg_train::data::resolve_offsets;
use crossseg_train::{budget_search, evaluate, infer_3d, train, RunConfig};

#[derive(Parser)]
#[command(name = "crossseg", version, about = "3D segmentation from cross annotation by 3D-2D cross-teaching")]
struct Cli {
    /// Run every data-parallel loop sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn pair(s: &str) -> Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
            b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
        ]),
        _ => Err(format!("expected two comma-separated integers, got {s:?}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic phantom dataset with a manifest.
    PhantomGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Cuts cross annotations from dense labels.
    Annotate {
        #[command(flatten)]
        common: Common,
        /// Annotate every labeled volume of this dataset.
        #[arg(long, conflicts_with = "labels")]
        data_dir: Option<PathBuf>,
        /// A single dense label file.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Class count of `--labels`.
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        #[arg(long, value_parser = pair)]
        distances: Option<[usize; 2]>,
        #[arg(long, value_parser = pair)]
        offsets: Option<[usize; 2]>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Trains the networks and writes checkpoints and a log into the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_parser = pair)]
        distances: Option<[usize; 2]>,
        #[arg(long, value_parser = pair)]
        offsets: Option<[usize; 2]>,
    },
    /// Evaluates a 3D checkpoint on a split and writes a CSV report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
    },
    /// Halves slice distances while the validation gain holds up.
    BudgetSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Segments one volume with a 3D checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resample to this dataset's target shape first.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn file_stem(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn load_config(c: &Common) -> Result<RunConfig> {
    match &c.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest::load(dir.join(MANIFEST_FILE))?)
}

fn apply_overrides(cfg: &mut RunConfig, distances: Option<[usize; 2]>, offsets: Option<[usize; 2]>) -> Result<()> {
    if let Some(d) = distances {
        cfg.data.distances = d;
    }
    if offsets.is_some() {
        cfg.data.offsets = offsets;
    }
    cfg.validate()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.cmd {
        Command::PhantomGen { common, data_dir } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.phantom.seed = s;
            }
            cfg.validate()?;
            let m = generate_dataset(&cfg.data.phantom, cfg.data.num_volumes, cfg.data.split, &data_dir, exec)?;
            println!(
                "wrote {} volumes to {} (train {}, val {}, test {})",
                m.num_volumes(),
                data_dir.display(),
                m.split.train.len(),
                m.split.val.len(),
                m.split.test.len()
            );
        }
        Command::Annotate { common, data_dir, labels, num_classes, distances, offsets, out_dir } => {
            let mut cfg = load_config(&common)?;
            apply_overrides(&mut cfg, distances, offsets)?;
            std::fs::create_dir_all(&out_dir).with_context(|| out_dir.display().to_string())?;
            let mut jobs = Vec::new();
            match (data_dir, labels) {
                (Some(dir), None) => {
                    let m = load_manifest(&dir)?;
                    for e in m.volumes.iter().filter(|e| e.label.is_some()) {
                        let spacing = m.load_image(&e.id)?.spacing;
                        jobs.push((e.id.clone(), m.load_label(&e.id)?, spacing));
                    }
                }
                (None, Some(path)) => {
                    let raw = nifti::read(&path)?;
                    let dense = nifti::load_labels(&path, num_classes)?;
                    let id = file_stem(&path);
                    jobs.push((id, dense, raw.spacing));
                }
                _ => bail!("annotate needs --data-dir or --labels"),
            }
            for (id, dense, spacing) in &jobs {
                let offs = resolve_offsets(&cfg.data, dense.dims());
                let y = CrossAnnotation::from_dense(dense, cfg.data.distances, offs)?;
                y.save(&out_dir, id, *spacing)?;
                println!(
                    "{id}: {} transverse + {} coronal slices, {:.1}% voxels annotated",
                    y.slices(Plane::Transverse).len(),
                    y.slices(Plane::Coronal).len(),
                    100.0 * y.count_annotated() as f64 / dense.data().len() as f64
                );
            }
        }
        Command::Train { common, data_dir, run_dir, distances, offsets } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.optim.seed = s;
            }
            apply_overrides(&mut cfg, distances, offsets)?;
            let m = load_manifest(&data_dir)?;
            let out = train(&m, &cfg, &run_dir, exec)?;
            match out.validation.last() {
                Some((it, d)) => println!("trained {it} iterations; validation dice {:.2}", 100.0 * d),
                None => println!("trained {} iterations", out.state.iteration),
            }
            if let Some(p) = out.checkpoints.first() {
                println!("checkpoints in {}", p.parent().unwrap_or(Path::new(".")).display());
            }
        }
        Command::Eval { common, checkpoint, data_dir, split, report } => {
            let cfg = load_config(&common)?;
            let (dir, stem) = split_checkpoint_path(&checkpoint)?;
            let (net, _) = load_checkpoint(&dir, &stem)?;
            let m = load_manifest(&data_dir)?;
            let r = evaluate(&net, &m, split, cfg.eval.distance_units, exec)?;
            r.save_csv(&report)?;
            print!("{}", r.table());
        }
        Command::BudgetSearch { common, data_dir, run_dir } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.optim.seed = s;
            }
            let m = load_manifest(&data_dir)?;
            let r = budget_search(&m, &cfg, &run_dir, exec)?;
            for s in &r.history {
                let gain = s.gain.map_or("-".to_string(), |g| format!("{g:+.2}"));
                println!("distances {:?}: dice {:.2} gain {gain}", s.distances, s.dice);
            }
            println!("chosen distances {:?}", r.chosen);
        }
        Command::Infer { checkpoint, volume, out, data_dir } => {
            let (dir, stem) = split_checkpoint_path(&checkpoint)?;
            let (net, _) = load_checkpoint(&dir, &stem)?;
            let mut v = nifti::load_volume(&volume)?;
            if let Some(d) = data_dir {
                let shape = load_manifest(&d)?.target_shape;
                let from = v.dims();
                let spacing = v.spacing;
                v = resample_trilinear(&v, shape)?;
                v.spacing = std::array::from_fn(|a| spacing[a] * from[a] as f64 / shape[a] as f64);
            }
            let v = z_score_normalize(&v)?;
            let pred = infer_3d(&net, &v, exec)?;
            nifti::save_labels(&out, &pred, v.spacing)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", msg.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
