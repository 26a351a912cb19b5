//! The subcommands as library functions.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use giuda_core::augment::fit_to_input;
use giuda_core::datagen::{gen_dataset, DatasetManifest, CLASS_NAMES, MANIFEST_FILE};
use giuda_core::field::{
    chamfer, grid_queries, resample_from_implicit, write_field_dump, AudField,
};
use giuda_core::model::ModelStack;
use giuda_core::pointcloud::{load_xyz, save_xyz, PointCloud};
use giuda_core::seeding::stream_rng;
use giuda_core::training::{
    adapt, evaluate, pretrain_implicits, spst_rounds, train_source_only, write_metrics_csv,
    write_selection_csv, DomainData, EpochMetrics, Evaluation, RoundStats,
};

use crate::config::RunConfig;

pub const CONFIG_COPY: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTION_FILE: &str = "selection.csv";

pub const DEFAULT_RESAMPLE_POINTS: usize = 200_000;
pub const DEFAULT_RESAMPLE_EPSILON: f64 = 0.03;

const STREAM_INIT: u64 = 1 << 40;
const STREAM_CLI_PAD: u64 = (1 << 40) + 1;
const STREAM_RESAMPLE: u64 = (1 << 40) + 2;
const EVAL_SEED_SALT: u64 = 0x5eed;

const DECODE_CHUNK: usize = 4096;

/// Artifacts of a training command.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: Vec<EpochMetrics>,
    pub rounds: Vec<RoundStats>,
}

pub fn source_manifest(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("source").join(MANIFEST_FILE)
}

pub fn target_manifest(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("target").join(MANIFEST_FILE)
}

pub fn run_dir(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.out_dir.join(command)
}

/// `GIUDA_THREADS`, when set, replaces the configured worker count.
pub fn apply_thread_override(cfg: &mut RunConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("GIUDA_THREADS must be a positive integer, got {v:?}"))?;
        ensure!(
            n >= 1,
            "GIUDA_THREADS must be a positive integer, got {v:?}"
        );
        cfg.threads = n;
    }
    Ok(())
}

pub fn cmd_datagen(cfg: &RunConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    let (s, t) = gen_dataset(
        cfg.num_classes,
        cfg.clouds_per_class,
        &cfg.source_profile(),
        &cfg.target_profile(),
        cfg.seed,
        &cfg.data_dir,
    )?;
    Ok((s, t))
}

fn load_domain(cfg: &RunConfig, manifest: &Path) -> Result<DomainData> {
    let m = DatasetManifest::read(manifest).with_context(|| {
        format!(
            "loading dataset {} (run datagen first?)",
            manifest.display()
        )
    })?;
    ensure!(
        m.class_count <= cfg.num_classes,
        "{} has labels up to {} but num_classes is {}",
        manifest.display(),
        m.class_count - 1,
        cfg.num_classes
    );
    Ok(DomainData::new(m.load_clouds()?, cfg.neighbors)?)
}

pub fn load_checkpoint(path: &Path, input_points: usize) -> Result<ModelStack> {
    ensure!(
        path.is_file(),
        "checkpoint {} does not exist",
        path.display()
    );
    ModelStack::load(path, input_points)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn checkpoint_for_config(cfg: &RunConfig, path: &Path) -> Result<ModelStack> {
    let model = load_checkpoint(path, cfg.input_points)?;
    ensure!(
        *model.config() == cfg.model_config(),
        "checkpoint {} has architecture {:?}, the config asks for {:?}",
        path.display(),
        model.config(),
        cfg.model_config()
    );
    Ok(model)
}

/// The configured starting checkpoint, or fresh weights drawn from the seed.
pub fn initial_model(cfg: &RunConfig) -> Result<ModelStack> {
    match &cfg.init_checkpoint {
        Some(p) => checkpoint_for_config(cfg, p),
        None => Ok(ModelStack::new(
            cfg.model_config(),
            &mut stream_rng(cfg.seed, STREAM_INIT, 0),
        )?),
    }
}

fn open_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = run_dir(cfg, command);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let copy = dir.join(CONFIG_COPY);
    std::fs::write(&copy, cfg.format()).with_context(|| format!("writing {}", copy.display()))?;
    Ok(dir)
}

fn finish_run(
    dir: PathBuf,
    model: &ModelStack,
    metrics: Vec<EpochMetrics>,
    rounds: Vec<RoundStats>,
) -> Result<RunOutcome> {
    let checkpoint = dir.join(CHECKPOINT_FILE);
    model.save(&checkpoint)?;
    write_metrics_csv(&dir.join(METRICS_FILE), &metrics)?;
    Ok(RunOutcome {
        dir,
        checkpoint,
        metrics,
        rounds,
    })
}

/// Selection rounds, the last epoch's losses and the run directory, one per line.
pub fn format_run(run: &RunOutcome) -> String {
    let mut s = String::new();
    for r in &run.rounds {
        s.push_str(&format!(
            "round {}: gamma {:.6} selected {:.4}\n",
            r.round, r.gamma, r.selected_fraction
        ));
    }
    if let Some(last) = run.metrics.last() {
        s.push_str(&format!(
            "epoch {}: L_I {:.5} L_M {:.5} L_cls_s {:.5} L_cls_t {:.5}\n",
            last.epoch, last.implicit, last.mask, last.cls_source, last.cls_target
        ));
    }
    s.push_str(&format!("wrote {}\n", run.dir.display()));
    s
}

/// Self-supervised training on both domains.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<RunOutcome> {
    let source = load_domain(cfg, &source_manifest(cfg))?;
    let target = load_domain(cfg, &target_manifest(cfg))?;
    let mut model = initial_model(cfg)?;
    let dir = open_run_dir(cfg, "pretrain")?;
    let metrics = pretrain_implicits(
        &mut model,
        &source,
        &target,
        &cfg.settings(cfg.pretrain_epochs),
    )?;
    finish_run(dir, &model, metrics, Vec::new())
}

/// Joint adaptation, starting from `init_checkpoint` when one is configured.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<RunOutcome> {
    let source = load_domain(cfg, &source_manifest(cfg))?;
    let target = load_domain(cfg, &target_manifest(cfg))?;
    let mut model = initial_model(cfg)?;
    let dir = open_run_dir(cfg, "adapt")?;
    let metrics = adapt(
        &mut model,
        &source,
        &target,
        None,
        &cfg.settings(cfg.adapt_epochs),
    )?;
    finish_run(dir, &model, metrics, Vec::new())
}

/// Source-only classification training, the reference for adaptation gains.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<RunOutcome> {
    let source = load_domain(cfg, &source_manifest(cfg))?;
    let mut model = initial_model(cfg)?;
    let dir = open_run_dir(cfg, "baseline")?;
    let metrics = train_source_only(&mut model, &source, &cfg.settings(cfg.baseline_epochs))?;
    finish_run(dir, &model, metrics, Vec::new())
}

/// Self-paced self-training rounds on top of an adapted checkpoint
/// (`init_checkpoint`, or the adapt run's checkpoint by default).
pub fn cmd_spst(cfg: &RunConfig) -> Result<RunOutcome> {
    let source = load_domain(cfg, &source_manifest(cfg))?;
    let target = load_domain(cfg, &target_manifest(cfg))?;
    let ckpt = cfg
        .init_checkpoint
        .clone()
        .unwrap_or_else(|| run_dir(cfg, "adapt").join(CHECKPOINT_FILE));
    let mut model = checkpoint_for_config(cfg, &ckpt)?;
    let dir = open_run_dir(cfg, "spst")?;
    let report = spst_rounds(
        &mut model,
        &source,
        &target,
        &cfg.spst_config(),
        &cfg.settings(cfg.spst_epochs_per_round),
    )?;
    write_selection_csv(&dir.join(SELECTION_FILE), &report.rounds)?;
    finish_run(dir, &model, report.epochs, report.rounds)
}

fn class_name(k: usize, classes: usize) -> String {
    if classes <= CLASS_NAMES.len() {
        CLASS_NAMES[k].to_string()
    } else {
        format!("class{k}")
    }
}

/// Accuracy with four decimals and the confusion matrix, rows by true class.
pub fn format_evaluation(e: &Evaluation) -> String {
    let j = e.confusion.len();
    let width = (0..j).map(|k| class_name(k, j).len()).max().unwrap_or(0);
    let mut s = format!(
        "accuracy {:.4}\nconfusion (rows: true class, columns: predicted)\n",
        e.accuracy
    );
    for (k, row) in e.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        s.push_str(&format!(
            "{:<width$} {}\n",
            class_name(k, j),
            cells.join("")
        ));
    }
    s
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path) -> Result<Evaluation> {
    let model = load_checkpoint(checkpoint, cfg.input_points)?;
    let data = load_domain(
        &RunConfig {
            num_classes: model.num_classes(),
            ..cfg.clone()
        },
        manifest,
    )?;
    let e = evaluate(&model, &data, cfg.seed ^ EVAL_SEED_SALT, cfg.threads)?;
    Ok(e)
}

fn latent_for(
    model: &ModelStack,
    cloud: &PointCloud,
    cfg: &RunConfig,
) -> Result<giuda_core::tensor::Tensor> {
    let mut rng = stream_rng(cfg.seed, STREAM_CLI_PAD, 0);
    let input = fit_to_input(cloud, model.config().input_points, cfg.neighbors, &mut rng)?;
    Ok(model.encode(&input)?)
}

fn decode_chunked(
    model: &ModelStack,
    queries: &[giuda_core::pointcloud::Point3],
    latent: &giuda_core::tensor::Tensor,
) -> giuda_core::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(queries.len());
    for c in queries.chunks(DECODE_CHUNK) {
        out.extend(model.decode(c, latent)?);
    }
    Ok(out)
}

/// Points of the cube whose predicted distance for `cloud` falls below
/// `epsilon`; `None` when no sample qualifies.
pub fn resample_cloud(
    model: &ModelStack,
    cloud: &PointCloud,
    n_samples: usize,
    epsilon: f64,
    cfg: &RunConfig,
) -> Result<Option<PointCloud>> {
    let latent = latent_for(model, cloud, cfg)?;
    let mut rng = stream_rng(cfg.seed, STREAM_RESAMPLE, 0);
    let eval = |q: &[giuda_core::pointcloud::Point3], z: &giuda_core::tensor::Tensor| {
        decode_chunked(model, q, z)
    };
    Ok(resample_from_implicit(
        eval,
        &latent,
        n_samples,
        epsilon,
        cfg.cube_half_width,
        &mut rng,
    )?)
}

/// Size of a resampled cloud and its Chamfer distance to the input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResampleOutcome {
    pub kept: usize,
    pub chamfer: f64,
}

/// Writes the resampled cloud to `out`.
pub fn cmd_resample(
    cfg: &RunConfig,
    checkpoint: &Path,
    cloud_path: &Path,
    n_samples: usize,
    epsilon: f64,
    out: &Path,
) -> Result<ResampleOutcome> {
    let model = load_checkpoint(checkpoint, cfg.input_points)?;
    let cloud = load_xyz(cloud_path)?;
    let Some(sampled) = resample_cloud(&model, &cloud, n_samples, epsilon, cfg)? else {
        bail!("none of the {n_samples} samples fell below epsilon {epsilon}");
    };
    save_xyz(&sampled, out)?;
    Ok(ResampleOutcome {
        kept: sampled.len(),
        chamfer: chamfer(&sampled, &cloud)?,
    })
}

/// Where a field dump takes its values from.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldSource {
    /// The adaptive unsigned distance of the cloud itself.
    Aud,
    Checkpoint(PathBuf),
}

impl FieldSource {
    pub fn parse(s: &str) -> Self {
        if s == "aud" {
            FieldSource::Aud
        } else {
            FieldSource::Checkpoint(PathBuf::from(s))
        }
    }
}

/// `resolution³` lines of `x y z d` over the query cube.
pub fn cmd_field_dump(
    cfg: &RunConfig,
    source: &FieldSource,
    cloud_path: &Path,
    resolution: usize,
    out: &Path,
) -> Result<()> {
    let cloud = load_xyz(cloud_path)?;
    let grid = grid_queries(resolution, cfg.cube_half_width)?;
    let values = match source {
        FieldSource::Aud => AudField::new(&cloud, cfg.neighbors)?.evaluate(grid.points()),
        FieldSource::Checkpoint(p) => {
            let model = load_checkpoint(p, cfg.input_points)?;
            let latent = latent_for(&model, &cloud, cfg)?;
            decode_chunked(&model, grid.points(), &latent)?
        }
    };
    write_field_dump(out, grid.points(), &values)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_override() {
        let mut c = RunConfig::default();
        apply_thread_override(&mut c, None).unwrap();
        assert_eq!(c.threads, 1);
        apply_thread_override(&mut c, Some("4")).unwrap();
        assert_eq!(c.threads, 4);
        assert!(apply_thread_override(&mut c, Some("0")).is_err());
        assert!(apply_thread_override(&mut c, Some("many")).is_err());
    }

    #[test]
    fn evaluation_table() {
        let e = Evaluation {
            accuracy: 2.0 / 3.0,
            confusion: vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 0]],
        };
        let s = format_evaluation(&e);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "accuracy 0.6667");
        assert_eq!(lines[2], "sphere       1    0    0");
        assert_eq!(lines[4], "cylinder     0    1    0");
    }

    #[test]
    fn field_source() {
        assert_eq!(FieldSource::parse("aud"), FieldSource::Aud);
        assert_eq!(
            FieldSource::parse("a/b.ckpt"),
            FieldSource::Checkpoint("a/b.ckpt".into())
        );
    }
}
