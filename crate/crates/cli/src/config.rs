//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use giuda_core::augment::MaskSpec;
use giuda_core::datagen::DomainProfile;
use giuda_core::model::ModelConfig;
use giuda_core::tensor::TrainConfig;
use giuda_core::training::{LossWeights, SpstConfig, TrainSettings};

/// Every tunable of a run. Relative paths resolve against the working
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub neighbors: usize,
    pub queries_per_cloud: usize,
    pub cube_half_width: f64,
    pub input_points: usize,
    pub num_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub classifier_widths: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    /// Epochs of source-only training for the reference classifier.
    pub baseline_epochs: usize,
    pub mask_radius_min: f64,
    pub mask_radius_max: f64,
    pub spst_gamma: f64,
    pub spst_rounds: usize,
    pub spst_epochs_per_round: usize,
    pub spst_fractions: Vec<f64>,
    pub clouds_per_class: usize,
    pub source_points: usize,
    pub source_noise: f64,
    pub source_occlusion: Option<f64>,
    pub target_points: usize,
    pub target_noise: f64,
    pub target_occlusion: Option<f64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Starting weights for pretrain and adapt; the checkpoint spst refines.
    pub init_checkpoint: Option<PathBuf>,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let weights = LossWeights::default();
        let mask = MaskSpec::default();
        let spst = SpstConfig::default();
        let (src, tgt) = (DomainProfile::source(), DomainProfile::target());
        RunConfig {
            seed: 0,
            neighbors: giuda_core::field::DEFAULT_NEIGHBORS,
            queries_per_cloud: giuda_core::field::DEFAULT_QUERIES_PER_STEP,
            cube_half_width: giuda_core::field::DEFAULT_CUBE_HALF_WIDTH,
            input_points: model.input_points,
            num_classes: 3,
            encoder_widths: model.encoder_widths,
            decoder_widths: model.decoder_widths,
            classifier_widths: model.classifier_widths,
            alpha: weights.alpha,
            beta: weights.beta,
            mu: weights.mu,
            learning_rate: train.learning_rate,
            min_learning_rate: train.min_learning_rate,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            pretrain_epochs: train.total_epochs,
            adapt_epochs: train.total_epochs,
            baseline_epochs: train.total_epochs,
            mask_radius_min: mask.radius_min,
            mask_radius_max: mask.radius_max,
            spst_gamma: spst.gamma,
            spst_rounds: spst.rounds,
            spst_epochs_per_round: spst.epochs_per_round,
            spst_fractions: spst.selection_fractions,
            clouds_per_class: 100,
            source_points: src.points_per_cloud,
            source_noise: src.noise_sigma,
            source_occlusion: src.occlusion,
            target_points: tgt.points_per_cloud,
            target_noise: tgt.noise_sigma,
            target_occlusion: tgt.occlusion,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            init_checkpoint: None,
            threads: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

impl RunConfig {
    /// Defaults overridden by the file's entries, then validated.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                bail!("line {}: duplicate key {k}", i + 1);
            }
            cfg.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "seed" => self.seed = parse_num(k, v)?,
            "neighbors" => self.neighbors = parse_num(k, v)?,
            "queries_per_cloud" => self.queries_per_cloud = parse_num(k, v)?,
            "cube_half_width" => self.cube_half_width = parse_num(k, v)?,
            "input_points" => self.input_points = parse_num(k, v)?,
            "num_classes" => self.num_classes = parse_num(k, v)?,
            "encoder_widths" => self.encoder_widths = parse_list(k, v)?,
            "decoder_widths" => self.decoder_widths = parse_list(k, v)?,
            "classifier_widths" => self.classifier_widths = parse_list(k, v)?,
            "alpha" => self.alpha = parse_num(k, v)?,
            "beta" => self.beta = parse_num(k, v)?,
            "mu" => self.mu = parse_num(k, v)?,
            "learning_rate" => self.learning_rate = parse_num(k, v)?,
            "min_learning_rate" => self.min_learning_rate = parse_num(k, v)?,
            "weight_decay" => self.weight_decay = parse_num(k, v)?,
            "batch_size" => self.batch_size = parse_num(k, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(k, v)?,
            "adapt_epochs" => self.adapt_epochs = parse_num(k, v)?,
            "baseline_epochs" => self.baseline_epochs = parse_num(k, v)?,
            "mask_radius_min" => self.mask_radius_min = parse_num(k, v)?,
            "mask_radius_max" => self.mask_radius_max = parse_num(k, v)?,
            "spst_gamma" => self.spst_gamma = parse_num(k, v)?,
            "spst_rounds" => self.spst_rounds = parse_num(k, v)?,
            "spst_epochs_per_round" => self.spst_epochs_per_round = parse_num(k, v)?,
            "spst_fractions" => self.spst_fractions = parse_list(k, v)?,
            "clouds_per_class" => self.clouds_per_class = parse_num(k, v)?,
            "source_points" => self.source_points = parse_num(k, v)?,
            "source_noise" => self.source_noise = parse_num(k, v)?,
            "source_occlusion" => self.source_occlusion = parse_opt(k, v)?,
            "target_points" => self.target_points = parse_num(k, v)?,
            "target_noise" => self.target_noise = parse_num(k, v)?,
            "target_occlusion" => self.target_occlusion = parse_opt(k, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "init_checkpoint" => self.init_checkpoint = (v != "none").then(|| PathBuf::from(v)),
            "threads" => self.threads = parse_num(k, v)?,
            _ => bail!("unknown key {k}"),
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to the same config.
    pub fn format(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("neighbors", self.neighbors.to_string());
        put("queries_per_cloud", self.queries_per_cloud.to_string());
        put("cube_half_width", self.cube_half_width.to_string());
        put("input_points", self.input_points.to_string());
        put("num_classes", self.num_classes.to_string());
        put("encoder_widths", join(&self.encoder_widths));
        put("decoder_widths", join(&self.decoder_widths));
        put("classifier_widths", join(&self.classifier_widths));
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("mu", self.mu.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("min_learning_rate", self.min_learning_rate.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("batch_size", self.batch_size.to_string());
        put("pretrain_epochs", self.pretrain_epochs.to_string());
        put("adapt_epochs", self.adapt_epochs.to_string());
        put("baseline_epochs", self.baseline_epochs.to_string());
        put("mask_radius_min", self.mask_radius_min.to_string());
        put("mask_radius_max", self.mask_radius_max.to_string());
        put("spst_gamma", self.spst_gamma.to_string());
        put("spst_rounds", self.spst_rounds.to_string());
        put(
            "spst_epochs_per_round",
            self.spst_epochs_per_round.to_string(),
        );
        put("spst_fractions", join(&self.spst_fractions));
        put("clouds_per_class", self.clouds_per_class.to_string());
        put("source_points", self.source_points.to_string());
        put("source_noise", self.source_noise.to_string());
        put("source_occlusion", opt(&self.source_occlusion));
        put("target_points", self.target_points.to_string());
        put("target_noise", self.target_noise.to_string());
        put("target_occlusion", opt(&self.target_occlusion));
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put(
            "init_checkpoint",
            opt(&self.init_checkpoint.as_ref().map(|p| p.display())),
        );
        put("threads", self.threads.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.settings(self.pretrain_epochs).validate()?;
        self.settings(self.adapt_epochs).validate()?;
        self.settings(self.baseline_epochs).validate()?;
        self.spst_config().validate()?;
        self.source_profile().validate()?;
        self.target_profile().validate()?;
        if self.clouds_per_class == 0 {
            bail!("clouds_per_class must be positive");
        }
        if !(2..=giuda_core::datagen::CLASS_NAMES.len()).contains(&self.num_classes) {
            bail!(
                "num_classes must be between 2 and {}",
                giuda_core::datagen::CLASS_NAMES.len()
            );
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_points: self.input_points,
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            classifier_widths: self.classifier_widths.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            mu: self.mu,
        }
    }

    /// Training settings for a phase of `epochs` epochs.
    pub fn settings(&self, epochs: usize) -> TrainSettings {
        TrainSettings {
            train: TrainConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                total_epochs: epochs,
                batch_size: self.batch_size,
                min_learning_rate: self.min_learning_rate,
            },
            weights: self.weights(),
            queries_per_cloud: self.queries_per_cloud,
            cube_half_width: self.cube_half_width,
            neighbors: self.neighbors,
            mask: MaskSpec {
                radius_min: self.mask_radius_min,
                radius_max: self.mask_radius_max,
            },
            mask_branch: true,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn spst_config(&self) -> SpstConfig {
        SpstConfig {
            gamma: self.spst_gamma,
            rounds: self.spst_rounds,
            epochs_per_round: self.spst_epochs_per_round,
            selection_fractions: self.spst_fractions.clone(),
        }
    }

    pub fn source_profile(&self) -> DomainProfile {
        DomainProfile {
            points_per_cloud: self.source_points,
            noise_sigma: self.source_noise,
            occlusion: self.source_occlusion,
        }
    }

    pub fn target_profile(&self) -> DomainProfile {
        DomainProfile {
            points_per_cloud: self.target_points,
            noise_sigma: self.target_noise,
            occlusion: self.target_occlusion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("# nothing here\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(
            (c.neighbors, c.batch_size, c.alpha, c.beta),
            (3, 32, 100.0, 1.0)
        );
    }

    #[test]
    fn format_round_trips() {
        let mut c = RunConfig::default();
        c.learning_rate = 0.1 + 0.2;
        c.target_occlusion = None;
        c.init_checkpoint = Some("runs/x/model.ckpt".into());
        c.spst_fractions = vec![];
        assert_eq!(RunConfig::parse(&c.format()).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse(
            "seed = 7 # trailing\nencoder_widths = 8, 16\nsource_occlusion = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.encoder_widths, vec![8, 16]);
        assert_eq!(c.source_occlusion, Some(0.2));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("sede = 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("alpha = -1").is_err());
        assert!(RunConfig::parse("mask_radius_min = 0.5\nmask_radius_max = 0.2").is_err());
        assert!(RunConfig::parse("target_occlusion = 1.0").is_err());
        assert!(RunConfig::parse("num_classes = 5").is_err());
        assert!(RunConfig::parse("batch_size = 0").is_err());
    }
}
