//! Optimization loops and evaluation.
//!
//! One optimizer step pairs a source batch with a target batch. Every cloud in
//! the step gets its own graph; the per-cloud parameter gradients are summed in
//! a fixed order, so results do not depend on the worker count.
//!
//! Randomness is drawn from [`stream_rng`] keyed by phase, role, epoch and
//! position, which keeps each draw independent of every other. In particular
//! the masking draws never disturb the query and padding draws.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::augment::{fit_to_input, fit_to_input_with, random_mask, MaskSpec};
use crate::error::{ensure, Error, Result};
use crate::field::{local_affinity, sample_queries, AffinityProfile, AudField};
use crate::model::{ModelStack, Tape};
use crate::pointcloud::{Point3, PointCloud};
use crate::seeding::stream_rng;
use crate::tensor::{adam_step, cosine_lr, Gradients, Tensor, TrainConfig, Var};

use super::losses::{LossComponents, LossWeights};
use super::spst::{gamma_for_fraction, spst_select, PseudoLabelSet, SpstConfig};

const PHASE_PRETRAIN: u64 = 1;
const PHASE_ADAPT: u64 = 2;
const PHASE_SOURCE_ONLY: u64 = 3;
const PHASE_SPST: u64 = 16;
const PHASE_EVAL: u64 = 1 << 20;

const ROLE_SHUFFLE_SOURCE: u64 = 0;
const ROLE_SHUFFLE_TARGET: u64 = 1;
const ROLE_DRAW_SOURCE: u64 = 2;
const ROLE_DRAW_TARGET: u64 = 3;
const ROLE_MASK_SOURCE: u64 = 4;
const ROLE_MASK_TARGET: u64 = 5;
const ROLE_EVAL_PAD: u64 = 6;
const ROLE_EVAL_QUERIES: u64 = 7;

fn stream(phase: u64, role: u64) -> u64 {
    (phase << 8) | role
}

fn visit_key(epoch: usize, position: usize) -> u64 {
    ((epoch as u64) << 32) | position as u64
}

/// Everything besides the model that shapes a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub weights: LossWeights,
    /// Queries `K` drawn per cloud per step.
    pub queries_per_cloud: usize,
    pub cube_half_width: f64,
    /// Neighbour count `M` of the local affinity.
    pub neighbors: usize,
    pub mask: MaskSpec,
    /// Whether masked variants are encoded at all.
    pub mask_branch: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            queries_per_cloud: crate::field::DEFAULT_QUERIES_PER_STEP,
            cube_half_width: crate::field::DEFAULT_CUBE_HALF_WIDTH,
            neighbors: crate::field::DEFAULT_NEIGHBORS,
            mask: MaskSpec::default(),
            mask_branch: true,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.weights.validate()?;
        self.mask.validate()?;
        ensure!(
            self.queries_per_cloud >= 1,
            "queries_per_cloud must be positive"
        );
        ensure!(
            self.cube_half_width > 0.0,
            "cube_half_width must be positive"
        );
        ensure!(self.neighbors >= 1, "neighbors must be positive");
        ensure!(self.threads >= 1, "threads must be positive");
        Ok(())
    }
}

/// A cloud with its affinity profile and AUD field, computed once.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub profile: AffinityProfile,
    pub field: AudField,
}

/// The clouds of one domain, ready for training.
#[derive(Clone, Debug)]
pub struct DomainData {
    clouds: Vec<PreparedCloud>,
}

impl DomainData {
    pub fn new(clouds: Vec<PointCloud>, neighbors: usize) -> Result<Self> {
        ensure!(!clouds.is_empty(), "a domain needs at least one cloud");
        let clouds = clouds
            .into_par_iter()
            .map(|c| {
                let profile = local_affinity(&c, neighbors)?;
                let field = AudField::from_profile(&c, &profile)?;
                Ok(PreparedCloud {
                    cloud: c,
                    profile,
                    field,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DomainData { clouds })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn clouds(&self) -> &[PreparedCloud] {
        &self.clouds
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.clouds.iter().map(|c| c.cloud.label()).collect()
    }
}

/// Randomized inputs of one cloud for one step.
#[derive(Clone, Debug)]
pub struct CloudSample {
    /// The cloud fitted to the encoder input size.
    pub input: PointCloud,
    /// Masked variant, also fitted to the input size.
    pub masked: Option<PointCloud>,
    pub queries: Vec<Point3>,
    /// AUD of each query against the unpadded cloud.
    pub targets: Vec<f64>,
    /// Class supervising `L_cls^s`.
    pub supervised: Option<usize>,
    /// Pseudo label supervising `L_cls^t`.
    pub pseudo: Option<usize>,
    /// Ground truth, used only for reported accuracy.
    pub truth: Option<usize>,
}

/// Draws the padded input, queries and (optionally) masked variant of a cloud.
pub fn draw_sample(
    prep: &PreparedCloud,
    input_points: usize,
    settings: &TrainSettings,
    draw_rng: &mut impl rand::Rng,
    mask_rng: Option<&mut impl rand::Rng>,
) -> Result<CloudSample> {
    let input = fit_to_input_with(&prep.cloud, &prep.profile, input_points, draw_rng)?;
    let queries = sample_queries(
        settings.queries_per_cloud,
        settings.cube_half_width,
        draw_rng,
    )?;
    let targets = prep.field.evaluate(queries.points());
    let masked = match mask_rng {
        Some(rng) if prep.cloud.len() >= 2 => {
            let m = random_mask(&prep.cloud, &settings.mask, rng)?;
            Some(fit_to_input(&m, input_points, settings.neighbors, rng)?)
        }
        _ => None,
    };
    Ok(CloudSample {
        input,
        masked,
        queries: queries.points().to_vec(),
        targets,
        supervised: None,
        pseudo: None,
        truth: prep.cloud.label(),
    })
}

/// Coefficients of each term in the step objective
/// `implicit·L_I + alpha·L_M + beta·L_cls^s + mu·L_cls^t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub implicit: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub gamma: f64,
}

impl Objective {
    pub fn from_weights(w: &LossWeights, gamma: f64) -> Self {
        Objective {
            implicit: 1.0,
            alpha: w.alpha,
            beta: w.beta,
            mu: w.mu,
            gamma,
        }
    }
}

/// Source and target samples of one optimizer step.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub source: Vec<CloudSample>,
    pub target: Vec<CloudSample>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Value of the step objective, including the constant `−μγ·selected/N_t`.
    pub loss: f64,
    pub components: LossComponents,
    /// Summed parameter gradients, indexed like the model's parameters.
    pub grads: Vec<Tensor>,
    pub source_correct: usize,
    pub source_scored: usize,
    pub target_correct: usize,
    pub target_scored: usize,
}

#[derive(Clone, Copy)]
struct CloudWeights {
    implicit: f64,
    mask: f64,
    source: f64,
    target: f64,
}

struct CloudOut {
    implicit: Option<f64>,
    mask: Option<f64>,
    source_ce: Option<f64>,
    target_ce: Option<f64>,
    correct: Option<bool>,
    grads: Gradients,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

struct CloudForward<'m> {
    tape: Tape<'m>,
    total: Var,
    implicit: Option<f64>,
    mask: Option<f64>,
    source_ce: Option<f64>,
    target_ce: Option<f64>,
    correct: Option<bool>,
}

fn cloud_forward<'m>(
    model: &'m ModelStack,
    s: &CloudSample,
    w: CloudWeights,
) -> Result<CloudForward<'m>> {
    let mut t = model.tape();
    let c = t.encode(&[&s.input])?;
    let mut terms = Vec::with_capacity(4);
    let mut implicit = None;
    if w.implicit != 0.0 {
        let q = t.graph.constant(Tensor::matrix(
            s.queries.len(),
            3,
            s.queries.iter().flatten().copied().collect(),
        )?);
        let d = t.decode(q, c, s.queries.len())?;
        let li = t.graph.mean_abs_diff(d, s.targets.clone())?;
        implicit = Some(t.graph.scalar(li));
        terms.push((li, w.implicit));
    }
    let mut mask = None;
    if let Some(m) = &s.masked {
        let cm = t.encode(&[m])?;
        let lm = t.graph.row_distance(c, cm)?;
        mask = Some(t.graph.scalar(lm));
        terms.push((lm, w.mask));
    }
    let logits = t.classify(c)?;
    let correct = s.truth.map(|y| argmax(t.graph.value(logits).row(0)) == y);
    let mut source_ce = None;
    if let Some(y) = s.supervised {
        let ce = t.graph.class_cross_entropy(logits, vec![Some(y)], 1.0)?;
        source_ce = Some(t.graph.scalar(ce));
        terms.push((ce, w.source));
    }
    let mut target_ce = None;
    if let Some(y) = s.pseudo {
        let ce = t.graph.class_cross_entropy(logits, vec![Some(y)], 1.0)?;
        target_ce = Some(t.graph.scalar(ce));
        terms.push((ce, w.target));
    }
    let total = t.graph.weighted_sum(&terms)?;
    Ok(CloudForward {
        tape: t,
        total,
        implicit,
        mask,
        source_ce,
        target_ce,
        correct,
    })
}

fn cloud_terms(model: &ModelStack, s: &CloudSample, w: CloudWeights) -> Result<CloudOut> {
    let f = cloud_forward(model, s, w)?;
    let grads = f.tape.graph.backward(f.total)?;
    Ok(CloudOut {
        implicit: f.implicit,
        mask: f.mask,
        source_ce: f.source_ce,
        target_ce: f.target_ce,
        correct: f.correct,
        grads,
    })
}

fn build_pool(threads: usize) -> Result<Option<ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {threads} workers: {e}")))
}

/// Order-preserving map, parallel when a pool is given.
fn ordered_map<T, U, F>(pool: Option<&ThreadPool>, items: Vec<T>, f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(T) -> Result<U> + Sync + Send,
{
    match pool {
        Some(p) => p.install(|| items.into_par_iter().map(f).collect()),
        None => items.into_iter().map(f).collect(),
    }
}

/// Evaluates the step objective and its parameter gradients.
///
/// `L_I` and `L_M` are averaged over all clouds of the step, `L_cls^s` over the
/// source batch, and `L_cls^t` is normalized by the target batch size
/// (selected and unselected alike).
fn cloud_weights(batch: &StepBatch, obj: &Objective) -> Result<CloudWeights> {
    let (ns, nt) = (batch.source.len(), batch.target.len());
    let all = ns + nt;
    ensure!(all > 0, "empty step batch");
    Ok(CloudWeights {
        implicit: obj.implicit / all as f64,
        mask: obj.alpha / all as f64,
        source: if ns > 0 { obj.beta / ns as f64 } else { 0.0 },
        target: if nt > 0 { obj.mu / nt as f64 } else { 0.0 },
    })
}

/// Combined [`Graph::branch_signature`] of the step objective's per-cloud
/// tapes, for telling smooth pieces of the loss apart.
///
/// [`Graph::branch_signature`]: crate::tensor::Graph::branch_signature
pub fn step_branch_signature(
    model: &ModelStack,
    batch: &StepBatch,
    obj: &Objective,
) -> Result<u64> {
    let w = cloud_weights(batch, obj)?;
    let mut h = DefaultHasher::new();
    for s in batch.source.iter().chain(&batch.target) {
        cloud_forward(model, s, w)?
            .tape
            .graph
            .branch_signature()
            .hash(&mut h);
    }
    Ok(h.finish())
}

pub fn step_objective(
    model: &ModelStack,
    batch: &StepBatch,
    obj: &Objective,
    threads: usize,
) -> Result<StepOutput> {
    let pool = build_pool(threads)?;
    step_objective_in(model, batch, obj, pool.as_ref(), threads)
}

fn step_objective_in(
    model: &ModelStack,
    batch: &StepBatch,
    obj: &Objective,
    pool: Option<&ThreadPool>,
    chunk: usize,
) -> Result<StepOutput> {
    let (ns, nt) = (batch.source.len(), batch.target.len());
    let all = ns + nt;
    let w = cloud_weights(batch, obj)?;
    let mut grads: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    let mut selected = 0usize;
    let mut correct = [0usize; 2];
    let mut scored = [0usize; 2];
    let samples: Vec<(usize, &CloudSample)> = batch
        .source
        .iter()
        .map(|s| (0, s))
        .chain(batch.target.iter().map(|s| (1, s)))
        .collect();
    for group in samples.chunks(chunk.max(1)) {
        let outs = ordered_map(pool, group.to_vec(), |(_, s)| cloud_terms(model, s, w))?;
        for ((domain, _), o) in group.iter().zip(outs) {
            for (id, g) in o.grads.params() {
                grads[id.0].add_assign(g);
            }
            for (k, v) in [o.implicit, o.mask, o.source_ce, o.target_ce]
                .into_iter()
                .enumerate()
            {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
            selected += o.target_ce.is_some() as usize;
            if let Some(ok) = o.correct {
                correct[*domain] += ok as usize;
                scored[*domain] += 1;
            }
        }
    }
    let mean = |k: usize| {
        if counts[k] > 0 {
            sums[k] / counts[k] as f64
        } else {
            0.0
        }
    };
    let cls_target = if nt > 0 {
        (sums[3] - obj.gamma * selected as f64) / nt as f64
    } else {
        0.0
    };
    let components = LossComponents {
        implicit: sums[0] / all as f64,
        mask: sums[1] / all as f64,
        cls_source: mean(2),
        cls_target,
    };
    let loss = obj.implicit * components.implicit
        + obj.alpha * components.mask
        + obj.beta * components.cls_source
        + obj.mu * components.cls_target;
    Ok(StepOutput {
        loss,
        components,
        grads,
        source_correct: correct[0],
        source_scored: scored[0],
        target_correct: correct[1],
        target_scored: scored[1],
    })
}

/// Per-epoch means of the loss terms and running accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub implicit: f64,
    pub mask: f64,
    pub cls_source: f64,
    pub cls_target: f64,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
}

struct Phase<'a> {
    source: &'a DomainData,
    target: Option<&'a DomainData>,
    pseudo: Option<&'a PseudoLabelSet>,
    objective: Objective,
    id: u64,
    epoch_offset: usize,
}

fn shuffled(n: usize, seed: u64, stream_id: u64, epoch: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut stream_rng(seed, stream_id, epoch as u64));
    v
}

fn run_phase(
    model: &mut ModelStack,
    settings: &TrainSettings,
    phase: Phase<'_>,
) -> Result<Vec<EpochMetrics>> {
    settings.validate()?;
    if let (Some(p), Some(t)) = (phase.pseudo, phase.target) {
        ensure!(
            p.len() == t.len(),
            "{} pseudo labels for {} target clouds",
            p.len(),
            t.len()
        );
    }
    let pool = build_pool(settings.threads)?;
    let obj = phase.objective;
    let n_in = model.config().input_points;
    let seed = settings.seed;
    let ns = phase.source.len();
    let nt = phase.target.map_or(0, DomainData::len);
    let span = ns.max(nt);
    let b = settings.train.batch_size;
    let steps = span.div_ceil(b);
    let mut out = Vec::with_capacity(settings.train.total_epochs);
    for epoch in 0..settings.train.total_epochs {
        let lr = cosine_lr(epoch, &settings.train);
        let perm_s = shuffled(ns, seed, stream(phase.id, ROLE_SHUFFLE_SOURCE), epoch);
        let perm_t = shuffled(nt, seed, stream(phase.id, ROLE_SHUFFLE_TARGET), epoch);
        let mut sums = [0.0f64; 4];
        let mut acc = [0usize; 4];
        for step in 0..steps {
            let positions: Vec<usize> = (step * b..((step + 1) * b).min(span)).collect();
            let mut jobs: Vec<(bool, usize, usize)> = positions
                .iter()
                .map(|&p| (false, p, perm_s[p % ns]))
                .collect();
            if nt > 0 {
                jobs.extend(positions.iter().map(|&p| (true, p, perm_t[p % nt])));
            }
            let draws = ordered_map(pool.as_ref(), jobs, |(is_target, p, idx)| {
                let (data, draw_role, mask_role) = if is_target {
                    (phase.target.unwrap(), ROLE_DRAW_TARGET, ROLE_MASK_TARGET)
                } else {
                    (phase.source, ROLE_DRAW_SOURCE, ROLE_MASK_SOURCE)
                };
                let key = visit_key(epoch, p);
                let mut draw = stream_rng(seed, stream(phase.id, draw_role), key);
                let mut mask = stream_rng(seed, stream(phase.id, mask_role), key);
                let mask_rng = settings.mask_branch.then_some(&mut mask);
                let mut s = draw_sample(&data.clouds[idx], n_in, settings, &mut draw, mask_rng)?;
                if is_target {
                    if obj.mu != 0.0 {
                        s.pseudo = phase.pseudo.and_then(|ps| ps.get(idx));
                    }
                } else if obj.beta != 0.0 {
                    s.supervised = s.truth;
                    ensure!(s.supervised.is_some(), "source cloud {idx} has no label");
                }
                Ok((is_target, s))
            })?;
            let mut batch = StepBatch::default();
            for (is_target, s) in draws {
                if is_target {
                    batch.target.push(s);
                } else {
                    batch.source.push(s);
                }
            }
            let r = step_objective_in(model, &batch, &obj, pool.as_ref(), settings.threads)?;
            for (p, g) in model.params_mut().iter_mut().zip(&r.grads) {
                p.grad.add_assign(g);
            }
            adam_step(model.params_mut(), &settings.train, lr)?;
            let c = r.components;
            for (k, v) in [c.implicit, c.mask, c.cls_source, c.cls_target]
                .into_iter()
                .enumerate()
            {
                sums[k] += v;
            }
            acc[0] += r.source_correct;
            acc[1] += r.source_scored;
            acc[2] += r.target_correct;
            acc[3] += r.target_scored;
        }
        let ratio = |a: usize, n: usize| (n > 0).then(|| a as f64 / n as f64);
        out.push(EpochMetrics {
            epoch: phase.epoch_offset + epoch + 1,
            lr,
            implicit: sums[0] / steps as f64,
            mask: sums[1] / steps as f64,
            cls_source: sums[2] / steps as f64,
            cls_target: sums[3] / steps as f64,
            source_acc: ratio(acc[0], acc[1]),
            target_acc: ratio(acc[2], acc[3]),
        });
    }
    Ok(out)
}

/// Self-supervised training on both domains with `β = μ = 0`.
pub fn pretrain_implicits(
    model: &mut ModelStack,
    source: &DomainData,
    target: &DomainData,
    settings: &TrainSettings,
) -> Result<Vec<EpochMetrics>> {
    let phase = Phase {
        source,
        target: Some(target),
        pseudo: None,
        objective: Objective::from_weights(&settings.weights.pretraining(), 0.0),
        id: PHASE_PRETRAIN,
        epoch_offset: 0,
    };
    run_phase(model, settings, phase)
}

/// Joint training: `L_I` and `L_M` on both domains, `β·L_cls^s` on the source,
/// and `μ·L_cls^t` when pseudo labels are given.
pub fn adapt(
    model: &mut ModelStack,
    source: &DomainData,
    target: &DomainData,
    pseudo: Option<(&PseudoLabelSet, f64)>,
    settings: &TrainSettings,
) -> Result<Vec<EpochMetrics>> {
    let phase = Phase {
        source,
        target: Some(target),
        pseudo: pseudo.map(|p| p.0),
        objective: Objective::from_weights(&settings.weights, pseudo.map_or(0.0, |p| p.1)),
        id: PHASE_ADAPT,
        epoch_offset: 0,
    };
    run_phase(model, settings, phase)
}

/// Classification-only training on the labelled source domain; the reference
/// point for adaptation gains.
pub fn train_source_only(
    model: &mut ModelStack,
    source: &DomainData,
    settings: &TrainSettings,
) -> Result<Vec<EpochMetrics>> {
    ensure!(
        settings.weights.beta > 0.0,
        "source-only training needs beta > 0"
    );
    let settings = TrainSettings {
        mask_branch: false,
        ..settings.clone()
    };
    let phase = Phase {
        source,
        target: None,
        pseudo: None,
        objective: Objective {
            implicit: 0.0,
            alpha: 0.0,
            beta: settings.weights.beta,
            mu: 0.0,
            gamma: 0.0,
        },
        id: PHASE_SOURCE_ONLY,
        epoch_offset: 0,
    };
    run_phase(model, &settings, phase)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    pub gamma: f64,
    pub selected_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpstReport {
    pub rounds: Vec<RoundStats>,
    pub epochs: Vec<EpochMetrics>,
}

/// Alternates pseudo-label selection over the whole target set with
/// `epochs_per_round` epochs of training on the full objective. Each round
/// restarts the cosine schedule. A round with no selection trains without
/// `L_cls^t`.
pub fn spst_rounds(
    model: &mut ModelStack,
    source: &DomainData,
    target: &DomainData,
    spst: &SpstConfig,
    settings: &TrainSettings,
) -> Result<SpstReport> {
    spst.validate()?;
    let mut report = SpstReport {
        rounds: Vec::with_capacity(spst.rounds),
        epochs: Vec::new(),
    };
    let round_settings = TrainSettings {
        train: TrainConfig {
            total_epochs: spst.epochs_per_round,
            ..settings.train.clone()
        },
        ..settings.clone()
    };
    for round in 0..spst.rounds {
        let probs = predict_probabilities(
            model,
            target,
            settings.seed ^ (round as u64 + 1),
            settings.threads,
        )?;
        let gamma = match spst.fraction_for_round(round) {
            Some(f) => gamma_for_fraction(&probs, f)?,
            None => spst.gamma,
        };
        let labels = spst_select(&probs, gamma)?;
        report.rounds.push(RoundStats {
            round: round + 1,
            gamma,
            selected_fraction: labels.selected_fraction(),
        });
        let phase = Phase {
            source,
            target: Some(target),
            pseudo: (labels.selected_count() > 0).then_some(&labels),
            objective: Objective::from_weights(&settings.weights, gamma),
            id: PHASE_SPST + round as u64,
            epoch_offset: round * spst.epochs_per_round,
        };
        report
            .epochs
            .extend(run_phase(model, &round_settings, phase)?);
    }
    Ok(report)
}

fn eval_inputs(
    model: &ModelStack,
    data: &DomainData,
    seed: u64,
    pool: Option<&ThreadPool>,
) -> Result<Vec<PointCloud>> {
    let n_in = model.config().input_points;
    let idx: Vec<usize> = (0..data.len()).collect();
    ordered_map(pool, idx, |i| {
        let mut rng = stream_rng(seed, stream(PHASE_EVAL, ROLE_EVAL_PAD), i as u64);
        let p = &data.clouds[i];
        fit_to_input_with(&p.cloud, &p.profile, n_in, &mut rng)
    })
}

const EVAL_CHUNK: usize = 8;

/// Class probabilities for every cloud; padding draws depend only on `seed`
/// and the cloud index.
pub fn predict_probabilities(
    model: &ModelStack,
    data: &DomainData,
    seed: u64,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let pool = build_pool(threads)?;
    let inputs = eval_inputs(model, data, seed, pool.as_ref())?;
    let chunks: Vec<&[PointCloud]> = inputs.chunks(EVAL_CHUNK).collect();
    let parts = ordered_map(pool.as_ref(), chunks, |c| {
        model.predict_proba(&c.iter().collect::<Vec<_>>())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax accuracy and confusion matrix on a labelled set.
pub fn evaluate(
    model: &ModelStack,
    data: &DomainData,
    seed: u64,
    threads: usize,
) -> Result<Evaluation> {
    let probs = predict_probabilities(model, data, seed, threads)?;
    let labels: Vec<usize> = data
        .labels()
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::contract(format!("cloud {i} has no label"))))
        .collect::<Result<_>>()?;
    let j = model.num_classes();
    ensure!(
        labels.iter().all(|&l| l < j),
        "dataset labels exceed the model's {j} classes"
    );
    Ok(confusion_from(&probs, &labels, j))
}

/// Accuracy and confusion of argmax predictions (lowest class on ties).
pub fn confusion_from(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0; classes]; classes];
    for (p, &y) in probs.iter().zip(labels) {
        confusion[y][argmax(p)] += 1;
    }
    let hits: usize = (0..classes).map(|k| confusion[k][k]).sum();
    Evaluation {
        accuracy: hits as f64 / labels.len().max(1) as f64,
        confusion,
    }
}

/// Mean `L_I` over a set of clouds with queries fixed by `seed`.
pub fn implicit_error(
    model: &ModelStack,
    data: &DomainData,
    settings: &TrainSettings,
    seed: u64,
) -> Result<f64> {
    let pool = build_pool(settings.threads)?;
    let inputs = eval_inputs(model, data, seed, pool.as_ref())?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let errs = ordered_map(pool.as_ref(), idx, |i| {
        let mut rng = stream_rng(seed, stream(PHASE_EVAL, ROLE_EVAL_QUERIES), i as u64);
        let q = sample_queries(
            settings.queries_per_cloud,
            settings.cube_half_width,
            &mut rng,
        )?;
        let target = data.clouds[i].field.evaluate(q.points());
        let latent = model.encode(&inputs[i])?;
        let pred = model.decode(q.points(), &latent)?;
        super::losses::loss_implicit(&pred, &target)
    })?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}
