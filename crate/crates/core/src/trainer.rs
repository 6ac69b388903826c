//! Training loops for noiseless A-GEM, DP-CL and the naive DP-AGEM variant.
//!
//! Every step samples a Poisson mini-batch from the current task, forms a
//! (clipped, noised) task gradient, and, from the second task on, corrects it
//! against a reference gradient computed on the episodic memory:
//!
//! * `Agem`: reference batch drawn from the whole memory, no clipping or noise.
//! * `DpCl`: one block chosen uniformly at random per step.
//! * `DpAgem`: every stored block contributes its own noised gradient; the
//!   results are averaged.
//!
//! All randomness is addressed by (task, step, slot), so a run is a pure
//! function of its configuration and data.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::accountant::{BudgetReport, Mechanism, Policy, PrivacyLedger, DEFAULT_LAMBDA_MAX};
use crate::data::{TaskData, TaskStream};
use crate::dp::{add_noise_at, clip_grad, NoiseConfig, NoiseStream, StreamAddress};
use crate::error::{Error, Result};
use crate::memory::EpisodicMemory;
use crate::metrics::{AccuracyMatrix, LearningCurve};
use crate::nn::{Activation, DenseNet, Example, Init, ParamVector};

const SLOT_TRAIN_NOISE: u16 = 0;
const SLOT_BATCH: u16 = 1;
const SLOT_BLOCK_CHOICE: u16 = 2;
const SLOT_REF_SAMPLE: u16 = 0x100;
const SLOT_REF_NOISE: u16 = 0x8000;

/// Examples per parallel work unit when summing clipped gradients. Fixed so
/// the summation order, and hence the result, does not depend on thread count.
const CLIP_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Noiseless A-GEM.
    Agem,
    /// One random memory block per step.
    #[default]
    DpCl,
    /// Every memory block every step.
    DpAgem,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Agem => "agem",
            Mode::DpCl => "dp-cl",
            Mode::DpAgem => "dp-agem",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "agem" | "a-gem" => Ok(Mode::Agem),
            "dp-cl" | "dpcl" => Ok(Mode::DpCl),
            "dp-agem" | "dpagem" => Ok(Mode::DpAgem),
            other => Err(Error::config(format!(
                "unknown mode {other:?} (expected agem, dp-cl or dp-agem)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionRule {
    /// Project whenever a reference gradient exists.
    #[default]
    Always,
    /// Project only when the task gradient points against the reference.
    OnConflict,
}

impl fmt::Display for ProjectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionRule::Always => "always",
            ProjectionRule::OnConflict => "conflict",
        })
    }
}

impl FromStr for ProjectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "always" => Ok(ProjectionRule::Always),
            "conflict" | "on-conflict" => Ok(ProjectionRule::OnConflict),
            other => Err(Error::config(format!(
                "unknown projection rule {other:?} (expected always or conflict)"
            ))),
        }
    }
}

/// Where the clipping bound applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipGranularity {
    /// Clip every example's gradient, sum, noise, divide by the expected batch size.
    #[default]
    PerExample,
    /// Clip the batch-mean gradient once, then noise it.
    PerBatch,
}

impl fmt::Display for ClipGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipGranularity::PerExample => "per-example",
            ClipGranularity::PerBatch => "per-batch",
        })
    }
}

impl FromStr for ClipGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "per-example" => Ok(ClipGranularity::PerExample),
            "per-batch" => Ok(ClipGranularity::PerBatch),
            other => Err(Error::config(format!("unknown clip granularity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Expected task batch size; sets the sampling rate when none is given.
    pub train_batch_size: usize,
    pub ref_batch_size: usize,
    pub sampling_rate: Option<f64>,
    pub epochs_per_task: usize,
    /// Overrides `epochs_per_task * ceil(1 / p)`.
    pub steps_per_task: Option<usize>,
    pub noise: NoiseConfig,
    pub projection: ProjectionRule,
    pub clip_granularity: ClipGranularity,
    pub lambda_max: usize,
    pub delta: f64,
    pub policy: Policy,
    /// Mini-batches covered by the learning-curve area.
    pub lca_beta: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::DpCl,
            learning_rate: 0.1,
            hidden: vec![256, 256],
            train_batch_size: 100,
            ref_batch_size: 50,
            sampling_rate: None,
            epochs_per_task: 1,
            steps_per_task: None,
            noise: NoiseConfig {
                sigma: 1.0,
                clip_bound: 0.1,
                seed: 0,
            },
            projection: ProjectionRule::Always,
            clip_granularity: ClipGranularity::PerExample,
            lambda_max: DEFAULT_LAMBDA_MAX,
            delta: 1e-5,
            policy: Policy::Lemma2,
            lca_beta: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.train_batch_size == 0 || self.ref_batch_size == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::config("epochs per task must be >= 1"));
        }
        if self.steps_per_task == Some(0) {
            return Err(Error::config("steps per task must be >= 1"));
        }
        if let Some(p) = self.sampling_rate {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(format!("sampling rate must lie in (0, 1], got {p}")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layers must have at least one unit"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.lambda_max == 0 {
            return Err(Error::config("lambda max must be >= 1"));
        }
        self.noise.validate()
    }

    /// Poisson sampling rate for a training split of `n` examples.
    pub fn rate_for(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::input("training split is empty"));
        }
        let p = self
            .sampling_rate
            .unwrap_or_else(|| (self.train_batch_size as f64 / n as f64).min(1.0));
        if p * (n as f64) < 1.0 {
            return Err(Error::config(format!(
                "sampling rate {p} expects fewer than one example from {n}"
            )));
        }
        Ok(p)
    }

    pub fn steps_for(&self, p: f64) -> usize {
        self.steps_per_task
            .unwrap_or_else(|| self.epochs_per_task * (1.0 / p).ceil() as usize)
    }

    fn effective_sigma(&self) -> f64 {
        match self.mode {
            Mode::Agem => 0.0,
            _ => self.noise.sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionOutcome {
    /// Returned as is: no conflict under the conflict-only rule.
    Kept,
    Projected,
    /// Zero reference gradient; returned as is.
    DegenerateReference,
}

/// `g - (g . g_ref / g_ref . g_ref) g_ref`, subject to `rule`.
pub fn project_gradient(g: &ParamVector, g_ref: &ParamVector, rule: ProjectionRule) -> (ParamVector, ProjectionOutcome) {
    let rr = g_ref.dot(g_ref);
    if rr == 0.0 {
        return (g.clone(), ProjectionOutcome::DegenerateReference);
    }
    let gr = g.dot(g_ref);
    if rule == ProjectionRule::OnConflict && gr >= 0.0 {
        return (g.clone(), ProjectionOutcome::Kept);
    }
    let mut out = g.clone();
    out.axpy(-gr / rr, g_ref);
    (out, ProjectionOutcome::Projected)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub steps: u64,
    pub ref_steps: u64,
    pub projected: u64,
    pub kept: u64,
    pub degenerate_refs: u64,
    pub empty_batches: u64,
}

impl TrainStats {
    fn count(&mut self, outcome: ProjectionOutcome) {
        match outcome {
            ProjectionOutcome::Kept => self.kept += 1,
            ProjectionOutcome::Projected => self.projected += 1,
            ProjectionOutcome::DegenerateReference => self.degenerate_refs += 1,
        }
    }
}

fn clipped_sum(net: &DenseNet, batch: &[Example], beta: f64) -> Result<ParamVector> {
    let partials = batch
        .par_chunks(CLIP_CHUNK)
        .map(|chunk| {
            let mut acc = ParamVector::zeros(net.num_params());
            for i in 0..chunk.len() {
                let g = net.grad(&chunk[i..i + 1])?;
                acc.add_assign(&clip_grad(&g, beta)?);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = ParamVector::zeros(net.num_params());
    for p in &partials {
        sum.add_assign(p);
    }
    Ok(sum)
}

/// Private gradient estimate for one release.
///
/// `divisor` is the normaliser for the per-example path: the expected batch
/// size for Poisson batches, the actual size for fixed-size memory batches.
fn private_grad(
    net: &DenseNet,
    batch: &[Example],
    divisor: f64,
    cfg: &TrainConfig,
    addr: StreamAddress,
) -> Result<ParamVector> {
    if cfg.mode == Mode::Agem {
        return if batch.is_empty() {
            Ok(ParamVector::zeros(net.num_params()))
        } else {
            net.grad(batch)
        };
    }
    let beta = cfg.noise.clip_bound;
    match cfg.clip_granularity {
        ClipGranularity::PerExample => {
            let sum = clipped_sum(net, batch, beta)?;
            let mut g = add_noise_at(&sum, &cfg.noise, addr)?;
            g.scale(1.0 / divisor);
            Ok(g)
        }
        ClipGranularity::PerBatch => {
            let mean = if batch.is_empty() {
                ParamVector::zeros(net.num_params())
            } else {
                clip_grad(&net.grad(batch)?, beta)?
            };
            add_noise_at(&mean, &cfg.noise, addr)
        }
    }
}

fn poisson_batch<R: Rng + ?Sized>(data: &[Example], p: f64, rng: &mut R) -> Vec<Example> {
    if p >= 1.0 {
        return data.to_vec();
    }
    data.iter().filter(|_| rng.random::<f64>() < p).cloned().collect()
}

fn memory_union_sample<R: Rng + ?Sized>(mem: &EpisodicMemory, upto: usize, size: usize, rng: &mut R) -> Vec<Example> {
    let blocks = &mem.blocks()[..upto];
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    let pick: Vec<usize> = if size >= total {
        (0..total).collect()
    } else {
        index::sample(rng, total, size).into_vec()
    };
    pick.into_iter()
        .map(|mut i| {
            for b in blocks {
                if i < b.len() {
                    return b.examples()[i].clone();
                }
                i -= b.len();
            }
            unreachable!("index within memory size")
        })
        .collect()
}

fn ref_rate(batch: usize, pool: usize) -> f64 {
    (batch.min(pool) as f64 / pool as f64).min(1.0)
}

/// Reference gradient for `task_id`, charging the ledger for every block read.
fn reference_grad(
    net: &DenseNet,
    task_id: usize,
    step: usize,
    mem: &EpisodicMemory,
    ledger: &mut PrivacyLedger,
    cfg: &TrainConfig,
    sigma: f64,
) -> Result<ParamVector> {
    let streams = NoiseStream::new(cfg.seed);
    let m = cfg.ref_batch_size;
    let prior = task_id - 1;
    if mem.num_blocks() < prior {
        return Err(Error::state(format!(
            "task {task_id} needs {prior} memory blocks, found {}",
            mem.num_blocks()
        )));
    }
    let block_grad = |block_id: usize, ledger: &mut PrivacyLedger| -> Result<ParamVector> {
        let block = mem.block(block_id).expect("block present");
        let mut rng = streams.rng(StreamAddress::new(task_id, step, SLOT_REF_SAMPLE + block_id as u16));
        let batch = block.sample(m, &mut rng);
        ledger.track_ref_step(task_id, block_id, Mechanism::new(ref_rate(m, block.len()), sigma)?)?;
        private_grad(
            net,
            &batch,
            batch.len() as f64,
            cfg,
            StreamAddress::new(task_id, step, SLOT_REF_NOISE + block_id as u16),
        )
    };
    match cfg.mode {
        Mode::Agem => {
            let mut rng = streams.rng(StreamAddress::new(task_id, step, SLOT_REF_SAMPLE));
            let batch = memory_union_sample(mem, prior, m, &mut rng);
            let total: usize = mem.blocks()[..prior].iter().map(|b| b.len()).sum();
            let mech = Mechanism::new(ref_rate(m, total), 0.0)?;
            for b in 1..=prior {
                ledger.track_ref_step(task_id, b, mech)?;
            }
            net.grad(&batch)
        }
        Mode::DpCl => {
            let mut rng = streams.rng(StreamAddress::new(task_id, step, SLOT_BLOCK_CHOICE));
            let block_id = mem.choose_block(task_id, &mut rng)?;
            block_grad(block_id, ledger)
        }
        Mode::DpAgem => {
            let mut sum = ParamVector::zeros(net.num_params());
            for b in 1..=prior {
                sum.add_assign(&block_grad(b, ledger)?);
            }
            sum.scale(1.0 / prior as f64);
            Ok(sum)
        }
    }
}

/// Trains `net` on one task in the configured mode.
///
/// Opens `task_id` in the ledger and charges one training release per step
/// plus whatever the reference strategy reads. `after_step(b, net)` runs after
/// the `b`-th update (1-based). The memory is read but never modified.
#[allow(clippy::too_many_arguments)]
pub fn train_task_observed(
    net: &mut DenseNet,
    task_id: usize,
    train: &[Example],
    mem: &EpisodicMemory,
    ledger: &mut PrivacyLedger,
    cfg: &TrainConfig,
    stats: &mut TrainStats,
    mut after_step: impl FnMut(usize, &DenseNet) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if task_id == 0 {
        return Err(Error::input("task ids start at 1"));
    }
    let p = cfg.rate_for(train.len())?;
    let steps = cfg.steps_for(p);
    let expected_batch = (p * train.len() as f64).max(1.0);
    let sigma = cfg.effective_sigma();
    let train_mech = Mechanism::new(p, sigma)?;
    let streams = NoiseStream::new(cfg.seed);
    ledger.open_task(task_id)?;

    for step in 0..steps {
        let mut rng = streams.rng(StreamAddress::new(task_id, step, SLOT_BATCH));
        let batch = poisson_batch(train, p, &mut rng);
        if batch.is_empty() {
            stats.empty_batches += 1;
        }
        let g = private_grad(
            net,
            &batch,
            expected_batch,
            cfg,
            StreamAddress::new(task_id, step, SLOT_TRAIN_NOISE),
        )?;
        ledger.track_training_step(task_id, train_mech)?;
        stats.steps += 1;

        let update = if task_id == 1 {
            g
        } else {
            let g_ref = reference_grad(net, task_id, step, mem, ledger, cfg, sigma)?;
            stats.ref_steps += 1;
            let (projected, outcome) = project_gradient(&g, &g_ref, cfg.projection);
            stats.count(outcome);
            projected
        };
        net.apply_update(cfg.learning_rate, &update);
        if !net.params().is_finite() {
            return Err(Error::numeric(format!(
                "parameters became non-finite at task {task_id}, step {step}"
            )));
        }
        after_step(step + 1, net)?;
    }
    Ok(())
}

/// [`train_task_observed`] without a per-step callback.
pub fn train_task(
    net: &mut DenseNet,
    task_id: usize,
    train: &[Example],
    mem: &EpisodicMemory,
    ledger: &mut PrivacyLedger,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    let mut stats = TrainStats::default();
    train_task_observed(net, task_id, train, mem, ledger, cfg, &mut stats, |_, _| Ok(()))?;
    Ok(stats)
}

/// One task of the naive variant that reads every memory block each step.
pub fn train_task_dp_agem(
    net: &mut DenseNet,
    task_id: usize,
    train: &[Example],
    mem: &EpisodicMemory,
    ledger: &mut PrivacyLedger,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    let cfg = TrainConfig {
        mode: Mode::DpAgem,
        ..cfg.clone()
    };
    train_task(net, task_id, train, mem, ledger, &cfg)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub accuracy: AccuracyMatrix,
    pub budget: BudgetReport,
    pub curve: LearningCurve,
    pub ledger: PrivacyLedger,
    pub stats: TrainStats,
    pub net: DenseNet,
}

fn evaluate_all(net: &DenseNet, tasks: &[TaskData]) -> Result<Vec<f64>> {
    tasks.par_iter().map(|t| net.accuracy(t.test.examples())).collect()
}

/// Trains through the whole stream.
///
/// After each task every seen task is evaluated on its test split, then the
/// task's reference split is stored as the next memory block. The learning
/// curve for each task holds its test accuracy before the first update and
/// after each of the first `lca_beta` updates.
pub fn run_stream(stream: &TaskStream, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut dims = vec![stream.feature_dim()];
    dims.extend(&cfg.hidden);
    dims.push(stream.num_classes());
    let mut net = DenseNet::new(&dims, Activation::Relu, Init::UniformFanIn, cfg.seed)?;

    let mut mem = EpisodicMemory::new();
    let mut ledger = PrivacyLedger::new(cfg.lambda_max)?;
    let mut accuracy = AccuracyMatrix::new();
    let mut curve = LearningCurve::new();
    let mut stats = TrainStats::default();

    for (i, task) in stream.tasks().iter().enumerate() {
        let task_id = i + 1;
        let test = task.test.examples();
        let mut trace = vec![net.accuracy(test)?];
        let beta = cfg.lca_beta;
        train_task_observed(
            &mut net,
            task_id,
            task.train.examples(),
            &mem,
            &mut ledger,
            cfg,
            &mut stats,
            |b, net| {
                if b <= beta {
                    trace.push(net.accuracy(test)?);
                }
                Ok(())
            },
        )?;
        curve.push_trace(trace)?;
        accuracy.push_row(evaluate_all(&net, &stream.tasks()[..=i])?)?;
        mem.push_block(task.reference.examples().to_vec(), task_id)?;
        ledger.register_block(task_id)?;
    }

    let budget = ledger.report(cfg.delta, cfg.policy)?;
    Ok(RunResult {
        accuracy,
        budget,
        curve,
        ledger,
        stats,
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_permuted_stream, make_synthetic_split};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn projection_examples() {
        for rule in [ProjectionRule::Always, ProjectionRule::OnConflict] {
            assert_eq!(project_gradient(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0]), rule).0, pv(&[1.0, 0.0]));
        }
        let (g, o) = project_gradient(&pv(&[1.0, 1.0]), &pv(&[1.0, 1.0]), ProjectionRule::Always);
        assert_eq!((g, o), (pv(&[0.0, 0.0]), ProjectionOutcome::Projected));
        let (g, o) = project_gradient(&pv(&[1.0, 1.0]), &pv(&[1.0, 1.0]), ProjectionRule::OnConflict);
        assert_eq!((g, o), (pv(&[1.0, 1.0]), ProjectionOutcome::Kept));
        let (g, _) = project_gradient(&pv(&[2.0, 0.0]), &pv(&[1.0, 1.0]), ProjectionRule::Always);
        assert_eq!(g, pv(&[1.0, -1.0]));
        assert_eq!(g.dot(&pv(&[1.0, 1.0])), 0.0);
    }

    #[test]
    fn zero_reference_is_degenerate() {
        let (g, o) = project_gradient(&pv(&[3.0, -1.0]), &pv(&[0.0, 0.0]), ProjectionRule::Always);
        assert_eq!(g, pv(&[3.0, -1.0]));
        assert_eq!(o, ProjectionOutcome::DegenerateReference);
    }

    proptest! {
        #[test]
        fn projection_is_orthogonal(
            pair in (1usize..40).prop_flat_map(|d| (
                proptest::collection::vec(-10.0f64..10.0, d),
                proptest::collection::vec(-10.0f64..10.0, d),
            ))
        ) {
            let (g, r) = (ParamVector::from_vec(pair.0), ParamVector::from_vec(pair.1));
            prop_assume!(r.norm() > 1e-6);
            let (p, _) = project_gradient(&g, &r, ProjectionRule::Always);
            prop_assert!(p.dot(&r).abs() <= 1e-9 * g.norm().max(f64::MIN_POSITIVE) * r.norm() + 1e-300);
            let (c, _) = project_gradient(&g, &r, ProjectionRule::OnConflict);
            prop_assert!(c.dot(&r) >= -1e-9 * g.norm() * r.norm());
        }
    }

    fn small_stream(tasks: usize, seed: u64) -> TaskStream {
        let (pool, test) = make_synthetic_split(16, 4, 30, 10, 6.0, seed).unwrap();
        make_permuted_stream(&pool, &test, tasks, seed, 0.2).unwrap()
    }

    fn small_cfg(mode: Mode, steps: usize) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: vec![8],
            train_batch_size: 10,
            ref_batch_size: 5,
            steps_per_task: Some(steps),
            lca_beta: 3,
            seed: 7,
            noise: NoiseConfig::new(1.0, 0.5, 11).unwrap(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_task_never_reads_memory() {
        let s = small_stream(1, 1);
        let r = run_stream(&s, &small_cfg(Mode::DpCl, 5)).unwrap();
        assert_eq!(r.stats.ref_steps, 0);
        assert_eq!(r.ledger.ref_steps_charged(1).unwrap(), 0);
        assert_eq!(r.budget.budgets[0].eps_ref, 0.0);
        assert_eq!(r.accuracy.num_tasks(), 1);
        assert_eq!(r.budget.total, r.budget.budgets[0].eps_train);
    }

    #[test]
    fn ledger_counts_match_loop_structure() {
        let s = small_stream(3, 2);
        let r = run_stream(&s, &small_cfg(Mode::DpCl, 20)).unwrap();
        let train: u64 = (1..=3).map(|t| r.ledger.train_steps(t).unwrap()).sum();
        let refs: u64 = (1..=3).map(|t| r.ledger.ref_steps_charged(t).unwrap()).sum();
        assert_eq!((train, refs), (60, 40));
        assert_eq!(r.ledger.block_access(2, 1).unwrap().steps(), 20);
        assert_eq!(r.ledger.block_steps(1).unwrap() + r.ledger.block_steps(2).unwrap(), 40);

        let r = run_stream(&s, &small_cfg(Mode::DpAgem, 20)).unwrap();
        assert_eq!(r.ledger.block_steps(1).unwrap(), 40);
        assert_eq!(r.ledger.block_steps(2).unwrap(), 20);
        assert_eq!(r.stats.steps, 60);
    }

    #[test]
    fn two_tasks_dp_agem_equals_dp_cl() {
        let s = small_stream(2, 3);
        let a = run_stream(&s, &small_cfg(Mode::DpCl, 15)).unwrap();
        let b = run_stream(&s, &small_cfg(Mode::DpAgem, 15)).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = small_stream(2, 4);
        let a = run_stream(&s, &small_cfg(Mode::DpCl, 10)).unwrap();
        let b = run_stream(&s, &small_cfg(Mode::DpCl, 10)).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn noiseless_agem_step_matches_hand_computation() {
        let s = small_stream(2, 5);
        let cfg = TrainConfig {
            sampling_rate: Some(1.0),
            ref_batch_size: 1000,
            ..small_cfg(Mode::Agem, 1)
        };
        let mut net = DenseNet::new(&[16, 8, 4], Activation::Relu, Init::UniformFanIn, 3).unwrap();
        let mut mem = EpisodicMemory::new();
        mem.push_block(s.tasks()[0].reference.examples().to_vec(), 1).unwrap();
        let mut ledger = PrivacyLedger::new(8).unwrap();
        ledger.open_task(1).unwrap();
        ledger.register_block(1).unwrap();

        // full batch and whole memory: the step is deterministic
        let train = s.tasks()[1].train.examples();
        let g = net.grad(train).unwrap();
        let g_ref = net.grad(s.tasks()[0].reference.examples()).unwrap();
        let gr = g.dot(&g_ref);
        let rr = g_ref.dot(&g_ref);
        let mut want = net.params().clone();
        for i in 0..want.len() {
            want[i] -= 0.1 * (g[i] - gr / rr * g_ref[i]);
        }
        train_task(&mut net, 2, train, &mem, &mut ledger, &cfg).unwrap();
        assert_eq!(net.params(), &want);
        assert!(ledger.report(1e-5, Policy::Lemma2).unwrap().total.is_infinite());
    }

    #[test]
    fn noiseless_single_block_reference_is_plain_gradient() {
        let s = small_stream(2, 6);
        let net = DenseNet::new(&[16, 8, 4], Activation::Relu, Init::UniformFanIn, 3).unwrap();
        let mut mem = EpisodicMemory::new();
        let block = s.tasks()[0].reference.examples().to_vec();
        mem.push_block(block.clone(), 1).unwrap();
        let mut ledger = PrivacyLedger::new(8).unwrap();
        ledger.open_task(1).unwrap();
        ledger.register_block(1).unwrap();
        ledger.open_task(2).unwrap();
        let cfg = TrainConfig {
            noise: NoiseConfig::new(0.0, 1e6, 0).unwrap(),
            ref_batch_size: block.len(),
            ..small_cfg(Mode::DpAgem, 1)
        };
        let g_ref = reference_grad(&net, 2, 0, &mem, &mut ledger, &cfg, 0.0).unwrap();
        let want = net.grad(&block).unwrap();
        for (a, b) in g_ref.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tasks_do_not_forget() {
        let (pool, test) = make_synthetic_split(16, 4, 60, 25, 8.0, 8).unwrap();
        let one = make_permuted_stream(&pool, &test, 1, 8, 0.2).unwrap();
        let task = one.tasks()[0].clone();
        let stream = TaskStream::new(vec![task.clone(), task.clone(), task]).unwrap();
        let cfg = TrainConfig {
            hidden: vec![16],
            train_batch_size: 20,
            ref_batch_size: 10,
            epochs_per_task: 40,
            ..small_cfg(Mode::Agem, 1)
        };
        let cfg = TrainConfig { steps_per_task: None, ..cfg };
        let r = run_stream(&stream, &cfg).unwrap();
        let (f, _) = crate::metrics::forgetting(&r.accuracy, 3).unwrap();
        assert!(f.abs() <= 0.02, "forgetting {f}, matrix {:?}", r.accuracy);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            sampling_rate: Some(1.5),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg = TrainConfig {
            sampling_rate: Some(0.001),
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.rate_for(100), Err(Error::Config(_))));
        assert_eq!(TrainConfig::default().steps_for(0.01), 100);
        assert_eq!("dp_agem".parse::<Mode>().unwrap(), Mode::DpAgem);
        assert_eq!("conflict".parse::<ProjectionRule>().unwrap(), ProjectionRule::OnConflict);
    }
}
