//! Moments accountant for the subsampled Gaussian mechanism, plus the two
//! continual composition policies.
//!
//! One step of the mechanism releases a gradient built from a Bernoulli(q)
//! subsample with Gaussian noise of multiplier `sigma`. Its log-moment of
//! integer order `lambda` is
//!
//! ```text
//! alpha(lambda) = ln E_{z ~ mu}[(mu(z) / mu0(z))^lambda]
//!               = ln sum_{k=0}^{lambda+1} C(lambda+1, k) (1-q)^(lambda+1-k) q^k exp((k^2 - k) / (2 sigma^2))
//! ```
//!
//! with `mu0 = N(0, sigma^2)` and `mu = (1-q) N(0, sigma^2) + q N(1, sigma^2)`.
//! Log-moments add across steps, and the tail bound
//! `eps = min_lambda (alpha(lambda) - ln delta) / lambda` turns them into an
//! `(eps, delta)` guarantee.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA_MAX: usize = 64;

fn validate_rate(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    Ok(())
}

fn validate_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise multiplier must be > 0, got {sigma}")));
    }
    Ok(())
}

fn validate_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Per-step log-moment of order `lambda` of the subsampled Gaussian mechanism.
pub fn step_log_moment(q: f64, sigma: f64, lambda: usize) -> Result<f64> {
    validate_rate(q)?;
    validate_sigma(sigma)?;
    if lambda == 0 {
        return Err(Error::config("moment order must be >= 1"));
    }
    let n = lambda + 1;
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let terms: Vec<f64> = (0..=n)
        .map(|k| {
            let stay = if n - k == 0 { 0.0 } else { (n - k) as f64 * ln_1mq };
            let take = if k == 0 { 0.0 } else { k as f64 * ln_q };
            let kf = k as f64;
            ln_binomial(n, k) + stay + take + (kf * kf - kf) / two_var
        })
        .collect();
    Ok(log_sum_exp(&terms).max(0.0))
}

/// Log-moments for orders `1..=lambda_max`.
pub fn step_log_moments(q: f64, sigma: f64, lambda_max: usize) -> Result<Vec<f64>> {
    (1..=lambda_max).map(|l| step_log_moment(q, sigma, l)).collect()
}

/// Parameters of one mechanism invocation. `sigma == 0` marks a release
/// without noise, whose log-moments are infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mechanism {
    pub q: f64,
    pub sigma: f64,
}

impl Mechanism {
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        validate_rate(q)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("noise multiplier must be >= 0, got {sigma}")));
        }
        Ok(Mechanism { q, sigma })
    }

    fn same(&self, other: &Mechanism) -> bool {
        self.q.to_bits() == other.q.to_bits() && self.sigma.to_bits() == other.sigma.to_bits()
    }

    fn per_step(&self, lambda_max: usize) -> Result<Vec<f64>> {
        if self.sigma == 0.0 {
            return Ok(vec![f64::INFINITY; lambda_max]);
        }
        step_log_moments(self.q, self.sigma, lambda_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Tally {
    mechanism: Mechanism,
    per_step: Vec<f64>,
    count: u64,
}

/// Accumulated log-moments of a sequence of mechanism invocations.
///
/// Steps are tallied per distinct mechanism, so `n` identical steps
/// contribute exactly `n * alpha_step(lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    lambda_max: usize,
    tallies: Vec<Tally>,
}

impl MomentState {
    pub fn new(lambda_max: usize) -> Result<Self> {
        if lambda_max == 0 {
            return Err(Error::config("lambda_max must be >= 1"));
        }
        Ok(MomentState {
            lambda_max,
            tallies: Vec::new(),
        })
    }

    pub fn lambda_max(&self) -> usize {
        self.lambda_max
    }

    pub fn steps(&self) -> u64 {
        self.tallies.iter().map(|t| t.count).sum()
    }

    /// Adds `count` invocations of `mechanism`.
    pub fn record(&mut self, mechanism: Mechanism, count: u64) -> Result<()> {
        if let Some(t) = self.tallies.iter_mut().find(|t| t.mechanism.same(&mechanism)) {
            t.count += count;
            return Ok(());
        }
        let per_step = mechanism.per_step(self.lambda_max)?;
        self.tallies.push(Tally {
            mechanism,
            per_step,
            count,
        });
        Ok(())
    }

    pub fn record_step(&mut self, mechanism: Mechanism) -> Result<()> {
        self.record(mechanism, 1)
    }

    /// Folds another state's steps into this one.
    pub fn merge(&mut self, other: &MomentState) -> Result<()> {
        if other.lambda_max != self.lambda_max {
            return Err(Error::state("cannot merge moment states with different lambda_max"));
        }
        for t in &other.tallies {
            self.record(t.mechanism, t.count)?;
        }
        Ok(())
    }

    /// Cumulative `alpha(lambda)` for `lambda = 1..=lambda_max`.
    pub fn log_moments(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.lambda_max];
        for t in self.tallies.iter().filter(|t| t.count > 0) {
            let c = t.count as f64;
            out.iter_mut().zip(&t.per_step).for_each(|(o, a)| *o += c * a);
        }
        out
    }

    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        compose_epsilon(self, delta)
    }
}

/// `min_lambda (alpha(lambda) - ln delta) / lambda`, or 0 for an empty state.
pub fn compose_epsilon(state: &MomentState, delta: f64) -> Result<f64> {
    validate_delta(delta)?;
    if state.steps() == 0 {
        return Ok(0.0);
    }
    let ln_delta = delta.ln();
    Ok(state
        .log_moments()
        .iter()
        .enumerate()
        .map(|(i, a)| (a - ln_delta) / (i + 1) as f64)
        .fold(f64::INFINITY, f64::min)
        .max(0.0))
}

/// How per-task budgets compose across a task stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Policy {
    /// Every earlier block is read at every later task: `eps_i(T) = eps_i + (T - i) eps'_i`.
    Lemma1,
    /// One random block per step: `eps_i(T) = eps_i + eps'_i`.
    #[default]
    Lemma2,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Lemma1 => "lemma1",
            Policy::Lemma2 => "lemma2",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lemma1" => Ok(Policy::Lemma1),
            "lemma2" => Ok(Policy::Lemma2),
            other => Err(Error::config(format!("unknown policy '{other}' (expected lemma1|lemma2)"))),
        }
    }
}

/// Whether the first task's reference budget is forced to zero under the `lemma2` policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstTaskRef {
    /// Task 1 sees an empty memory, so `eps'_1 = 0`.
    #[default]
    Zero,
    /// Use the supplied `eps'_1` as-is.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskBudget {
    pub task_id: usize,
    pub eps_train: f64,
    pub eps_ref: f64,
}

impl TaskBudget {
    pub fn new(task_id: usize, eps_train: f64, eps_ref: f64) -> Self {
        TaskBudget {
            task_id,
            eps_train,
            eps_ref,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    /// Budgets for tasks `1..=T`, in task order.
    pub budgets: Vec<TaskBudget>,
    /// `eps_i(T)` for `i = 1..=T`.
    pub per_task: Vec<f64>,
    pub total: f64,
    pub delta: Option<f64>,
    pub policy: Policy,
}

fn collect_budgets(budgets: &[TaskBudget], tasks: usize) -> Result<Vec<TaskBudget>> {
    if tasks == 0 {
        return Err(Error::input("budget report needs at least one task"));
    }
    let mut by_id = BTreeMap::new();
    for b in budgets {
        if !(b.eps_train >= 0.0 && b.eps_ref >= 0.0) {
            return Err(Error::input(format!("task {} has a negative or NaN budget", b.task_id)));
        }
        if by_id.insert(b.task_id, *b).is_some() {
            return Err(Error::input(format!("duplicate budget for task {}", b.task_id)));
        }
    }
    (1..=tasks)
        .map(|i| {
            by_id
                .get(&i)
                .copied()
                .ok_or_else(|| Error::input(format!("no budget for task {i}")))
        })
        .collect()
}

fn report(budgets: Vec<TaskBudget>, per_task: Vec<f64>, policy: Policy) -> BudgetReport {
    let total = per_task.iter().sum();
    BudgetReport {
        budgets,
        per_task,
        total,
        delta: None,
        policy,
    }
}

/// `lemma1` composition up to task `tasks`.
pub fn budget_lemma1(budgets: &[TaskBudget], tasks: usize) -> Result<BudgetReport> {
    let b = collect_budgets(budgets, tasks)?;
    let per_task = b
        .iter()
        .map(|x| x.eps_train + (tasks - x.task_id) as f64 * x.eps_ref)
        .collect();
    Ok(report(b, per_task, Policy::Lemma1))
}

/// `lemma2` composition up to task `tasks`, with `eps'_1 = 0`.
pub fn budget_lemma2(budgets: &[TaskBudget], tasks: usize) -> Result<BudgetReport> {
    budget_lemma2_with(budgets, tasks, FirstTaskRef::Zero)
}

pub fn budget_lemma2_with(
    budgets: &[TaskBudget],
    tasks: usize,
    first: FirstTaskRef,
) -> Result<BudgetReport> {
    let mut b = collect_budgets(budgets, tasks)?;
    if first == FirstTaskRef::Zero {
        b[0].eps_ref = 0.0;
    }
    let per_task = b.iter().map(|x| x.eps_train + x.eps_ref).collect();
    Ok(report(b, per_task, Policy::Lemma2))
}

pub fn compose_budgets(budgets: &[TaskBudget], tasks: usize, policy: Policy) -> Result<BudgetReport> {
    match policy {
        Policy::Lemma1 => budget_lemma1(budgets, tasks),
        Policy::Lemma2 => budget_lemma2(budgets, tasks),
    }
}

pub const BUDGET_CSV_HEADER: &str = "task_id,eps_train,eps_ref,eps_task_at_T,total";

impl BudgetReport {
    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn tasks(&self) -> usize {
        self.per_task.len()
    }

    /// One row per task; `total` repeats the cumulative budget of the stream.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BUDGET_CSV_HEADER);
        out.push('\n');
        for (b, e) in self.budgets.iter().zip(&self.per_task) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.task_id, b.eps_train, b.eps_ref, e, self.total
            ));
        }
        out
    }

    /// Parses rows written by [`BudgetReport::to_csv`].
    pub fn from_csv(text: &str, policy: Policy, delta: Option<f64>) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == BUDGET_CSV_HEADER => {}
            _ => return Err(Error::input("budget report is missing its header row")),
        }
        let mut budgets = Vec::new();
        let mut per_task = Vec::new();
        let mut total = 0.0;
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 5 {
                return Err(Error::input(format!("budget row {} has {} columns", n + 1, cols.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::input(format!("budget row {}: {e}", n + 1)))
            };
            let id = cols[0]
                .parse::<usize>()
                .map_err(|e| Error::input(format!("budget row {}: {e}", n + 1)))?;
            budgets.push(TaskBudget::new(id, num(cols[1])?, num(cols[2])?));
            per_task.push(num(cols[3])?);
            total = num(cols[4])?;
        }
        Ok(BudgetReport {
            budgets,
            per_task,
            total,
            delta,
            policy,
        })
    }
}

/// Per-run record of every private release, keyed by task and memory block.
///
/// Training steps are charged to their task. Reference steps are charged to
/// the pair (task during which they ran, block they read), which supports
/// both views of the reference budget: what a task spent on the memory, and
/// what each block has leaked in total.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    lambda_max: usize,
    train: BTreeMap<usize, MomentState>,
    reference: BTreeMap<(usize, usize), MomentState>,
    blocks: BTreeSet<usize>,
}

impl PrivacyLedger {
    pub fn new(lambda_max: usize) -> Result<Self> {
        MomentState::new(lambda_max)?;
        Ok(PrivacyLedger {
            lambda_max,
            train: BTreeMap::new(),
            reference: BTreeMap::new(),
            blocks: BTreeSet::new(),
        })
    }

    pub fn lambda_max(&self) -> usize {
        self.lambda_max
    }

    pub fn open_task(&mut self, task_id: usize) -> Result<()> {
        if task_id == 0 {
            return Err(Error::state("task ids start at 1"));
        }
        if self.train.contains_key(&task_id) {
            return Err(Error::state(format!("task {task_id} already opened")));
        }
        self.train.insert(task_id, MomentState::new(self.lambda_max)?);
        Ok(())
    }

    pub fn register_block(&mut self, block_id: usize) -> Result<()> {
        if !self.train.contains_key(&block_id) {
            return Err(Error::state(format!("block {block_id} has no matching task")));
        }
        if !self.blocks.insert(block_id) {
            return Err(Error::state(format!("block {block_id} already registered")));
        }
        Ok(())
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.keys().copied()
    }

    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().copied()
    }

    pub fn track_training_step(&mut self, task_id: usize, mechanism: Mechanism) -> Result<()> {
        self.train
            .get_mut(&task_id)
            .ok_or_else(|| Error::state(format!("unknown task {task_id}")))?
            .record_step(mechanism)
    }

    pub fn track_ref_step(&mut self, task_id: usize, block_id: usize, mechanism: Mechanism) -> Result<()> {
        if !self.train.contains_key(&task_id) {
            return Err(Error::state(format!("unknown task {task_id}")));
        }
        if !self.blocks.contains(&block_id) {
            return Err(Error::state(format!("unknown memory block {block_id}")));
        }
        if block_id >= task_id {
            return Err(Error::state(format!(
                "task {task_id} cannot read block {block_id}"
            )));
        }
        let lambda_max = self.lambda_max;
        let state = match self.reference.entry((task_id, block_id)) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(MomentState::new(lambda_max)?),
        };
        state.record_step(mechanism)
    }

    pub fn train_state(&self, task_id: usize) -> Result<&MomentState> {
        self.train
            .get(&task_id)
            .ok_or_else(|| Error::state(format!("unknown task {task_id}")))
    }

    fn merged<'a>(&self, states: impl Iterator<Item = &'a MomentState>) -> Result<MomentState> {
        let mut out = MomentState::new(self.lambda_max)?;
        for s in states {
            out.merge(s)?;
        }
        Ok(out)
    }

    /// All reference steps that ran while training `task_id`.
    pub fn ref_charged_to_task(&self, task_id: usize) -> Result<MomentState> {
        self.train_state(task_id)?;
        self.merged(
            self.reference
                .iter()
                .filter(|((t, _), _)| *t == task_id)
                .map(|(_, s)| s),
        )
    }

    /// All reference steps that read `block_id`, across tasks.
    pub fn spent_on_block(&self, block_id: usize) -> Result<MomentState> {
        if !self.blocks.contains(&block_id) {
            return Err(Error::state(format!("unknown memory block {block_id}")));
        }
        self.merged(
            self.reference
                .iter()
                .filter(|((_, b), _)| *b == block_id)
                .map(|(_, s)| s),
        )
    }

    /// Reference steps that read `block_id` while training `task_id`.
    pub fn block_access(&self, task_id: usize, block_id: usize) -> Result<MomentState> {
        match self.reference.get(&(task_id, block_id)) {
            Some(s) => Ok(s.clone()),
            None => MomentState::new(self.lambda_max),
        }
    }

    pub fn train_steps(&self, task_id: usize) -> Result<u64> {
        Ok(self.train_state(task_id)?.steps())
    }

    pub fn ref_steps_charged(&self, task_id: usize) -> Result<u64> {
        Ok(self.ref_charged_to_task(task_id)?.steps())
    }

    pub fn block_steps(&self, block_id: usize) -> Result<u64> {
        Ok(self.spent_on_block(block_id)?.steps())
    }

    /// Per-task `(eps_i, eps'_i)` pairs as each policy reads them.
    ///
    /// Under `lemma2`, `eps'_i` is the budget of the reference steps run during
    /// task `i`. Under `lemma1`, `eps'_i` is the budget block `i` spends during
    /// one later task, taken from task `i + 1` (zero if no later task ran).
    pub fn task_budgets(&self, delta: f64, policy: Policy) -> Result<Vec<TaskBudget>> {
        self.train
            .iter()
            .map(|(&id, state)| {
                let eps_train = state.epsilon(delta)?;
                let eps_ref = match policy {
                    Policy::Lemma2 => self.ref_charged_to_task(id)?.epsilon(delta)?,
                    Policy::Lemma1 => self.block_access(id + 1, id)?.epsilon(delta)?,
                };
                Ok(TaskBudget::new(id, eps_train, eps_ref))
            })
            .collect()
    }

    /// Total budget each block has spent, by block id.
    pub fn block_budgets(&self, delta: f64) -> Result<Vec<(usize, f64)>> {
        self.blocks
            .iter()
            .map(|&b| Ok((b, self.spent_on_block(b)?.epsilon(delta)?)))
            .collect()
    }

    pub fn report(&self, delta: f64, policy: Policy) -> Result<BudgetReport> {
        let budgets = self.task_budgets(delta, policy)?;
        Ok(compose_budgets(&budgets, budgets.len(), policy)?.with_delta(delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sampling_matches_gaussian_moment() {
        // q = 1 reduces to the plain Gaussian: lambda (lambda + 1) / (2 sigma^2)
        for (sigma, lambda) in [(1.0, 1), (2.0, 5), (0.7, 12)] {
            let a = step_log_moment(1.0, sigma, lambda).unwrap();
            let want = (lambda * (lambda + 1)) as f64 / (2.0 * sigma * sigma);
            assert!((a - want).abs() < 1e-9 * want.max(1.0), "{a} vs {want}");
        }
    }

    #[test]
    fn pinned_small_rate_moment() {
        // adaptive quadrature of the moment integral (40 significant digits)
        let a = step_log_moment(0.01, 1.0, 8).unwrap();
        assert!((a - 0.014_253_296_347_064_084).abs() < 1e-12, "{a}");
    }

    #[test]
    fn vanishing_rate_has_vanishing_moment() {
        let a = step_log_moment(1e-12, 1.0, 10).unwrap();
        assert!((0.0..1e-9).contains(&a));
    }

    #[test]
    fn invalid_parameters() {
        assert!(matches!(step_log_moment(0.0, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(step_log_moment(1.5, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(step_log_moment(0.1, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(step_log_moment(0.1, 1.0, 0), Err(Error::Config(_))));
        let s = MomentState::new(8).unwrap();
        assert!(matches!(compose_epsilon(&s, 0.0), Err(Error::Config(_))));
        assert!(matches!(compose_epsilon(&s, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn large_orders_stay_finite() {
        let a = step_log_moment(1.0, 0.3, 64).unwrap();
        assert!(a.is_finite() && a > 0.0);
    }

    #[test]
    fn empty_state_has_zero_epsilon() {
        assert_eq!(MomentState::new(64).unwrap().epsilon(1e-5).unwrap(), 0.0);
    }

    #[test]
    fn pinned_composed_epsilon() {
        // independent lambda search over mpmath-quadrature moments, lambda 1..=64
        let mut s = MomentState::new(64).unwrap();
        s.record(Mechanism::new(0.01, 1.0).unwrap(), 10_000).unwrap();
        let eps = s.epsilon(1e-5).unwrap();
        assert!((eps - 7.469_182_310_764_31).abs() < 1e-6, "{eps}");
    }

    #[test]
    fn additivity_is_exact() {
        let m = Mechanism::new(0.05, 1.3).unwrap();
        let mut s = MomentState::new(16).unwrap();
        for _ in 0..100 {
            s.record_step(m).unwrap();
        }
        let single = step_log_moments(0.05, 1.3, 16).unwrap();
        for (a, b) in s.log_moments().iter().zip(&single) {
            assert_eq!(*a, 100.0 * b);
        }
        assert_eq!(s.steps(), 100);
    }

    #[test]
    fn noiseless_release_is_unbounded() {
        let mut s = MomentState::new(8).unwrap();
        s.record_step(Mechanism::new(0.1, 0.0).unwrap()).unwrap();
        assert_eq!(s.epsilon(1e-4).unwrap(), f64::INFINITY);
    }

    #[test]
    fn doubling_steps_never_lowers_epsilon() {
        let m = Mechanism::new(0.02, 1.1).unwrap();
        for k in [1u64, 10, 100, 1000] {
            let mut a = MomentState::new(64).unwrap();
            a.record(m, k).unwrap();
            let mut b = MomentState::new(64).unwrap();
            b.record(m, 2 * k).unwrap();
            assert!(b.epsilon(1e-5).unwrap() >= a.epsilon(1e-5).unwrap());
        }
    }

    fn ones(n: usize) -> Vec<TaskBudget> {
        (1..=n).map(|i| TaskBudget::new(i, 1.0, 1.0)).collect()
    }

    #[test]
    fn lemma1_examples() {
        let r = budget_lemma1(&[TaskBudget::new(1, 0.7, 0.3)], 1).unwrap();
        assert_eq!(r.per_task, vec![0.7]);
        assert_eq!(r.total, 0.7);

        let r = budget_lemma1(&ones(5), 5).unwrap();
        assert_eq!(r.per_task, vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(r.total, 15.0);

        let b: Vec<_> = (1..=4).map(|i| TaskBudget::new(i, i as f64 * 0.1, 0.0)).collect();
        let r = budget_lemma1(&b, 4).unwrap();
        assert_eq!(r.per_task, b.iter().map(|x| x.eps_train).collect::<Vec<_>>());
    }

    #[test]
    fn lemma2_examples() {
        let r = budget_lemma2(&[TaskBudget::new(1, 0.7, 0.3)], 1).unwrap();
        assert_eq!(r.total, 0.7);

        let r = budget_lemma2(&ones(5), 5).unwrap();
        assert_eq!(r.per_task, vec![1.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(r.total, 9.0);
        let r = budget_lemma2_with(&ones(5), 5, FirstTaskRef::Literal).unwrap();
        assert_eq!(r.total, 10.0);

        let totals: Vec<f64> = (1..=17).map(|t| budget_lemma2(&ones(17), t).unwrap().total).collect();
        for w in totals.windows(3) {
            assert_eq!(w[2] - w[1], w[1] - w[0]);
        }
    }

    #[test]
    fn missing_or_duplicate_tasks_are_rejected() {
        let b = vec![TaskBudget::new(1, 1.0, 0.0), TaskBudget::new(3, 1.0, 1.0)];
        assert!(matches!(budget_lemma1(&b, 3), Err(Error::Input(_))));
        assert!(matches!(budget_lemma2(&b, 3), Err(Error::Input(_))));
        let b = vec![TaskBudget::new(1, 1.0, 0.0), TaskBudget::new(1, 1.0, 1.0)];
        assert!(budget_lemma2(&b, 1).is_err());
        assert!(budget_lemma2(&[TaskBudget::new(1, -1.0, 0.0)], 1).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let b: Vec<_> = (1..=4).map(|i| TaskBudget::new(i, 0.1 * i as f64, 1.0 / 3.0)).collect();
        let r = budget_lemma1(&b, 4).unwrap().with_delta(1e-4);
        let back = BudgetReport::from_csv(&r.to_csv(), Policy::Lemma1, Some(1e-4)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ledger_tracks_tasks_independently() {
        let m = Mechanism::new(0.01, 1.0).unwrap();
        let mut ledger = PrivacyLedger::new(32).unwrap();
        ledger.open_task(1).unwrap();
        ledger.track_training_step(1, m).unwrap();
        let mut fresh = MomentState::new(32).unwrap();
        fresh.record_step(m).unwrap();
        assert_eq!(
            ledger.train_state(1).unwrap().epsilon(1e-4).unwrap(),
            fresh.epsilon(1e-4).unwrap()
        );

        let before = ledger.train_state(1).unwrap().epsilon(1e-4).unwrap();
        ledger.register_block(1).unwrap();
        ledger.open_task(2).unwrap();
        for _ in 0..10 {
            ledger.track_training_step(2, m).unwrap();
            ledger.track_ref_step(2, 1, m).unwrap();
        }
        assert_eq!(ledger.train_state(1).unwrap().epsilon(1e-4).unwrap(), before);
        assert_eq!(ledger.ref_steps_charged(1).unwrap(), 0);
        assert_eq!(ledger.ref_steps_charged(2).unwrap(), 10);
        assert_eq!(ledger.block_steps(1).unwrap(), 10);
    }

    #[test]
    fn ledger_rejects_unknown_ids() {
        let m = Mechanism::new(0.01, 1.0).unwrap();
        let mut ledger = PrivacyLedger::new(8).unwrap();
        assert!(matches!(ledger.track_training_step(1, m), Err(Error::State(_))));
        ledger.open_task(1).unwrap();
        ledger.open_task(2).unwrap();
        assert!(matches!(ledger.track_ref_step(2, 1, m), Err(Error::State(_))));
        ledger.register_block(1).unwrap();
        assert!(ledger.track_ref_step(2, 1, m).is_ok());
        ledger.register_block(2).unwrap();
        assert!(matches!(ledger.track_ref_step(2, 2, m), Err(Error::State(_))));
        assert!(matches!(ledger.track_ref_step(9, 1, m), Err(Error::State(_))));
    }

    #[test]
    fn ledger_views_per_policy() {
        let m = Mechanism::new(0.1, 1.0).unwrap();
        let mut ledger = PrivacyLedger::new(32).unwrap();
        for t in 1..=3 {
            ledger.open_task(t).unwrap();
            for _ in 0..5 {
                ledger.track_training_step(t, m).unwrap();
                for b in 1..t {
                    ledger.track_ref_step(t, b, m).unwrap();
                }
            }
            ledger.register_block(t).unwrap();
        }
        let mut five = MomentState::new(32).unwrap();
        five.record(m, 5).unwrap();
        let e5 = five.epsilon(1e-4).unwrap();

        let l1 = ledger.task_budgets(1e-4, Policy::Lemma1).unwrap();
        assert_eq!(l1[0].eps_ref, e5);
        assert_eq!(l1[1].eps_ref, e5);
        assert_eq!(l1[2].eps_ref, 0.0);

        let l2 = ledger.task_budgets(1e-4, Policy::Lemma2).unwrap();
        assert_eq!(l2[0].eps_ref, 0.0);
        assert_eq!(l2[1].eps_ref, e5);
        let mut ten = MomentState::new(32).unwrap();
        ten.record(m, 10).unwrap();
        assert_eq!(l2[2].eps_ref, ten.epsilon(1e-4).unwrap());

        let r = ledger.report(1e-4, Policy::Lemma2).unwrap();
        assert_eq!(r, budget_lemma2(&l2, 3).unwrap().with_delta(1e-4));
    }
}
