//! Run specifications, the experiment runner and CSV outputs.
//!
//! A [`RunSpec`] round-trips through a plain `key = value` file; command-line
//! flags are applied on top of it with the same keys.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::accountant::{budget_lemma1, budget_lemma2, Policy, TaskBudget};
use crate::data::{load_idx_archive, make_permuted_stream, make_synthetic_split, Dataset, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::metrics_csv;
use crate::trainer::{run_stream, ClipGranularity, ProjectionRule, RunResult, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const ACCURACY_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BUDGET_FILE: &str = "budget_report.csv";
pub const MANIFEST_FILE: &str = "run_manifest.txt";

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        feature_dim: usize,
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        margin: f64,
    },
    Archive {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Use only the first `n` examples of each split.
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

impl DataSource {
    fn synthetic_default() -> Self {
        DataSource::Synthetic {
            feature_dim: 64,
            classes: 4,
            train_per_class: 200,
            test_per_class: 50,
            margin: 20.0,
        }
    }

    fn archive_default() -> Self {
        DataSource::Archive {
            train_images: PathBuf::new(),
            train_labels: PathBuf::new(),
            test_images: PathBuf::new(),
            test_labels: PathBuf::new(),
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub tasks: usize,
    pub ref_fraction: f64,
    pub data: DataSource,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            tasks: 5,
            ref_fraction: 0.1,
            data: DataSource::synthetic_default(),
            train: TrainConfig {
                hidden: vec![64, 64],
                ..TrainConfig::default()
            },
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key} = {value:?}: {e}")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "" | "auto" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn fmt_optional<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string)
}

impl RunSpec {
    /// Sets one configuration key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "mode" => t.mode = value.parse()?,
            "tasks" => self.tasks = parse(key, value)?,
            "epochs" => t.epochs_per_task = parse(key, value)?,
            "steps_per_task" => t.steps_per_task = parse_optional(key, value)?,
            "batch" => t.train_batch_size = parse(key, value)?,
            "ref_batch" => t.ref_batch_size = parse(key, value)?,
            "sampling_rate" => t.sampling_rate = parse_optional(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "hidden" => {
                t.hidden = value
                    .split([',', 'x'])
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "sigma" => t.noise.sigma = parse(key, value)?,
            "clip" => t.noise.clip_bound = parse(key, value)?,
            "clip_granularity" => t.clip_granularity = value.parse::<ClipGranularity>()?,
            "delta" => t.delta = parse(key, value)?,
            "lambda_max" => t.lambda_max = parse(key, value)?,
            "policy" => t.policy = value.parse::<Policy>()?,
            "projection" => t.projection = value.parse::<ProjectionRule>()?,
            "lca_beta" => t.lca_beta = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                t.noise.seed = t.seed;
            }
            "ref_fraction" => self.ref_fraction = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "data" => match value {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic { .. }) {
                        self.data = DataSource::synthetic_default();
                    }
                }
                "archive" => {
                    if !matches!(self.data, DataSource::Archive { .. }) {
                        self.data = DataSource::archive_default();
                    }
                }
                other => return Err(Error::config(format!("unknown data source {other:?}"))),
            },
            _ => return self.set_data_key(key, value),
        }
        Ok(())
    }

    fn set_data_key(&mut self, key: &str, value: &str) -> Result<()> {
        if key.starts_with("synthetic_") && !matches!(self.data, DataSource::Synthetic { .. }) {
            self.data = DataSource::synthetic_default();
        }
        let archive_keys = ["train_images", "train_labels", "test_images", "test_labels", "train_limit", "test_limit"];
        if archive_keys.contains(&key) && !matches!(self.data, DataSource::Archive { .. }) {
            self.data = DataSource::archive_default();
        }
        match &mut self.data {
            DataSource::Synthetic {
                feature_dim,
                classes,
                train_per_class,
                test_per_class,
                margin,
            } => match key {
                "synthetic_dim" => *feature_dim = parse(key, value)?,
                "synthetic_classes" => *classes = parse(key, value)?,
                "synthetic_train_per_class" => *train_per_class = parse(key, value)?,
                "synthetic_test_per_class" => *test_per_class = parse(key, value)?,
                "synthetic_margin" => *margin = parse(key, value)?,
                _ => return Err(Error::config(format!("unknown key {key:?}"))),
            },
            DataSource::Archive {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => match key {
                "train_images" => *train_images = PathBuf::from(value),
                "train_labels" => *train_labels = PathBuf::from(value),
                "test_images" => *test_images = PathBuf::from(value),
                "test_labels" => *test_labels = PathBuf::from(value),
                "train_limit" => *train_limit = parse_optional(key, value)?,
                "test_limit" => *test_limit = parse_optional(key, value)?,
                _ => return Err(Error::config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Parses a `key = value` file; `#` starts a comment. The `timestamp`
    /// key written into run manifests is ignored, so a manifest reloads as a spec.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut spec = RunSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            if k.trim() != "timestamp" {
                spec.set(k.trim(), v)?;
            }
        }
        Ok(spec)
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_config_str(&fs::read_to_string(path)?)
    }

    pub fn to_config_string(&self) -> String {
        let t = &self.train;
        let hidden: Vec<String> = t.hidden.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("mode", t.mode.to_string());
        kv("tasks", self.tasks.to_string());
        kv("epochs", t.epochs_per_task.to_string());
        kv("steps_per_task", fmt_optional(&t.steps_per_task));
        kv("batch", t.train_batch_size.to_string());
        kv("ref_batch", t.ref_batch_size.to_string());
        kv("sampling_rate", fmt_optional(&t.sampling_rate));
        kv("learning_rate", t.learning_rate.to_string());
        kv("hidden", hidden.join(","));
        kv("sigma", t.noise.sigma.to_string());
        kv("clip", t.noise.clip_bound.to_string());
        kv("clip_granularity", t.clip_granularity.to_string());
        kv("delta", t.delta.to_string());
        kv("lambda_max", t.lambda_max.to_string());
        kv("policy", t.policy.to_string());
        kv("projection", t.projection.to_string());
        kv("lca_beta", t.lca_beta.to_string());
        kv("seed", t.seed.to_string());
        kv("ref_fraction", self.ref_fraction.to_string());
        kv("out", self.out_dir.display().to_string());
        match &self.data {
            DataSource::Synthetic {
                feature_dim,
                classes,
                train_per_class,
                test_per_class,
                margin,
            } => {
                kv("data", "synthetic".into());
                kv("synthetic_dim", feature_dim.to_string());
                kv("synthetic_classes", classes.to_string());
                kv("synthetic_train_per_class", train_per_class.to_string());
                kv("synthetic_test_per_class", test_per_class.to_string());
                kv("synthetic_margin", margin.to_string());
            }
            DataSource::Archive {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                kv("data", "archive".into());
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
                kv("train_limit", fmt_optional(train_limit));
                kv("test_limit", fmt_optional(test_limit));
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::config("number of tasks must be >= 1"));
        }
        if self.tasks > usize::from(u16::MAX) {
            return Err(Error::config("too many tasks"));
        }
        self.train.validate()
    }

    /// Loads or generates the data and builds the task stream.
    pub fn build_stream(&self) -> Result<TaskStream> {
        let seed = self.train.seed;
        let (pool, test) = match &self.data {
            DataSource::Synthetic {
                feature_dim,
                classes,
                train_per_class,
                test_per_class,
                margin,
            } => make_synthetic_split(*feature_dim, *classes, *train_per_class, *test_per_class, *margin, seed)?,
            DataSource::Archive {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let limit = |d: Dataset, n: &Option<usize>| n.map_or(d.clone(), |n| d.truncated(n));
                let pool = limit(load_idx_archive(train_images, train_labels)?, train_limit);
                let test = limit(load_idx_archive(test_images, test_labels)?, test_limit);
                (pool, test)
            }
        };
        if test.is_empty() {
            return Err(Error::input("test split is empty"));
        }
        make_permuted_stream(&pool, &test, self.tasks, seed, self.ref_fraction)
    }
}

/// Validates `spec`, builds its stream and trains.
pub fn execute(spec: &RunSpec) -> Result<RunResult> {
    spec.validate()?;
    let stream = spec.build_stream()?;
    run_stream(&stream, &spec.train)
}

/// Writes the four run artifacts into `spec.out_dir`.
pub fn write_outputs(spec: &RunSpec, result: &RunResult) -> Result<()> {
    let dir = &spec.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ACCURACY_FILE), result.accuracy.to_csv())?;
    fs::write(
        dir.join(METRICS_FILE),
        metrics_csv(&result.accuracy, &result.curve, spec.train.lca_beta)?,
    )?;
    fs::write(dir.join(BUDGET_FILE), result.budget.to_csv())?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut manifest = spec.to_config_string();
    let s = &result.stats;
    writeln!(manifest, "# steps = {}, reference steps = {}, projected = {}, kept = {}, degenerate references = {}, empty batches = {}",
        s.steps, s.ref_steps, s.projected, s.kept, s.degenerate_refs, s.empty_batches).unwrap();
    writeln!(manifest, "timestamp = {stamp}").unwrap();
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn run(spec: &RunSpec) -> Result<RunResult> {
    let result = execute(spec)?;
    write_outputs(spec, &result)?;
    Ok(result)
}

/// Runs `spec` and reports errors on stderr; returns the process exit code.
pub fn cmd_run(spec: &RunSpec) -> i32 {
    match run(spec) {
        Ok(r) => {
            let t = r.accuracy.num_tasks();
            let avg = crate::metrics::average_accuracy(&r.accuracy, t).unwrap_or(f64::NAN);
            println!(
                "{} tasks, average accuracy {avg:.4}, total epsilon {} ({})",
                t, r.budget.total, r.budget.policy
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetCurveRow {
    pub tasks: usize,
    pub lemma1_total: f64,
    pub lemma2_total: f64,
}

pub const BUDGET_CURVE_HEADER: &str = "T,lemma1_total,lemma2_total";

/// Cumulative budgets under both policies for `T = 1..=n`, with every
/// `eps_i` and `eps'_i` drawn from `N(mean, std^2)` (negative draws become 0).
pub fn budget_curve(mean: f64, std: f64, n: usize, seed: u64) -> Result<Vec<BudgetCurveRow>> {
    if n == 0 {
        return Err(Error::config("number of tasks must be >= 1"));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::config(format!("budget distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budgets: Vec<TaskBudget> = (1..=n)
        .map(|i| {
            let a: f64 = dist.sample(&mut rng);
            let b: f64 = dist.sample(&mut rng);
            TaskBudget::new(i, a.max(0.0), b.max(0.0))
        })
        .collect();
    (1..=n)
        .map(|t| {
            Ok(BudgetCurveRow {
                tasks: t,
                lemma1_total: budget_lemma1(&budgets[..t], t)?.total,
                lemma2_total: budget_lemma2(&budgets[..t], t)?.total,
            })
        })
        .collect()
}

pub fn budget_curve_csv(rows: &[BudgetCurveRow]) -> String {
    let mut out = format!("{BUDGET_CURVE_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.tasks, r.lemma1_total, r.lemma2_total).unwrap();
    }
    out
}

pub fn parse_budget_curve_csv(text: &str) -> Result<Vec<BudgetCurveRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(BUDGET_CURVE_HEADER) {
        return Err(Error::input("budget curve is missing its header row"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 3 {
                return Err(Error::input(format!("bad budget curve row {l:?}")));
            }
            Ok(BudgetCurveRow {
                tasks: parse("T", c[0])?,
                lemma1_total: parse("lemma1_total", c[1])?,
                lemma2_total: parse("lemma2_total", c[2])?,
            })
        })
        .collect()
}

/// Writes the budget comparison to `out` (stdout when `None`).
pub fn cmd_budget_curve(mean: f64, std: f64, n: usize, seed: u64, out: Option<&Path>) -> i32 {
    let result = budget_curve(mean, std, n, seed).and_then(|rows| {
        let text = budget_curve_csv(&rows);
        match out {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                fs::write(p, text)?;
            }
            None => print!("{text}"),
        }
        Ok(())
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut spec = RunSpec::default();
        spec.set("mode", "dp-agem").unwrap();
        spec.set("sampling_rate", "0.05").unwrap();
        spec.set("hidden", "32x16").unwrap();
        spec.set("policy", "lemma1").unwrap();
        spec.set("seed", "42").unwrap();
        let text = spec.to_config_string();
        assert_eq!(RunSpec::from_config_str(&text).unwrap(), spec);

        spec.set("train_images", "/tmp/a").unwrap();
        spec.set("train_limit", "100").unwrap();
        let text = spec.to_config_string();
        assert!(text.contains("data = archive"));
        assert_eq!(RunSpec::from_config_str(&text).unwrap(), spec);
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(matches!(RunSpec::from_config_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunSpec::from_config_str("tasks = many"), Err(Error::Config(_))));
        assert!(matches!(RunSpec::from_config_str("tasks 3"), Err(Error::Config(_))));
        let spec = RunSpec::from_config_str("tasks = 0").unwrap();
        assert_eq!(exit_code(&spec.validate().unwrap_err()), EXIT_CONFIG);
    }

    #[test]
    fn budget_curve_closed_form() {
        let rows = budget_curve(1.0, 0.0, 17, 0).unwrap();
        assert_eq!(rows[16].lemma1_total, 153.0);
        assert_eq!(rows[16].lemma2_total, 33.0);
        let one = budget_curve(1.0, 0.0, 1, 0).unwrap();
        assert_eq!(one[0].lemma1_total, 1.0);
        assert_eq!(one[0].lemma2_total, 1.0);
        assert!(matches!(budget_curve(1.0, 0.0, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn budget_curve_round_trip_and_dominance() {
        let rows = budget_curve(1.0, 0.02, 17, 5).unwrap();
        assert_eq!(parse_budget_curve_csv(&budget_curve_csv(&rows)).unwrap(), rows);
        for r in rows.iter().filter(|r| r.tasks >= 3) {
            assert!(r.lemma1_total > r.lemma2_total);
        }
    }

    #[test]
    fn noisy_budget_totals_stay_in_band() {
        for seed in 0..100 {
            let last = *budget_curve(1.0, 0.02, 17, seed).unwrap().last().unwrap();
            assert!((145.0..=161.0).contains(&last.lemma1_total), "{last:?}");
            assert!((31.0..=35.0).contains(&last.lemma2_total), "{last:?}");
        }
    }
}
