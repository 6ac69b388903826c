use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpcl::cli::{cmd_budget_curve, cmd_run, exit_code, RunSpec};

#[derive(Parser)]
#[command(name = "dpcl", version, about = "Differentially private continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a task stream and write accuracy, metrics and budget files.
    Run(Box<RunArgs>),
    /// Compare cumulative budgets of both composition policies for random per-task budgets.
    BudgetCurve(CurveArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key-value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// agem, dp-cl or dp-agem.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fixed number of updates per task instead of epochs.
    #[arg(long)]
    steps_per_task: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    ref_batch: Option<usize>,
    #[arg(long)]
    sampling_rate: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Hidden layer widths, e.g. 256,256.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    /// per-example or per-batch.
    #[arg(long)]
    clip_granularity: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda_max: Option<usize>,
    /// lemma1 or lemma2.
    #[arg(long)]
    policy: Option<String>,
    /// always or conflict.
    #[arg(long)]
    projection: Option<String>,
    #[arg(long)]
    lca_beta: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ref_fraction: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use generated Gaussian blobs instead of archives.
    #[arg(long, conflicts_with_all = ["train_images", "train_labels", "test_images", "test_labels"])]
    synthetic: bool,
    #[arg(long)]
    synthetic_dim: Option<usize>,
    #[arg(long)]
    synthetic_classes: Option<usize>,
    #[arg(long)]
    synthetic_margin: Option<f64>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut kv: Vec<(&'static str, String)> = Vec::new();
        macro_rules! push {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = &self.$field { kv.push(($key, v.to_string())); })*
            };
        }
        if self.synthetic {
            kv.push(("data", "synthetic".into()));
        }
        push!(
            mode => "mode", tasks => "tasks", epochs => "epochs", steps_per_task => "steps_per_task",
            batch => "batch", ref_batch => "ref_batch", sampling_rate => "sampling_rate",
            learning_rate => "learning_rate", hidden => "hidden", sigma => "sigma", clip => "clip",
            clip_granularity => "clip_granularity", delta => "delta", lambda_max => "lambda_max",
            policy => "policy", projection => "projection", lca_beta => "lca_beta", seed => "seed",
            ref_fraction => "ref_fraction",
            synthetic_dim => "synthetic_dim", synthetic_classes => "synthetic_classes",
            synthetic_margin => "synthetic_margin",
            train_limit => "train_limit", test_limit => "test_limit",
        );
        let paths = [
            (&self.out, "out"),
            (&self.train_images, "train_images"),
            (&self.train_labels, "train_labels"),
            (&self.test_images, "test_images"),
            (&self.test_labels, "test_labels"),
        ];
        for (p, key) in paths {
            if let Some(p) = p {
                kv.push((key, p.display().to_string()));
            }
        }
        kv
    }

    fn spec(&self) -> dpcl::Result<RunSpec> {
        let mut spec = match &self.config {
            Some(path) => RunSpec::from_config_file(path)?,
            None => RunSpec::default(),
        };
        for (k, v) in self.overrides() {
            spec.set(k, &v)?;
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long, default_value_t = 1.0)]
    mean: f64,
    #[arg(long, default_value_t = 0.02)]
    std: f64,
    #[arg(long, default_value_t = 17)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => match args.spec() {
            Ok(spec) => cmd_run(&spec),
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        },
        Command::BudgetCurve(a) => cmd_budget_curve(a.mean, a.std, a.tasks, a.seed, a.out.as_deref()),
    };
    ExitCode::from(code as u8)
}
