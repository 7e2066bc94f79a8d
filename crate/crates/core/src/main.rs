use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use mela::pipeline::{self, Inputs, RunConfig, StageResult};

#[derive(Parser)]
#[command(name = "mela", version, about = "Few-shot meta-learning with inferred global labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write synthetic meta-training tasks as episodic CSV.
    Simulate,
    /// Cluster local classes into global labels.
    InferLabels,
    /// Joint classifier and embedding training on labelled samples.
    Pretrain,
    /// Meta-train a residual adapter on top of the pre-trained embedding.
    Finetune,
    /// Meta-test accuracy of an embedding.
    Evaluate,
    /// Check that the meta-GLS risk is bounded by the global risk.
    VerifyTheory,
    /// Compare meta-GLS and pre-training across meta-training set sizes.
    RateStudy,
    /// Recover dataset-of-origin groups from the cluster co-occurrence graph.
    Domains,
    /// The whole pipeline, stage by stage.
    Run,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::InferLabels => "infer-labels",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::VerifyTheory => "verify-theory",
            Command::RateStudy => "rate-study",
            Command::Domains => "domains",
            Command::Run => "run",
        }
    }
}

/// Flags override values from the config file.
#[derive(Args)]
struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pruning aggressiveness.
    #[arg(long, global = true)]
    q: Option<f64>,
    #[arg(long, global = true)]
    v_init: Option<usize>,
    /// Rotation-augment the pre-training set.
    #[arg(long, global = true)]
    rotate: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte-Carlo draws.
    #[arg(long, global = true)]
    draws: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    t_grid: Option<Vec<usize>>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Episodic CSV of meta-training tasks.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Embedding CSV to use instead of the one in the output directory.
    #[arg(long, global = true)]
    embedding: Option<PathBuf>,
    /// Reuse persisted clusters instead of running label-inference sweeps.
    #[arg(long, global = true)]
    resume: bool,
}

impl Overrides {
    fn resolve(&self) -> mela::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.q {
            cfg.inference.q = v;
        }
        if let Some(v) = self.v_init {
            cfg.inference.v_init = v;
        }
        if self.rotate {
            cfg.pretrain.rotate_augment = true;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.draws {
            cfg.eval.draws = v;
        }
        if let Some(v) = &self.t_grid {
            cfg.rate_study.t_grid = v.clone();
        }
        if let Some(v) = self.jobs {
            cfg.jobs = Some(v);
        }
        if let Some(v) = &self.input {
            cfg.episodic = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(command: Command, cfg: &RunConfig, inputs: &Inputs) -> StageResult<()> {
    let report = |result: &Value| -> StageResult<()> {
        pipeline::write_report(cfg, command.name(), result)
            .and_then(|_| pipeline::write_metrics_csv(cfg, result))
            .map_err(|source| pipeline::StageError { stage: "report", source })
    };
    match command {
        Command::Simulate => report(&pipeline::simulate(cfg)?),
        Command::InferLabels => report(&pipeline::run_infer_labels(cfg, inputs)?),
        Command::Pretrain => report(&pipeline::run_pretrain(cfg, inputs)?),
        Command::Finetune => report(&pipeline::run_finetune(cfg, inputs)?),
        Command::Evaluate => report(&pipeline::run_evaluate(cfg, inputs)?),
        Command::VerifyTheory => report(&pipeline::run_verify_theory(cfg)?),
        Command::Domains => report(&pipeline::run_domains(cfg, inputs)?),
        Command::Run => report(&pipeline::run_pipeline(cfg, inputs)?),
        Command::RateStudy => {
            let rows = pipeline::run_rate_study(cfg)?;
            let value = serde_json::to_value(&rows).expect("rows serialise");
            pipeline::write_report(cfg, command.name(), &value)
                .and_then(|_| pipeline::write_rate_csv(cfg, &rows))
                .map_err(|source| pipeline::StageError { stage: "report", source })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match cli.overrides.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: bad configuration: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(jobs) = cfg.jobs {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let inputs = Inputs {
        embedding: cli.overrides.embedding.clone(),
        resume: cli.overrides.resume,
    };
    match execute(cli.command, &cfg, &inputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
