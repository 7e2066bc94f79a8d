//! Config-driven experiment stages shared by the command-line tool.
//!
//! Every stage is a pure function of the resolved config, its seed and the
//! files it reads, and writes its artifacts plus a `report.json` /
//! `report.csv` pair into the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augmentation::augment_rotations;
use crate::error::{MelaError, Result};
use crate::io;
use crate::label_inference::{
    assign_tasks, assignment_pairs, clustering_accuracy, infer_domains, label_dataset, learn_labeler, InferenceConfig,
    LabelAssignment, PruneMode,
};
use crate::learners::{
    softmax_train_joint, Builder, EvalConfig, LogisticConfig, OptimizerSettings, RidgeConfig, SoftmaxConfig,
};
use crate::representation::{meta_finetune_residual, meta_train_sim, EmbeddingModel, FinetuneConfig, LinearEmbedding, MetaTrainConfig};
use crate::rng::child_seed;
use crate::taskgen::{flatten, sample_meta_training_set, FlatDataset, MetaDistribution, PlantedSpec, Task};
use crate::theory_eval::{meta_test, rate_study, verify_theorem1, RateStudyConfig, RateStudyRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for MetaTrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSettings {
    pub v_init: usize,
    pub q: f64,
    pub max_sweeps: usize,
    pub prune_mode: PruneMode,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        let d = InferenceConfig::default();
        Self {
            v_init: d.v_init,
            q: d.q,
            max_sweeps: d.max_sweeps,
            prune_mode: d.prune_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub reg: f64,
    pub rotate_augment: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.5,
            reg: 1e-4,
            rotate_augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub learning_rate: f64,
    /// Adapter hidden width; the embedding dimension when unset.
    pub width: Option<usize>,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.01,
            width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Monte-Carlo draws for risk estimates.
    pub draws: usize,
    pub normalize: bool,
    /// Logistic inverse regularisation on a pre-trained embedding.
    pub c_inv_pretrained: f64,
    /// ... and on a fine-tuned one.
    pub c_inv_finetuned: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            draws: 2000,
            normalize: true,
            c_inv_pretrained: 1.0,
            c_inv_finetuned: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSettings {
    pub t_grid: Vec<usize>,
    pub seeds: usize,
}

impl Default for RateSettings {
    fn default() -> Self {
        Self {
            t_grid: vec![10, 40, 160],
            seeds: 20,
        }
    }
}

/// Every hyperparameter of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Generator used when no episodic file is given, and always by the
    /// theory commands.
    pub synthetic: PlantedSpec,
    /// Episodic CSV to read meta-training tasks from.
    pub episodic: Option<PathBuf>,
    /// Episodic CSV of meta-test tasks; synthetic runs draw fresh ones.
    pub test_episodic: Option<PathBuf>,
    /// Meta-training tasks drawn from the synthetic generator.
    pub tasks: usize,
    pub test_tasks: usize,
    /// Embedding dimension.
    pub p: usize,
    pub ridge_lambda: f64,
    pub meta_train: MetaTrainSettings,
    pub inference: InferenceSettings,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    pub eval: EvalSettings,
    pub rate_study: RateSettings,
    pub out: PathBuf,
    /// Worker threads; all cores when unset.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synthetic: PlantedSpec::default(),
            episodic: None,
            test_episodic: None,
            tasks: 200,
            test_tasks: 100,
            p: 16,
            ridge_lambda: 1e-3,
            meta_train: MetaTrainSettings::default(),
            inference: InferenceSettings::default(),
            pretrain: PretrainSettings::default(),
            finetune: FinetuneSettings::default(),
            eval: EvalSettings::default(),
            rate_study: RateSettings::default(),
            out: PathBuf::from("out"),
            jobs: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> MelaError {
    MelaError::InvalidConfig(msg.into())
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("test_tasks", self.test_tasks),
            ("p", self.p),
            ("eval.draws", self.eval.draws),
            ("rate_study.seeds", self.rate_study.seeds),
            ("inference.v_init", self.inference.v_init),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        let rates = [
            ("ridge_lambda", self.ridge_lambda),
            ("inference.q", self.inference.q),
            ("meta_train.learning_rate", self.meta_train.learning_rate),
            ("pretrain.learning_rate", self.pretrain.learning_rate),
            ("finetune.learning_rate", self.finetune.learning_rate),
            ("eval.c_inv_pretrained", self.eval.c_inv_pretrained),
            ("eval.c_inv_finetuned", self.eval.c_inv_finetuned),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.pretrain.reg >= 0.0) {
            return Err(invalid("pretrain.reg must be non-negative"));
        }
        let grid = &self.rate_study.t_grid;
        if grid.is_empty() || grid.contains(&0) || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("rate_study.t_grid must be positive and strictly increasing"));
        }
        if self.jobs == Some(0) {
            return Err(invalid("jobs must be at least 1"));
        }
        if self.pretrain.rotate_augment && (self.episodic.is_some() || self.synthetic.grid.is_none()) {
            return Err(invalid("rotation augmentation needs a synthetic source with `grid` set"));
        }
        for path in [&self.episodic, &self.test_episodic].into_iter().flatten() {
            if !path.is_file() {
                return Err(invalid(format!("input file {} does not exist", path.display())));
            }
        }
        MetaDistribution::planted(&self.synthetic).map(|_| ()).map_err(|e| invalid(format!("synthetic: {e}")))
    }

    pub fn meta_distribution(&self) -> Result<MetaDistribution> {
        MetaDistribution::planted(&self.synthetic)
    }

    fn ridge(&self) -> RidgeConfig {
        RidgeConfig {
            lambda: self.ridge_lambda,
            ..Default::default()
        }
    }

    fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            v_init: self.inference.v_init,
            q: self.inference.q,
            max_sweeps: self.inference.max_sweeps,
            prune_mode: self.inference.prune_mode,
            seed: child_seed(self.seed, Stream::Inference as u64),
            ..Default::default()
        }
    }

    fn softmax(&self) -> SoftmaxConfig {
        SoftmaxConfig {
            reg: self.pretrain.reg,
            joint: true,
            opt: OptimizerSettings {
                learning_rate: self.pretrain.learning_rate,
                steps: self.pretrain.steps,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Clone, Copy)]
enum Stream {
    TrainTasks = 1,
    TestTasks,
    MetaTrain,
    Inference,
    Finetune,
    Theory,
    Rate,
    Init,
}

/// A failure inside a named stage.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: MelaError,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait InStage<T> {
    fn stage(self, stage: &'static str) -> StageResult<T>;
}

impl<T> InStage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Extra inputs a command may be pointed at explicitly.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub embedding: Option<PathBuf>,
    /// Reuse persisted clusters instead of running sweeps.
    pub resume: bool,
}

pub fn train_tasks(cfg: &RunConfig) -> Result<Vec<Task>> {
    match &cfg.episodic {
        Some(path) => io::load(path, io::read_tasks),
        None => sample_meta_training_set(&cfg.meta_distribution()?, cfg.tasks, child_seed(cfg.seed, Stream::TrainTasks as u64)),
    }
}

pub fn test_tasks(cfg: &RunConfig) -> Result<Vec<Task>> {
    match (&cfg.test_episodic, &cfg.episodic) {
        (Some(path), _) => io::load(path, io::read_tasks),
        // no held-out file: score on the training episodes
        (None, Some(path)) => io::load(path, io::read_tasks),
        (None, None) => sample_meta_training_set(&cfg.meta_distribution()?, cfg.test_tasks, child_seed(cfg.seed, Stream::TestTasks as u64)),
    }
}

fn input_dim(tasks: &[Task]) -> Result<usize> {
    tasks
        .first()
        .and_then(Task::dim)
        .ok_or_else(|| MelaError::EmptyDataset("no meta-training tasks".into()))
}

fn load_embedding(path: &Path) -> Result<EmbeddingModel> {
    io::load(path, io::read_embedding)
}

/// The explicit `--embedding`, else `default` under the output directory
/// when it exists.
fn pick_embedding(cfg: &RunConfig, inputs: &Inputs, default: &str) -> Result<Option<EmbeddingModel>> {
    if let Some(path) = &inputs.embedding {
        return load_embedding(path).map(Some);
    }
    let path = cfg.path(default);
    if path.is_file() {
        load_embedding(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn linear(model: EmbeddingModel, what: &str) -> Result<LinearEmbedding> {
    match model {
        EmbeddingModel::Linear(e) => Ok(e),
        EmbeddingModel::Residual { .. } => Err(invalid(format!("{what} needs a linear embedding"))),
    }
}

// ---- stages ----

pub fn simulate(cfg: &RunConfig) -> StageResult<Value> {
    let tasks = train_tasks(cfg).stage("simulate")?;
    let path = cfg.path("tasks.csv");
    io::save(&path, |w| io::write_tasks(w, &tasks)).stage("simulate")?;
    Ok(json!({
        "tasks": tasks.len(),
        "dim": input_dim(&tasks).stage("simulate")?,
        "records": tasks.iter().map(Task::len).sum::<usize>(),
        "artifact": "tasks.csv",
    }))
}

pub fn rep_learn(cfg: &RunConfig, tasks: &[Task]) -> StageResult<(LinearEmbedding, Value)> {
    let train = MetaTrainConfig {
        learning_rate: cfg.meta_train.learning_rate,
        steps: cfg.meta_train.steps,
        ridge: cfg.ridge(),
        seed: child_seed(cfg.seed, Stream::MetaTrain as u64),
        ..Default::default()
    };
    let d = input_dim(tasks).stage("rep-learn")?;
    let (theta, outcome) = meta_train_sim(tasks, d, cfg.p, &train).stage("rep-learn")?;
    io::save(&cfg.path("embedding_sim.csv"), |w| io::write_embedding(w, &theta.clone().into())).stage("rep-learn")?;
    let report = json!({
        "initial_meta_loss": outcome.initial_loss(),
        "selected_meta_loss": outcome.selected_loss(),
        "selected_step": outcome.selected_step,
    });
    Ok((theta, report))
}

pub fn infer_labels(cfg: &RunConfig, tasks: &[Task], embedding: &EmbeddingModel, resume: bool) -> StageResult<(LabelAssignment, Value)> {
    const STAGE: &str = "infer-labels";
    let clusters_path = cfg.path("clusters.csv");
    let (state, assignment, sweeps) = if resume {
        let state = io::load(&clusters_path, io::read_clusters).stage(STAGE)?;
        let assignment = assign_tasks(tasks, embedding, &state).stage(STAGE)?;
        (state, assignment, 0)
    } else {
        let outcome = learn_labeler(tasks, embedding, &cfg.inference_config()).stage(STAGE)?;
        let sweeps = outcome.sweeps.len();
        (outcome.state, outcome.assignment, sweeps)
    };
    eprintln!("{STAGE}: {sweeps} sweeps executed{}", if resume { " (resumed)" } else { "" });
    if !resume {
        io::save(&clusters_path, |w| io::write_clusters(w, &state)).stage(STAGE)?;
    }
    io::save(&cfg.path("assignment.csv"), |w| io::write_assignment(w, &assignment)).stage(STAGE)?;
    let accuracy = if tasks.iter().all(|t| t.local_to_global.is_some()) && assignment.tasks_clustered() > 0 {
        Some(clustering_accuracy(&assignment_pairs(tasks, &assignment).stage(STAGE)?).stage(STAGE)?)
    } else {
        None
    };
    let report = json!({
        "clusters": state.num_clusters(),
        "sweeps_executed": sweeps,
        "tasks_clustered": assignment.tasks_clustered(),
        "tasks_discarded": assignment.tasks_discarded(),
        "clustering_accuracy": accuracy,
    });
    Ok((assignment, report))
}

fn training_set(cfg: &RunConfig, tasks: &[Task], assignment: Option<&LabelAssignment>) -> Result<FlatDataset> {
    let mut ds = match assignment {
        Some(a) => label_dataset(tasks, a)?,
        None => {
            let ds = flatten(tasks)?;
            if !ds.is_labeled() {
                return Err(invalid("pre-training without an assignment needs global labels"));
            }
            ds
        }
    };
    if cfg.pretrain.rotate_augment {
        let shape = cfg.synthetic.grid.ok_or_else(|| invalid("rotation needs a grid shape"))?;
        ds.samples.iter_mut().for_each(|s| s.shape = Some(shape));
        ds = augment_rotations(&ds)?;
    }
    Ok(ds)
}

pub fn pretrain(cfg: &RunConfig, tasks: &[Task], init: &LinearEmbedding, assignment: Option<&LabelAssignment>) -> StageResult<(LinearEmbedding, Value)> {
    const STAGE: &str = "pretrain";
    let ds = training_set(cfg, tasks, assignment).stage(STAGE)?;
    let fit = softmax_train_joint(&ds, init, &cfg.softmax()).stage(STAGE)?;
    let embedding = fit.embedding.clone().expect("joint fit returns an embedding");
    io::save(&cfg.path("classifier.csv"), |w| io::write_classifier(w, &fit.classifier)).stage(STAGE)?;
    io::save(&cfg.path("embedding_pre.csv"), |w| io::write_embedding(w, &embedding.clone().into())).stage(STAGE)?;
    let report = json!({
        "samples": ds.len(),
        "classes": ds.num_classes,
        "labels": if assignment.is_some() { "inferred" } else { "ground_truth" },
        "rotation_augmented": ds.augmented,
        "final_loss": fit.final_loss(),
        "steps_run": fit.trace.steps_run,
    });
    Ok((embedding, report))
}

pub fn finetune(cfg: &RunConfig, tasks: &[Task], g_pre: &LinearEmbedding) -> StageResult<(EmbeddingModel, Value)> {
    const STAGE: &str = "finetune";
    let ft = FinetuneConfig {
        width: cfg.finetune.width,
        train: MetaTrainConfig {
            learning_rate: cfg.finetune.learning_rate,
            steps: cfg.finetune.steps,
            ridge: cfg.ridge(),
            seed: child_seed(cfg.seed, Stream::Finetune as u64),
            eval_every: (cfg.finetune.steps / 10).max(1),
            ..Default::default()
        },
    };
    let outcome = meta_finetune_residual(g_pre, tasks, &ft).stage(STAGE)?;
    io::save(&cfg.path("embedding_final.csv"), |w| io::write_embedding(w, &outcome.model)).stage(STAGE)?;
    let report = json!({
        "initial_meta_loss": outcome.initial_loss(),
        "selected_meta_loss": outcome.selected_loss(),
        "selected_step": outcome.selected_step,
    });
    Ok((outcome.model, report))
}

/// Meta-test accuracy with ridge and logistic base learners.
pub fn evaluate(cfg: &RunConfig, tasks: &[Task], embedding: &EmbeddingModel) -> StageResult<Value> {
    const STAGE: &str = "evaluate";
    let eval = EvalConfig {
        normalize: cfg.eval.normalize,
    };
    let c_inv = match embedding {
        EmbeddingModel::Linear(_) => cfg.eval.c_inv_pretrained,
        EmbeddingModel::Residual { .. } => cfg.eval.c_inv_finetuned,
    };
    let logistic = LogisticConfig {
        c_inv,
        ..Default::default()
    };
    let ridge = meta_test(tasks, embedding, Builder::Ridge(cfg.ridge()), &eval).stage(STAGE)?;
    let logit = meta_test(tasks, embedding, Builder::Logistic(&logistic), &eval).stage(STAGE)?;
    Ok(json!({
        "tasks": tasks.len(),
        "ridge": { "mean": ridge.mean, "ci95": ridge.ci95 },
        "logistic": { "mean": logit.mean, "ci95": logit.ci95, "c_inv": c_inv },
    }))
}

pub fn run_infer_labels(cfg: &RunConfig, inputs: &Inputs) -> StageResult<Value> {
    let tasks = train_tasks(cfg).stage("load")?;
    let d = input_dim(&tasks).stage("load")?;
    let embedding = pick_embedding(cfg, inputs, "embedding_sim.csv")
        .stage("load")?
        .unwrap_or_else(|| EmbeddingModel::identity(d));
    Ok(infer_labels(cfg, &tasks, &embedding, inputs.resume)?.1)
}

pub fn run_pretrain(cfg: &RunConfig, inputs: &Inputs) -> StageResult<Value> {
    let tasks = train_tasks(cfg).stage("load")?;
    let d = input_dim(&tasks).stage("load")?;
    let init = match pick_embedding(cfg, inputs, "embedding_sim.csv").stage("load")? {
        Some(m) => linear(m, "pre-training").stage("load")?,
        None => LinearEmbedding::random(d, cfg.p, child_seed(cfg.seed, Stream::Init as u64)),
    };
    let assignment_path = cfg.path("assignment.csv");
    let assignment = if assignment_path.is_file() {
        Some(io::load(&assignment_path, io::read_assignment).stage("load")?)
    } else {
        None
    };
    Ok(pretrain(cfg, &tasks, &init, assignment.as_ref())?.1)
}

pub fn run_finetune(cfg: &RunConfig, inputs: &Inputs) -> StageResult<Value> {
    let tasks = train_tasks(cfg).stage("load")?;
    let g_pre = pick_embedding(cfg, inputs, "embedding_pre.csv")
        .stage("load")?
        .ok_or_else(|| invalid("finetune needs --embedding or a pre-trained embedding in the output directory"))
        .and_then(|m| linear(m, "fine-tuning"))
        .stage("load")?;
    Ok(finetune(cfg, &tasks, &g_pre)?.1)
}

pub fn run_evaluate(cfg: &RunConfig, inputs: &Inputs) -> StageResult<Value> {
    let tasks = test_tasks(cfg).stage("load")?;
    let d = input_dim(&tasks).stage("load")?;
    let embedding = pick_embedding(cfg, inputs, "embedding_final.csv")
        .stage("load")?
        .unwrap_or_else(|| EmbeddingModel::identity(d));
    evaluate(cfg, &tasks, &embedding)
}

/// Pre-trains jointly on ground-truth labels, then checks the GLS bound on
/// fresh draws from the synthetic generator.
pub fn run_verify_theory(cfg: &RunConfig) -> StageResult<Value> {
    const STAGE: &str = "verify-theory";
    let md = cfg.meta_distribution().stage(STAGE)?;
    let tasks = sample_meta_training_set(&md, cfg.tasks, child_seed(cfg.seed, Stream::TrainTasks as u64)).stage(STAGE)?;
    let init = LinearEmbedding::random(md.dim(), cfg.p, child_seed(cfg.seed, Stream::Init as u64));
    let (w, e) = crate::theory_eval::train_pretrain(&tasks, md.num_classes(), &init, &cfg.softmax()).stage(STAGE)?;
    let report = verify_theorem1(&md, &w, &e.into(), cfg.eval.draws, child_seed(cfg.seed, Stream::Theory as u64)).stage(STAGE)?;
    serde_json::to_value(report).map_err(MelaError::from).stage(STAGE)
}

pub fn run_rate_study(cfg: &RunConfig) -> StageResult<Vec<RateStudyRow>> {
    const STAGE: &str = "rate-study";
    let md = cfg.meta_distribution().stage(STAGE)?;
    let rc = RateStudyConfig {
        p: cfg.p,
        softmax: cfg.softmax(),
        draws: cfg.eval.draws,
        seed: child_seed(cfg.seed, Stream::Rate as u64),
    };
    rate_study(&md, &cfg.rate_study.t_grid, cfg.rate_study.seeds, &rc).stage(STAGE)
}

pub fn run_domains(cfg: &RunConfig, inputs: &Inputs) -> StageResult<Value> {
    const STAGE: &str = "domains";
    let tasks = train_tasks(cfg).stage("load")?;
    let d = input_dim(&tasks).stage("load")?;
    let embedding = pick_embedding(cfg, inputs, "embedding_sim.csv")
        .stage("load")?
        .unwrap_or_else(|| EmbeddingModel::identity(d));
    let outcome = learn_labeler(&tasks, &embedding, &cfg.inference_config()).stage(STAGE)?;
    let components = infer_domains(&outcome.assignment);
    Ok(json!({
        "domains": components.len(),
        "components": components,
        "clusters": outcome.state.num_clusters(),
        "tasks_discarded": outcome.assignment.tasks_discarded(),
    }))
}

/// RepLearn, LearnLabeler, Pretrain, MetaFinetune, Eval.
pub fn run_pipeline(cfg: &RunConfig, inputs: &Inputs) -> StageResult<Value> {
    let tasks = train_tasks(cfg).stage("load")?;
    let test = test_tasks(cfg).stage("load")?;
    let (g_sim, rep) = rep_learn(cfg, &tasks)?;
    let sim_model: EmbeddingModel = g_sim.clone().into();
    let (assignment, labels) = infer_labels(cfg, &tasks, &sim_model, inputs.resume)?;
    let (g_pre, pre) = pretrain(cfg, &tasks, &g_sim, Some(&assignment))?;
    let (g_final, ft) = finetune(cfg, &tasks, &g_pre)?;
    let eval = json!({
        "sim": evaluate(cfg, &test, &sim_model)?,
        "pretrained": evaluate(cfg, &test, &g_pre.into())?,
        "final": evaluate(cfg, &test, &g_final)?,
    });
    Ok(json!({
        "rep_learn": rep,
        "infer_labels": labels,
        "pretrain": pre,
        "finetune": ft,
        "evaluate": eval,
    }))
}

// ---- reports ----

/// `report.json`: the command, its seed, the resolved config and the result.
pub fn write_report(cfg: &RunConfig, command: &str, result: &Value) -> Result<()> {
    let report = json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg,
        "result": result,
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.path("report.json"), text)?;
    Ok(())
}

/// `report.csv` as `metric,value` rows with dotted paths.
pub fn write_metrics_csv(cfg: &RunConfig, result: &Value) -> Result<()> {
    let mut rows = Vec::new();
    flatten_json("", result, &mut rows);
    io::save(&cfg.path("report.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        for (k, v) in rows {
            w.write_record([k, v])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn flatten_json(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => map.iter().for_each(|(k, v)| flatten_json(&key(k), v, out)),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten_json(&key(&i.to_string()), v, out)),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), String::new())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// One row per grid point.
pub fn write_rate_csv(cfg: &RunConfig, rows: &[RateStudyRow]) -> Result<()> {
    io::save(&cfg.path("report.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["T", "N", "gls_risk", "gls_std_error", "pretrain_risk", "pretrain_std_error", "seeds_averaged"])?;
        for r in rows {
            w.write_record([
                r.t.to_string(),
                r.n.to_string(),
                r.gls_risk.value.to_string(),
                r.gls_risk.std_error.to_string(),
                r.pretrain_risk.value.to_string(),
                r.pretrain_risk.std_error.to_string(),
                r.seeds_averaged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}
