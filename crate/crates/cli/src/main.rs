//! `tenet`: dataset generation, training, evaluation, benchmarking and
//! experiment recipes.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or input,
//! 3 training diverged (last good checkpoint written), 4 missing artifact.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tenet_core::baselines::{expert_prompts, BaselineModel};
use tenet_core::checkpoint::{Checkpoint, ModelKind};
use tenet_core::config::RunConfig;
use tenet_core::controller::{mlp_controller, ControllerFile, Precision};
use tenet_core::dataset::{load_dataset, save_dataset, split_tasks, generate_dataset};
use tenet_core::envs::{veltrack_ood_task, Family, Level, RegistryKind, TaskSpec};
use tenet_core::eval::{
    evaluate, instantiate, write_csv_rows, BaselineFactory, EvalSplit, FileFactory, TenetFactory,
};
use tenet_core::experiments::{
    compare_arms, paraphrase_experiment, task_scaling, velocity_experiment, Arm, Recipe,
};
use tenet_core::latency::{bench_controller, time_calls};
use tenet_core::model::Variant;
use tenet_core::text::{ProviderSpec, TextEncoder};
use tenet_core::train::{resume, train_learner, write_loss_csv, Learner, RunMeta};
use tenet_core::{Error, Result, TenetModel};

#[derive(Parser)]
#[command(name = "tenet", version, about = "Text-conditioned hypernetwork policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline demonstration dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint or controller file closed-loop.
    Eval(EvalArgs),
    /// Time single-state controller forward passes.
    Bench(BenchArgs),
    /// Build a policy from a description alone.
    Instantiate(InstantiateArgs),
    /// Run a multi-training experiment recipe.
    Experiment(ExperimentArgs),
}

/// Config file plus flag overrides; flags win.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task registry: veltrack, switchworld10, switchworld50, pointgoal2d-N.
    #[arg(long)]
    family: Option<RegistryKind>,
    /// Seed for initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of dataset generation.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Demonstrations per task.
    #[arg(long)]
    k: Option<usize>,
    /// Descriptions per task and level.
    #[arg(long)]
    m: Option<usize>,
    /// TeNet grounding: direct, mse or contrastive.
    #[arg(long)]
    variant: Option<Variant>,
    /// Model: tenet, bc-shared, traj-hn or prompt-concat.
    #[arg(long)]
    kind: Option<ModelKind>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Tasks per training step.
    #[arg(long)]
    batch: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    beta: Option<f64>,
    /// Grounding loss weight.
    #[arg(long)]
    lambda_g: Option<f64>,
    /// Evaluation episodes per task and seed.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Number of seeds (0, 1, ..., N-1).
    #[arg(long)]
    seeds: Option<u64>,
    /// Description level used to instantiate policies.
    #[arg(long)]
    level: Option<Level>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Embedding table (NDJSON) instead of the hash embedder.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.family {
            c.data.registry = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.data_seed {
            c.data.seed = v;
        }
        if let Some(v) = self.k {
            c.data.k = v;
        }
        if let Some(v) = self.m {
            c.data.m = v;
        }
        if let Some(v) = self.variant {
            c.model.variant = v;
        }
        if let Some(v) = self.kind {
            c.kind = v;
        }
        if let Some(v) = self.steps {
            c.train.steps = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.batch {
            c.train.batch_tasks = Some(v);
        }
        if let Some(v) = self.beta {
            c.model.beta = v;
        }
        if let Some(v) = self.lambda_g {
            c.model.lambda_g = v;
        }
        if let Some(v) = self.rollouts {
            c.eval.rollouts = v;
        }
        if let Some(n) = self.seeds {
            c.eval.seeds = (0..n).collect();
        }
        if let Some(v) = self.level {
            c.eval.level = v;
        }
        if let Some(v) = self.precision {
            c.eval.precision = v.into();
        }
        if let Some(p) = &self.table {
            c.provider = ProviderSpec::Table { path: p.clone() };
        }
        if let Some(v) = &self.out {
            c.output = v.clone();
        }
        let mut c = c.resolved();
        if let ProviderSpec::Table { .. } = c.provider {
            c.model.d_z = c.provider.build()?.dim();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory written by `tenet gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from this checkpoint up to the configured step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, conflicts_with = "controller")]
    checkpoint: Option<PathBuf>,
    /// Standalone controller file written by `tenet instantiate --out`.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Evaluate prompt-conditioned baselines without prompts.
    #[arg(long)]
    no_prompts: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "controller")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Description to instantiate when benchmarking a checkpoint.
    #[arg(long)]
    description: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    iterations: usize,
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
    /// Write the report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InstantiateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    description: String,
    /// Serialize the generated policy to a standalone controller file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Task the description refers to, recorded in the controller file.
    #[arg(long)]
    task_id: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentName {
    Scaling,
    Paraphrase,
    Velocity,
    Baselines,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    name: ExperimentName,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Registry sizes for the scaling recipe.
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
    sizes: Vec<usize>,
    /// Models for the baselines recipe.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<Arm>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Instantiate(a) => cmd_instantiate(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            std::fs::create_dir_all(d)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn splits_for(c: &RunConfig) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    let tasks = c.data.registry.build(c.data.registry_seed)?;
    split_tasks(&tasks, c.split.holdout, c.split.seed)
}

fn data_dir(c: &RunConfig) -> PathBuf {
    c.output.join("data")
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let c = a.cfg.resolve()?;
    let dir = data_dir(&c);
    if dir.join("manifest.json").exists() && !a.force {
        return Err(Error::Exists(dir));
    }
    let (train, _) = splits_for(&c)?;
    let ds = generate_dataset(&train, c.data.k, c.data.m, &c.data.levels, c.data.seed)?;
    let manifest = save_dataset(&ds, &dir, &c.data.registry.to_string(), &c.data_hash()?, a.force)?;
    c.write_effective(&dir)?;
    println!(
        "wrote {} tasks x {} demonstrations x {} descriptions/level to {}",
        manifest.tasks.len(),
        manifest.k,
        manifest.m,
        dir.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let c = a.cfg.resolve()?;
    let Some(data) = a.data.clone() else {
        return Err(Error::Config("--data <DIR> is required (a dataset written by `tenet gen`)".into()));
    };
    let (ds, manifest) = load_dataset(&data)?;
    if manifest.config_hash != c.data_hash()? {
        return Err(Error::Incompatible(format!(
            "dataset {} was generated with different data settings than this config",
            data.display()
        )));
    }
    let ckpt_path = c.output.join("model.ckpt");
    if ckpt_path.exists() && !a.force {
        return Err(Error::Exists(ckpt_path));
    }
    let encoder = c.provider.build()?;
    let meta = RunMeta {
        run_config: serde_json::to_value(&c)?,
        config_hash: c.config_hash()?,
        seed: c.seed,
    };
    let result = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.kind != c.kind || ck.model_config != c.model {
                return Err(Error::Incompatible(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            resume(&ck, &c.train, &ds, encoder.as_ref(), &meta)
        }
        None => match c.kind {
            ModelKind::Tenet => {
                let m = TenetModel::init(c.model.clone(), c.seed)?;
                train_learner(m, &c.train, &ds, encoder.as_ref(), &meta)
            }
            kind => {
                let m = BaselineModel::init(kind, c.model.clone(), c.seed)?;
                train_learner(m, &c.train, &ds, encoder.as_ref(), &meta)
            }
        },
    };
    c.write_effective(&c.output)?;
    let out = match result {
        Ok(o) => o,
        Err(Error::NanAbort {
            step,
            diagnostic,
            last_good,
        }) => {
            let p = c.output.join("last_good.ckpt");
            last_good.save(&p)?;
            eprintln!("wrote last good checkpoint to {}", p.display());
            return Err(Error::NanAbort {
                step,
                diagnostic,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    out.checkpoint.save(&ckpt_path)?;
    write_loss_csv(&c.output.join("loss.csv"), &out.log)?;
    let last = out.log.last().expect("log has a closing row");
    println!(
        "trained {} for {} steps: final loss {:.6} (bc {:.6}); checkpoint {}",
        c.kind,
        out.checkpoint.steps,
        last.total,
        last.bc,
        ckpt_path.display()
    );
    Ok(())
}

/// The run configuration stored in a checkpoint, with eval settings taken
/// from the command line when given.
fn config_from_checkpoint(ck: &Checkpoint, flags: &ConfigArgs) -> Result<RunConfig> {
    let mut c: RunConfig = serde_json::from_value(ck.run_config.clone())
        .map_err(|e| Error::Incompatible(format!("checkpoint carries no usable run config: {e}")))?;
    if c.config_hash()? != ck.config_hash {
        return Err(Error::Incompatible("checkpoint config hash does not match its stored config".into()));
    }
    if let Some(v) = flags.rollouts {
        c.eval.rollouts = v;
    }
    if let Some(n) = flags.seeds {
        c.eval.seeds = (0..n).collect();
    }
    if let Some(v) = flags.level {
        c.eval.level = v;
    }
    if let Some(v) = flags.precision {
        c.eval.precision = v.into();
    }
    if let Some(v) = &flags.out {
        c.output = v.clone();
    }
    if let Some(p) = &flags.table {
        c.provider = ProviderSpec::Table { path: p.clone() };
    }
    Ok(c)
}

fn eval_splits(c: &RunConfig) -> Result<Vec<EvalSplit>> {
    let (train, test) = splits_for(c)?;
    let mut splits = vec![EvalSplit::new("train", train)];
    if !test.is_empty() {
        splits.push(EvalSplit::new("test", test));
    }
    if c.data.registry.family() == Family::VelTrack1D {
        splits.push(EvalSplit::new("ood", vec![veltrack_ood_task(10_000, c.data.registry_seed)]));
    }
    Ok(splits)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (c, report) = match (&a.checkpoint, &a.controller) {
        (Some(p), _) => {
            let ck = Checkpoint::load(p)?;
            let c = config_from_checkpoint(&ck, &a.cfg)?;
            let encoder = c.provider.build()?;
            let splits = eval_splits(&c)?;
            let all: Vec<TaskSpec> = splits.iter().flat_map(|s| s.tasks.clone()).collect();
            let report = match ck.kind {
                ModelKind::Tenet => {
                    let model = ck.to_tenet()?;
                    let f = TenetFactory {
                        model: &model,
                        encoder: encoder.as_ref(),
                        level: c.eval.level,
                        precision: c.eval.precision,
                    };
                    evaluate(&f, &splits, c.eval.rollouts, &c.eval.seeds, &ck.config_hash)?
                }
                _ => {
                    let model = BaselineModel::from_checkpoint(&ck)?;
                    let prompts = if a.no_prompts {
                        None
                    } else {
                        Some(expert_prompts(&all, c.eval.prompt_seed)?)
                    };
                    let f = BaselineFactory {
                        model: &model,
                        prompts: prompts.as_ref(),
                        precision: c.eval.precision,
                    };
                    evaluate(&f, &splits, c.eval.rollouts, &c.eval.seeds, &ck.config_hash)?
                }
            };
            (c, report)
        }
        (None, Some(p)) => {
            let file = ControllerFile::load(p)?;
            let c = a.cfg.resolve()?;
            let splits: Vec<EvalSplit> = match file.task_id {
                Some(id) => {
                    let task = c
                        .data
                        .registry
                        .build(c.data.registry_seed)?
                        .into_iter()
                        .find(|t| t.id == id)
                        .ok_or_else(|| Error::Config(format!("task {id} is not in registry {}", c.data.registry)))?;
                    vec![EvalSplit::new("task", vec![task])]
                }
                None => eval_splits(&c)?,
            };
            let f = FileFactory {
                file: &file,
                precision: c.eval.precision,
            };
            let report = evaluate(&f, &splits, c.eval.rollouts, &c.eval.seeds, &file.config_hash)?;
            (c, report)
        }
        (None, None) => return Err(Error::Config("pass --checkpoint or --controller".into())),
    };
    std::fs::create_dir_all(&c.output)?;
    report.write_json(&c.output.join("eval.json"))?;
    report.write_csv(&c.output.join("eval.csv"))?;
    c.write_effective(&c.output)?;
    for s in &report.splits {
        println!(
            "{:>6}: success {:.3} (seed std {:.3}) over {} rollouts, mean return {:.3}, non-finite {}",
            s.split, s.success_rate, s.success_std_over_seeds, s.rollouts, s.mean_return, s.non_finite
        );
    }
    Ok(())
}

fn encoder_for(ck: &Checkpoint) -> Result<Box<dyn TextEncoder>> {
    let provider = serde_json::from_value::<RunConfig>(ck.run_config.clone())
        .map(|c| c.provider)
        .unwrap_or(ProviderSpec::Hash {
            dim: ck.model_config.d_z,
        });
    provider.build()
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let precision: Precision = a.precision.into();
    let mut report = match (&a.checkpoint, &a.controller) {
        (_, Some(p)) => {
            let file = ControllerFile::load(p)?;
            let mut ctl = file.controller(precision)?;
            bench_controller(ctl.as_mut(), precision, a.iterations)?
        }
        (Some(p), None) => {
            let ck = Checkpoint::load(p)?;
            let model = ck.to_tenet()?;
            let encoder = encoder_for(&ck)?;
            let text = a
                .description
                .clone()
                .ok_or_else(|| Error::Config("--description is required with --checkpoint".into()))?;
            let params = instantiate(&model, &text, encoder.as_ref())?;
            let inst = time_calls(200, || instantiate(&model, &text, encoder.as_ref()).map(|_| ()))?;
            let mut ctl = mlp_controller(params, precision);
            let mut r = bench_controller(ctl.as_mut(), precision, a.iterations)?;
            r.instantiation = Some(inst);
            r
        }
        (None, None) => return Err(Error::Config("pass --checkpoint or --controller".into())),
    };
    report.forward.iterations = a.iterations;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    println!(
        "params {} | {} | median {:.0} ns | p99 {:.0} ns | {:.0} Hz | {} x{}",
        report.param_count,
        report.precision,
        report.forward.median_ns,
        report.forward.p99_ns,
        report.hz,
        report.machine.cpu,
        report.machine.logical_cpus
    );
    if let Some(i) = &report.instantiation {
        println!("instantiation median {:.0} ns", i.median_ns);
    }
    Ok(())
}

fn cmd_instantiate(a: InstantiateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.kind != ModelKind::Tenet {
        return Err(Error::Incompatible(format!(
            "{} policies are not instantiated from text",
            ck.kind
        )));
    }
    let model = ck.to_tenet()?;
    let encoder = encoder_for(&ck)?;
    let params = instantiate(&model, &a.description, encoder.as_ref())?;
    let norm = params.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("description: {}", a.description);
    let layers: Vec<String> = params
        .manifest()
        .layers()
        .iter()
        .map(|l| format!("{}x{} {}", l.output, l.input, l.activation))
        .collect();
    println!("policy: {} parameters [{}], L2 norm {:.6}", params.len(), layers.join(", "), norm);
    if let Some(out) = &a.out {
        let mut file = ControllerFile::from_params(params, ModelKind::Tenet, &ck.config_hash);
        file.description = Some(a.description.clone());
        file.task_id = a.task_id;
        file.save(out)?;
        println!("controller written to {}", out.display());
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let c = a.cfg.resolve()?;
    let recipe = Recipe::from_run_config(&c);
    let out = &c.output;
    std::fs::create_dir_all(out)?;
    c.write_effective(out)?;
    match a.name {
        ExperimentName::Scaling => {
            let t = task_scaling(&a.sizes, c.model.variant, &recipe)?;
            write_json(&out.join("scaling.json"), &t)?;
            write_csv_rows(&out.join("scaling.csv"), &t.summary)?;
            write_csv_rows(&out.join("scaling_runs.csv"), &t.rows)?;
            for s in &t.summary {
                println!("{:>4} tasks: held-out success {:.3} ± {:.3}", s.size, s.test_success, s.test_success_std);
            }
        }
        ExperimentName::Velocity => {
            let curve = velocity_experiment(c.model.variant, &recipe)?;
            write_json(&out.join("velocity.json"), &curve)?;
            write_csv_rows(&out.join("velocity.csv"), &curve)?;
            for p in &curve {
                println!(
                    "target {:.3}: achieved {:.3} ± {:.3}",
                    p.target, p.achieved_mean, p.achieved_std
                );
            }
        }
        ExperimentName::Paraphrase => {
            let mut providers = vec![("hash".to_string(), ProviderSpec::Hash { dim: c.model.d_z })];
            if let ProviderSpec::Table { path } = &c.provider {
                providers.push(("table".to_string(), ProviderSpec::Table { path: path.clone() }));
            }
            let rows = paraphrase_experiment(c.data.registry, c.model.variant, &Level::ALL, &providers, &recipe)?;
            write_json(&out.join("paraphrase.json"), &rows)?;
            write_csv_rows(&out.join("paraphrase.csv"), &rows)?;
            for r in &rows {
                println!("{} {}: success {:.3}", r.provider, r.level, r.success_rate);
            }
        }
        ExperimentName::Baselines => {
            let arms = a.models.clone().unwrap_or_else(|| Arm::ALL.to_vec());
            let tasks = c.data.registry.build(c.data.registry_seed)?;
            let (cmp, _) = compare_arms(&arms, &recipe, &tasks, &[], true)?;
            write_json(&out.join("baselines.json"), &cmp)?;
            write_csv_rows(&out.join("baselines.csv"), &cmp.rows)?;
            for s in &cmp.summary {
                println!(
                    "{:>22}: train success {:.3} ± {:.3} ({} trainable params)",
                    s.model, s.train_success, s.train_success_std, s.trainable_params
                );
            }
        }
    }
    Ok(())
}
