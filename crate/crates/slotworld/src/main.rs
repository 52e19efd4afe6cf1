//! Command-line entry point: exploration runs, task-phase training,
//! evaluation, episode rendering, and the full two-phase pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use slotworld::agent::{self, PredictorMode, RelationNet};
use slotworld::env::{Split, TaskSpec};
use slotworld::explorer::{
    default_deformation_reg, measure_hit_rate, uniform_hit_rate, ExplorationConfig,
};
use slotworld::harness::{
    self, load_exploration, record_trajectory, run_exploration, run_task, ExperimentConfig,
};
use slotworld::transition::LossMode;
use slotworld::Real;

#[derive(Parser)]
#[command(name = "slotworld", about = "Two-phase model-based RL on a click-and-push sprite world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reward-free exploration: train the transition model and the
    /// curiosity sampler, then write checkpoints and metrics.
    Explore(ExploreArgs),
    /// Task phase: train a reward or value predictor over frozen
    /// exploration checkpoints.
    Task(TaskArgs),
    /// Greedy evaluation of a trained task agent.
    Eval(EvalArgs),
    /// Render a greedy episode as PNG frames, a GIF, and a JSON-lines log.
    Render(RenderArgs),
    /// The full pipeline: explore, train on a task, evaluate both splits.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ExploreArgs {
    /// Total gradient steps across both networks.
    #[arg(long, default_value_t = 50_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transition loss: "pixel" or "matching".
    #[arg(long, default_value = "matching")]
    mode: String,
    /// Search/measurement action samples per report.
    #[arg(long, default_value_t = 10_000)]
    actors: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TaskArgs {
    #[command(flatten)]
    common: TaskCommonArgs,
    /// Episodes of task-phase training.
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Directory holding t_net.json / d_net.json.
    #[arg(long)]
    from: PathBuf,
    /// Output directory (defaults to --from).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TaskCommonArgs {
    /// Task name, e.g. goal_finding.shape, sorting, clustering.
    #[arg(long)]
    task: String,
    /// Episode distribution split: "train" or "robustness".
    #[arg(long, default_value = "train")]
    split: String,
    /// Predictor: "reward" or "value".
    #[arg(long, default_value = "reward")]
    mode: String,
    /// Sparse success-only reward (goal-finding variants).
    #[arg(long)]
    sparse: bool,
    /// Replace the learned proposal sampler with uniform draws.
    #[arg(long)]
    ablate_uniform_sampler: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: TaskCommonArgs,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Directory holding exploration checkpoints and task/<name>/predictor.json.
    #[arg(long)]
    from: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: TaskCommonArgs,
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: TaskCommonArgs,
    #[arg(long, default_value_t = 50_000)]
    explore_steps: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "robustness" => Ok(Split::Robustness),
        other => bail!("unknown split {other:?}; expected train|robustness"),
    }
}

fn parse_loss_mode(s: &str) -> anyhow::Result<LossMode> {
    match s {
        "pixel" => Ok(LossMode::Pixel),
        "matching" => Ok(LossMode::Matching),
        other => bail!("unknown loss mode {other:?}; expected pixel|matching"),
    }
}

fn parse_predictor_mode(s: &str) -> anyhow::Result<PredictorMode> {
    match s {
        "reward" => Ok(PredictorMode::Reward),
        "value" => Ok(PredictorMode::Value),
        other => bail!("unknown predictor mode {other:?}; expected reward|value"),
    }
}

fn experiment_config(
    common: &TaskCommonArgs,
    episodes: usize,
    explore_steps: Option<usize>,
) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default().with_seed(common.seed);
    config.task_name = common.task.clone();
    config.split = parse_split(&common.split)?;
    config.sparse = common.sparse;
    config.task.episodes = episodes;
    config.task.mode = parse_predictor_mode(&common.mode)?;
    config.task.ablate_uniform_sampler = common.ablate_uniform_sampler;
    if let Some(steps) = explore_steps {
        config.exploration.steps = steps;
    }
    Ok(config)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Explore(args) => {
            let mode = parse_loss_mode(&args.mode)?;
            let config = ExplorationConfig {
                steps: args.steps,
                seed: args.seed,
                mode,
                deformation_reg: default_deformation_reg(mode),
                ..Default::default()
            };
            let arts = run_exploration::<Real>(&config, &args.out)
                .context("exploration phase failed")?;
            let task = TaskSpec::by_name("exploration", Split::Train, false)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed.wrapping_add(7));
            let hit = measure_hit_rate(&arts.d_net, &task, args.actors, true, &mut rng);
            let base = uniform_hit_rate(&task, args.actors, &mut rng);
            println!(
                "exploration done: hit rate {hit:.4} vs uniform {base:.4} ({:.1}x); checkpoints in {}",
                hit / base.max(1e-9),
                args.out.display()
            );
        }
        Command::Task(args) => {
            let out = args.out.clone().unwrap_or_else(|| args.from.clone());
            let config = experiment_config(&args.common, args.episodes, None)?;
            let arts = load_exploration::<Real>(&args.from)?;
            let report = run_task(&config, &arts, &out).context("task phase failed")?;
            println!(
                "task {} done: train success {:.2}, robustness {:.2}, data efficiency {:?}",
                report.task, report.train_success, report.robustness_success,
                report.data_efficiency
            );
        }
        Command::Eval(args) => {
            let config = experiment_config(&args.common, 0, None)?;
            let arts = load_exploration::<Real>(&args.from)?;
            let predictor = load_predictor(&args.from, &args.common.task)?;
            let task = TaskSpec::by_name(&config.task_name, config.split, config.sparse)?;
            let rate = agent::evaluate(
                &predictor,
                &arts.t_net,
                &arts.d_net,
                &task,
                config.task.ablate_uniform_sampler,
                args.episodes,
                config.task.branching,
                config.seed.wrapping_add(0xea1),
            );
            println!("success rate over {} episodes: {rate:.3}", args.episodes);
        }
        Command::Render(args) => {
            let config = experiment_config(&args.common, 0, None)?;
            let arts = load_exploration::<Real>(&args.from)?;
            let predictor = load_predictor(&args.from, &args.common.task)?;
            let task = TaskSpec::by_name(&config.task_name, config.split, config.sparse)?;
            let trajectory = record_trajectory(
                &predictor,
                &arts,
                &task,
                config.task.branching,
                config.seed.wrapping_add(3),
            );
            harness::export_episode(&trajectory, &args.out)?;
            println!("exported {} steps to {}", trajectory.len(), args.out.display());
        }
        Command::Pipeline(args) => {
            let config =
                experiment_config(&args.common, args.episodes, Some(args.explore_steps))?;
            let report = harness::run_pipeline::<Real>(&config, &args.out)
                .context("pipeline failed")?;
            println!(
                "pipeline done: train success {:.2}, robustness {:.2}, data efficiency {:?}",
                report.train_success, report.robustness_success, report.data_efficiency
            );
        }
    }
    Ok(())
}

fn load_predictor(from: &PathBuf, task: &str) -> anyhow::Result<RelationNet<Real>> {
    let path = from.join("task").join(task).join("predictor.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("missing predictor checkpoint {}", path.display()))?;
    let ckpt: agent::RelationCheckpoint = serde_json::from_str(&text)?;
    Ok(RelationNet::from_checkpoint(&ckpt)?)
}
