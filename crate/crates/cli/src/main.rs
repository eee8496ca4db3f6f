use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relcomm::metrics::{metric_registry, MetricContext};
use relcomm::refgame::{self, load_game_checkpoint, simclr_pretrain, RunPaths};
use relcomm::rng::indexed_stream;
use relcomm::scene::{dump_dataset, enumerate_combinations, render, split_combinations, DatasetRegime};
use relcomm::transfer::{run_transfer, BaselineKind, Task};
use relcomm_cli::{load_config, run_experiment, summarize, ExperimentConfig};
use relcomm_nn::Checkpoint;

#[derive(Parser)]
#[command(name = "relcomm", about = "Emergent communication about positional relations", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, shared by the training commands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config; defaults apply to every key it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set game.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<ExperimentConfig> {
        let mut all = self.overrides.clone();
        all.extend(extra);
        Ok(load_config(self.config.as_deref(), &all)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render images per combination as PNGs plus a manifest.
    GenDataset {
        #[arg(long, default_value = "random")]
        regime: DatasetRegime,
        /// Images per combination (the fixed regime always writes one).
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train Speaker and Listener in the referential game.
    TrainRefgame {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        regime: Option<DatasetRegime>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Run directory; resumes from its checkpoint when present.
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining of the image encoder.
    PretrainSimclr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate metrics on a game checkpoint; appends rows to a CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated metric names.
        #[arg(long, default_value = "accuracy,topsim,visual-probe,etl", value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
    },
    /// Print the greedy message for fresh renders as JSON lines.
    Speak {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Renders per combination.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a placement Listener with PPO under one condition.
    TrainTransfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kind: Option<BaselineKind>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        speaker_checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full recipe over all configured seeds.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rebuild `summary.json` from a run directory's unit results.
    Summarize { run_dir: PathBuf },
}

fn opt(key: &str, value: Option<impl ToString>) -> Option<String> {
    value.map(|v| format!("{key}={}", v.to_string()))
}

fn quoted(key: &str, value: Option<impl std::fmt::Display>) -> Option<String> {
    value.map(|v| format!("{key}=\"{v}\""))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("experiment.toml"), cfg.to_toml())?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenDataset { regime, count, image_size, seed, out } => {
            let generator = relcomm::scene::GeneratorConfig::with_size(image_size);
            let entries = dump_dataset(regime, generator, count, seed, &out)?;
            println!("wrote {} images to {}", entries.len(), out.display());
        }
        Command::TrainRefgame { cfg, regime, seed, steps, out } => {
            let extra = [quoted("game.regime", regime), opt("game.seed", seed), opt("game.total_steps", steps)];
            let exp = cfg.load(extra.into_iter().flatten().collect())?;
            write_config(&out, &exp)?;
            let outcome = refgame::train(&exp.game, Some(&RunPaths::new(&out)), None)?;
            if let Some(last) = outcome.metrics.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::PretrainSimclr { cfg, seed, steps, out } => {
            let extra = [opt("simclr.seed", seed), opt("simclr.steps", steps)];
            let exp = cfg.load(extra.into_iter().flatten().collect())?;
            write_config(&out, &exp)?;
            let split = split_combinations(exp.simclr.seed);
            let outcome = simclr_pretrain(&exp.simclr, &split.train)?;
            let arch = serde_json::json!({ "encoder": outcome.encoder.spec() });
            let mut ck = Checkpoint::new(arch, exp.simclr.steps, serde_json::json!({ "seed": exp.simclr.seed }))
                .with_extra(serde_json::json!({ "config": exp.simclr, "losses": outcome.losses }));
            ck.add_model("encoder", &outcome.store);
            ck.save(&out.join("encoder.rlck"))?;
            println!("final loss {:.4}", outcome.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Evaluate { checkpoint, metrics, seed, cfg, out } => {
            let exp = cfg.load(Vec::new())?;
            let (game, state) = load_game_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let split = split_combinations(game.seed);
            let registry = metric_registry();
            let ctx = MetricContext { state: &state, game: &game, split: &split, probe: &exp.probe, seed };
            let fresh = !out.exists();
            let mut file = OpenOptions::new().create(true).append(true).open(&out)?;
            if fresh {
                writeln!(file, "checkpoint,step,seed,metric,value,defined")?;
            }
            for name in &metrics {
                let v = registry.get(name)?.evaluate(&ctx)?;
                writeln!(file, "{},{},{seed},{name},{},{}", checkpoint.display(), state.step, v.value, v.defined)?;
                println!("{name}: {} ({})", v.value, if v.defined { "defined" } else { "undefined" });
            }
        }
        Command::Speak { checkpoint, count, seed } => {
            let (game, state) = load_game_checkpoint(&checkpoint)?;
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for c in enumerate_combinations() {
                let mut rng = indexed_stream(seed, "speak", c.index() as u64);
                for i in 0..count {
                    let (img, _) = render(c, &mut rng, &game.generator)?;
                    let msg = state.speaker.speak(&[&img]).pop().expect("one message");
                    let line = serde_json::json!({
                        "combination": c.label(),
                        "render": i,
                        "message": msg.symbols(),
                    });
                    writeln!(out, "{line}")?;
                }
            }
        }
        Command::TrainTransfer { cfg, kind, task, speaker_checkpoint, seed, steps, out } => {
            let extra = [
                quoted("transfer.kind", kind),
                quoted("transfer.task", task.map(|t| if t == Task::Multi { "multi" } else { "single" })),
                speaker_checkpoint.map(|p| format!("transfer.speaker_checkpoint={}", toml_string(&p))),
                opt("transfer.seed", seed),
                opt("transfer.ppo.total_steps", steps),
            ];
            let exp = cfg.load(extra.into_iter().flatten().collect())?;
            write_config(&out, &exp)?;
            let outcome = run_transfer(&exp.transfer, Some(&out))?;
            if let Some(last) = outcome.rows.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::Run { cfg } => {
            let exp = cfg.load(Vec::new())?;
            let dir = run_experiment(&exp)?;
            println!("{}", dir.join("summary.json").display());
        }
        Command::Summarize { run_dir } => {
            if !run_dir.is_dir() {
                bail!("{} is not a run directory", run_dir.display());
            }
            let summary = summarize(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}
