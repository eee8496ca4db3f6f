//! Recipe execution. Every unit writes into its own directory under the
//! run directory, so an interrupted run resumes unit by unit.

use std::fs;
use std::path::{Path, PathBuf};

use relcomm::metrics::{metric_registry, MetricContext};
use relcomm::refgame::{self, simclr_pretrain, GameConfig, RunPaths};
use relcomm::scene::{split_combinations, DatasetRegime};
use relcomm::transfer::{run_transfer, steps_to_threshold, BaselineKind, TransferRow};
use relcomm::Error;
use relcomm_nn::{Checkpoint, ParamStore};

use crate::config::{ExperimentConfig, Recipe};
use crate::summary::{summarize, UnitResult, RESULT_FILE};

pub const RUNS_DIR_ENV: &str = "RELCOMM_RUNS_DIR";
pub const CONFIG_FILE: &str = "config.toml";

/// Where run directories go: the config's `out_dir`, else the
/// `RELCOMM_RUNS_DIR` environment variable, else `./runs`.
pub fn runs_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    runs_root(cfg).join(&cfg.name)
}

/// Game config of one (regime, seed) unit.
pub fn game_config(cfg: &ExperimentConfig, regime: DatasetRegime, seed: u64) -> GameConfig {
    GameConfig { regime, seed, ..cfg.game.clone() }
}

pub fn refgame_dir(run: &Path, regime: DatasetRegime, seed: u64) -> PathBuf {
    run.join("refgame").join(regime.name()).join(format!("seed{seed}"))
}

fn done(dir: &Path) -> bool {
    dir.join(RESULT_FILE).is_file()
}

/// Trains (or resumes) one referential-game unit and evaluates the
/// configured metrics on its final agents.
pub fn refgame_unit(cfg: &ExperimentConfig, run: &Path, regime: DatasetRegime, seed: u64) -> Result<UnitResult, Error> {
    let dir = refgame_dir(run, regime, seed);
    if done(&dir) {
        return UnitResult::load(&dir);
    }
    let game = game_config(cfg, regime, seed);
    let outcome = refgame::train(&game, Some(&RunPaths::new(&dir)), None)?;
    let mut result = UnitResult::new(format!("refgame/{regime}"), seed);
    if let Some(last) = outcome.metrics.last() {
        result.set("final_train_acc", last.train_acc);
        result.set("final_test_acc_fixed_pool", last.test_acc_fixed_pool.unwrap_or(f64::NAN));
        result.set("final_test_acc_random_pool", last.test_acc_random_pool.unwrap_or(f64::NAN));
    }
    let registry = metric_registry();
    let ctx = MetricContext { state: &outcome.state, game: &game, split: &outcome.split, probe: &cfg.probe, seed };
    for name in &cfg.metrics {
        let v = registry.get(name)?.evaluate(&ctx)?;
        result.set(name, if v.defined { v.value } else { f64::NAN });
    }
    result.save(&dir)?;
    Ok(result)
}

/// Contrastive pretraining, then the Random-regime game on the frozen encoder.
pub fn simclr_unit(cfg: &ExperimentConfig, run: &Path, seed: u64) -> Result<UnitResult, Error> {
    let dir = run.join("simclr").join(format!("seed{seed}"));
    if done(&dir) {
        return UnitResult::load(&dir);
    }
    fs::create_dir_all(&dir)?;
    let game = game_config(cfg, DatasetRegime::Random, seed);
    let split = split_combinations(seed);
    let encoder_path = dir.join("encoder.rlck");
    let encoder: ParamStore<f32> = if encoder_path.is_file() {
        Checkpoint::load(&encoder_path)?.model("encoder")?.clone()
    } else {
        let sc = relcomm::refgame::SimclrConfig { seed, ..cfg.simclr.clone() };
        let out = simclr_pretrain(&sc, &split.train)?;
        let mut ck = Checkpoint::new(serde_json::json!({ "encoder": out.encoder.spec() }), sc.steps, serde_json::json!({ "seed": seed }))
            .with_extra(serde_json::json!({ "config": sc, "losses": out.losses }));
        ck.add_model("encoder", &out.store);
        ck.save(&encoder_path)?;
        out.store
    };
    let outcome = refgame::train(&game, Some(&RunPaths::new(dir.join("game"))), Some(&encoder))?;
    let mut result = UnitResult::new("simclr/random", seed);
    if let Some(last) = outcome.metrics.last() {
        result.set("final_train_acc", last.train_acc);
        result.set("final_test_acc_random_pool", last.test_acc_random_pool.unwrap_or(f64::NAN));
    }
    result.save(&dir)?;
    Ok(result)
}

/// Mean episodic reward over the last `k` Listener windows.
pub fn final_reward(rows: &[TransferRow], k: usize) -> f64 {
    let tail: Vec<f64> =
        rows.iter().filter(|r| r.phase == "listener").filter_map(|r| r.mean_ep_reward).rev().take(k).collect();
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn transfer_unit(cfg: &ExperimentConfig, run: &Path, kind: BaselineKind, seed: u64) -> Result<UnitResult, Error> {
    let dir = run.join("transfer").join(kind.name()).join(format!("seed{seed}"));
    if done(&dir) {
        return UnitResult::load(&dir);
    }
    let mut tc = cfg.transfer.clone();
    tc.kind = kind;
    tc.seed = seed;
    if cfg.recipe == Recipe::Full {
        tc.speaker_checkpoint = Some(refgame_dir(run, DatasetRegime::Random, seed).join("final.rlck"));
    }
    let outcome = run_transfer(&tc, Some(&dir))?;
    let mut result = UnitResult::new(format!("transfer/{kind}"), seed);
    result.set("final_reward", final_reward(&outcome.rows, 5));
    for thr in [0.8, 0.85] {
        let steps = steps_to_threshold(&outcome.rows, thr).map_or(f64::NAN, |s| s as f64);
        result.set(&format!("steps_to_{thr}"), steps);
    }
    if let Some(same) = outcome.source_unchanged() {
        result.set("source_unchanged", f64::from(u8::from(same)));
    }
    result.save(&dir)?;
    Ok(result)
}

fn run_units(cfg: &ExperimentConfig, run: &Path) -> Result<(), Error> {
    let refgame = matches!(cfg.recipe, Recipe::Refgame | Recipe::Full);
    let simclr = matches!(cfg.recipe, Recipe::Simclr | Recipe::Full);
    let transfer = matches!(cfg.recipe, Recipe::Transfer | Recipe::Full);
    for &seed in &cfg.seeds {
        if refgame {
            for &regime in &cfg.regimes {
                refgame_unit(cfg, run, regime, seed)?;
            }
        }
        if simclr {
            simclr_unit(cfg, run, seed)?;
        }
        if transfer {
            if cfg.recipe == Recipe::Full {
                // Transfer reads the Random-regime Speaker of this seed.
                refgame_unit(cfg, run, DatasetRegime::Random, seed)?;
            }
            for &kind in &cfg.baselines {
                transfer_unit(cfg, run, kind, seed)?;
            }
        }
    }
    Ok(())
}

/// Runs the recipe for every seed inside `run_dir(cfg)` and writes
/// `summary.json`. A directory holding a different config is refused;
/// the same config resumes. Units finished before an error keep their
/// results and appear in the summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    cfg.validate()?;
    let run = run_dir(cfg);
    fs::create_dir_all(&run)?;
    let text = cfg.to_toml();
    let cfg_path = run.join(CONFIG_FILE);
    if cfg_path.is_file() {
        if fs::read_to_string(&cfg_path)? != text {
            return Err(Error::Invalid(format!("{} holds a run with a different config", run.display())));
        }
    } else {
        fs::write(&cfg_path, &text)?;
    }
    let outcome = run_units(cfg, &run);
    summarize(&run)?;
    outcome.map(|_| run)
}
