//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 7 and 9 train desk-scale agents. Their runs live under
//! `RELCOMM_ACCEPTANCE_DIR` (default `target/acceptance`), in directories
//! named after a hash of the run config, so a finished run is reused and an
//! interrupted one resumes. A cold start takes hours.
//!
//! Red criteria are reported, not hidden; the process exits non-zero on a
//! red criterion only when `RELCOMM_ACCEPTANCE_STRICT=1`.
//! `RELCOMM_ACCEPTANCE_ONLY=1,2,8` runs a subset.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relcomm::agents::{AgentConfig, CandidateLayout, Decode, ListenerNet, Message, SpeakerNet};
use relcomm::csvlog::read_rows;
use relcomm::gridworld::{relation_satisfied, reset, step, Direction, GridConfig, GridState, PlacementAction, Pos};
use relcomm::metrics::{levenshtein, metric_registry, spearman, topsim_of, tuple_distance, MetricContext};
use relcomm::refgame::{evaluate, load_game_checkpoint, GameConfig, GameState};
use relcomm::rng::stream;
use relcomm::scene::{enumerate_combinations, render, split_combinations, Combination, DatasetRegime, GeneratorConfig, Relation};
use relcomm::transfer::{steps_to_threshold, BaselineKind, TransferRow};
use relcomm_cli::{parse_config, run_experiment, ExperimentConfig, UnitResult};
use relcomm_nn::{grad_check, Checkpoint, Conv2dSpec, Coverage, Encoder, EncoderSpec, Graph, LstmCell, Linear, NodeId, ParamStore, Tensor};

// Thresholds.
const GEOMETRY_RENDERS: usize = 10_000;
const CHANCE_EPISODES: usize = 2000;
const CHANCE_CANDIDATES: usize = 20;
const CHANCE_TOL: f64 = 0.015;
const GRAD_TOL: f64 = 1e-4;
const TOPSIM_COMPOSITIONAL_MIN: f64 = 0.9;
const ORDERING_MARGIN: f64 = 0.15;
const ABOVE_CHANCE_MARGIN: f64 = 0.25;
const ETL_MARGIN: f64 = 0.20;
const DESK_MAX_STEPS: u64 = 50_000;
const TRANSFER_BUDGET: u64 = 300_000;
const TRANSFER_SOLVED: f64 = 0.85;
const RAW_PIXEL_CEILING: f64 = 0.5;

/// Desk-scale referential game: 64 px images, three regimes, three seeds.
const DESK_REFGAME: &str = r#"
name = "desk-refgame"
recipe = "refgame"
image_size = 64
regimes = ["fixed", "variation", "random"]
seeds = [0, 1, 2]
metrics = ["accuracy"]

[game]
lr = 3e-4
batch_size = 32
train_candidates = 32
candidate_mode = "in_batch"
total_steps = 8000
eval_every = 1000
eval_episodes = 500
checkpoint_every = 1000
"#;

const DESK_TRANSFER: &str = r#"
name = "desk-transfer"
recipe = "transfer"
image_size = 64
seeds = [0]
baselines = ["state", "raw-pixel", "emergent-language"]

[transfer.ppo]
total_steps = 300000
"#;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict, String> {
    Ok(Verdict { pass, detail: detail.into() })
}

struct Report {
    lines: Vec<(usize, bool)>,
    /// From `RELCOMM_ACCEPTANCE_ONLY`, e.g. `1,2,8`.
    only: Option<Vec<usize>>,
}

impl Report {
    fn run(&mut self, no: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<Verdict, String>) {
        if !self.only.as_ref().is_none_or(|only| only.contains(&no)) {
            return;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f));
        let took = t0.elapsed();
        let (mut pass, mut detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if let Some(limit) = limit {
            if took > limit {
                pass = false;
                detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
            }
        }
        println!(
            "acceptance {no:>2} {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        self.lines.push((no, pass));
    }
}

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn acceptance_root() -> PathBuf {
    std::env::var_os("RELCOMM_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

/// Parses a desk config and names its run after the config's hash.
fn desk_config(text: &str, overrides: &[String]) -> ExperimentConfig {
    let mut cfg = parse_config(text, overrides).expect("desk config parses");
    cfg.name = format!("{}-{:016x}", cfg.name, fnv(&cfg.to_toml()));
    cfg.out_dir = Some(acceptance_root());
    cfg
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let p = g.mul_const(y, w);
    g.sum(p)
}

// 1
fn generator_geometry() -> Result<Verdict, String> {
    let cfg = GeneratorConfig::default();
    let bounds = |rel: Relation| match rel {
        Relation::Right => ((50.0, 88.0), (-5.0, 5.0)),
        Relation::TopRight => ((50.0, 88.0), (50.0, 88.0)),
        Relation::Top => ((-5.0, 5.0), (50.0, 88.0)),
        Relation::TopLeft => ((-88.0, -50.0), (50.0, 88.0)),
    };
    let mut violations = 0usize;
    let mut total = 0usize;
    for rel in Relation::ALL {
        let ((x0, x1), (y0, y1)) = bounds(rel);
        let mut rng = stream(1, rel.name());
        for i in 0..GEOMETRY_RENDERS {
            let combo = Combination::new(i % 5, (i / 5) % 5, rel).ok_or("bad combination")?;
            let (_, p) = render(combo, &mut rng, &cfg).map_err(|e| e.to_string())?;
            // Displacement measured from the drawn centres; image y grows downward.
            let (dx, dy) = (p.center_a.0 - p.center_b.0, p.center_b.1 - p.center_a.1);
            let ok = [p.size_a, p.size_b].iter().all(|s| (28.0..=40.0).contains(s))
                && p.rotation_a <= 359
                && p.rotation_b <= 359
                && (x0 - 1e-9..=x1 + 1e-9).contains(&dx)
                && (y0 - 1e-9..=y1 + 1e-9).contains(&dy);
            violations += usize::from(!ok);
            total += 1;
        }
    }
    verdict(violations == 0, format!("{total} renders at 128 px, {violations} violations"))
}

// 2
fn chance_calibration() -> Result<Verdict, String> {
    let cfg = GameConfig { seed: 2, generator: GeneratorConfig::with_size(64), ..Default::default() };
    let state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Random.build(cfg.generator, cfg.seed).map_err(|e| e.to_string())?;
    let acc = evaluate(&state, regime.as_ref(), &split.test, CHANCE_CANDIDATES, CHANCE_EPISODES, &mut stream(2, "chance"))
        .map_err(|e| e.to_string())?;
    verdict(
        (acc - 1.0 / CHANCE_CANDIDATES as f64).abs() <= CHANCE_TOL,
        format!("untrained greedy accuracy {acc:.4} over {CHANCE_EPISODES} episodes, |C| = {CHANCE_CANDIDATES}, need 0.05 ± {CHANCE_TOL}"),
    )
}

// 3
fn gradient_suite() -> Result<Verdict, String> {
    let mut results: Vec<(&str, f64, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-6;

    let mut store = ParamStore::<f64>::new();
    let lin = Linear::relu(&mut store, "fc", 7, 5, &mut rng);
    let x = rand_tensor(&mut rng, &[3, 7], -1.0, 1.0);
    let r = grad_check(&mut store, &[x], eps, Coverage::All, |g, s, ids| {
        let y = lin.forward(g, s, ids[0]);
        let y = g.relu(y);
        weighted_sum(g, y, 1)
    });
    results.push(("linear+relu", r.max_rel_error, r.checked));

    let x = rand_tensor(&mut rng, &[2, 3, 9, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    let r = grad_check(&mut ParamStore::new(), &[x, w, b], eps, Coverage::All, |g, _, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), Conv2dSpec { stride: 2, pad: 1 });
        weighted_sum(g, y, 2)
    });
    results.push(("conv2d", r.max_rel_error, r.checked));

    let x = rand_tensor(&mut rng, &[2, 3, 9, 8], -1.0, 1.0);
    let r = grad_check(&mut ParamStore::new(), &[x], eps, Coverage::All, |g, _, ids| {
        let p = g.max_pool2d(ids[0], 3, 2);
        let a = weighted_sum(g, p, 3);
        let gap = g.global_avg_pool(ids[0]);
        let b = weighted_sum(g, gap, 4);
        g.add(a, b)
    });
    results.push(("max_pool+avg_pool", r.max_rel_error, r.checked));

    let mut store = ParamStore::<f64>::new();
    let cell = LstmCell::new(&mut store, "lstm", 4, 6, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let h = rand_tensor(&mut rng, &[2, 6], -0.5, 0.5);
    let c = rand_tensor(&mut rng, &[2, 6], -0.5, 0.5);
    let r = grad_check(&mut store, &[x, h, c], eps, Coverage::All, |g, s, ids| {
        let (h1, c1) = cell.step(g, s, ids[0], ids[1], ids[2]);
        let (h2, _) = cell.step(g, s, ids[0], h1, c1);
        weighted_sum(g, h2, 5)
    });
    results.push(("lstm", r.max_rel_error, r.checked));

    let x = rand_tensor(&mut rng, &[4, 6], -2.0, 2.0);
    let y = rand_tensor(&mut rng, &[5, 6], -2.0, 2.0);
    let r = grad_check(&mut ParamStore::new(), &[x, y], eps, Coverage::All, |g, _, ids| {
        let a = g.l2_normalize_rows(ids[0], 1e-8);
        let b = g.l2_normalize_rows(ids[1], 1e-8);
        let sims = g.matmul_t(a, b);
        let ce = g.cross_entropy_mean(sims, &[0, 4, 2, 2]);
        let lp = g.log_softmax(ids[0]);
        let h = g.entropy_rows(lp);
        let h = g.sum(h);
        g.add(ce, h)
    });
    results.push(("cosine+softmax+ce+entropy", r.max_rel_error, r.checked));

    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, "enc", EncoderSpec::reduced_alexnet(), &mut rng);
    let x = rand_tensor(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
    let r = grad_check(&mut store, &[x], eps, Coverage::Sampled { per_tensor: 200, seed: 6 }, |g, s, ids| {
        let y = enc.forward(g, s, ids[0]);
        weighted_sum(g, y, 7)
    });
    results.push(("encoder 16x16", r.max_rel_error, r.checked));

    let messages = vec![Message(vec![0, 4, 2, 2, 1, 3]), Message(vec![1, 1, 0, 3, 4, 4])];
    let mut init = stream(3, "speaker");
    let mut store = ParamStore::<f64>::new();
    let speaker = SpeakerNet::new(&mut store, &AgentConfig::default(), EncoderSpec::reduced_alexnet(), &mut init);
    for name in ["head.weight", "head.bias"] {
        let id = store.find(name).ok_or("speaker head missing")?;
        store.get_mut(id).value.data_mut().iter_mut().for_each(|w| *w = init.random_range(-0.5..0.5));
    }
    let x = rand_tensor(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
    let adv = Tensor::from_vec(&[2], vec![0.7, -0.4]);
    let r = grad_check(&mut store, &[x], 1e-5, Coverage::Sampled { per_tensor: 12, seed: 8 }, |g, s, ids| {
        let out = speaker.forward::<f64, ChaCha8Rng>(g, s, ids[0], Decode::Forced(&messages));
        let pg = g.mul_const(out.log_prob, adv.clone());
        let pg = g.sum(pg);
        let ent = g.sum(out.entropy);
        let ent = g.scale(ent, 0.01);
        let obj = g.add(pg, ent);
        g.scale(obj, -1.0)
    });
    results.push(("full speaker", r.max_rel_error, r.checked));

    let mut store = ParamStore::<f64>::new();
    let listener = ListenerNet::new(&mut store, &AgentConfig::default(), EncoderSpec::reduced_alexnet(), &mut init);
    let x = rand_tensor(&mut rng, &[4, 3, 16, 16], 0.0, 1.0);
    let r = grad_check(&mut store, &[x], 1e-5, Coverage::Sampled { per_tensor: 12, seed: 9 }, |g, s, ids| {
        let h = listener.encode_messages(g, s, &messages);
        let u = listener.project_messages(g, s, h);
        let v = listener.embed_images(g, s, ids[0]);
        let logits = listener.logits(g, u, v, CandidateLayout::Shared);
        g.cross_entropy_mean(logits, &[1, 3])
    });
    results.push(("full listener", r.max_rel_error, r.checked));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let empty: Vec<&str> = results.iter().filter(|r| r.2 == 0).map(|r| r.0).collect();
    let detail = results.iter().map(|(n, e, c)| format!("{n} {e:.1e} ({c})")).collect::<Vec<_>>().join(", ");
    verdict(worst < GRAD_TOL && empty.is_empty(), format!("max rel error {worst:.2e} < {GRAD_TOL:.0e}; {detail}"))
}

// 4
fn edit_distance_bfs(a: &[u8], b: &[u8], alphabet: u8) -> usize {
    let cap = a.len().max(b.len()) + 1;
    let mut seen = HashSet::from([a.to_vec()]);
    let mut queue = VecDeque::from([(a.to_vec(), 0usize)]);
    while let Some((s, d)) = queue.pop_front() {
        if s == b {
            return d;
        }
        let mut next = Vec::new();
        for i in 0..s.len() {
            let mut del = s.clone();
            del.remove(i);
            next.push(del);
            for c in 0..alphabet {
                let mut sub = s.clone();
                sub[i] = c;
                next.push(sub);
            }
        }
        if s.len() < cap {
            for i in 0..=s.len() {
                for c in 0..alphabet {
                    let mut ins = s.clone();
                    ins.insert(i, c);
                    next.push(ins);
                }
            }
        }
        for n in next {
            if seen.insert(n.clone()) {
                queue.push_back((n, d + 1));
            }
        }
    }
    unreachable!()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn metric_oracles() -> Result<Verdict, String> {
    let mut messages: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..3 {
        frontier = frontier.iter().flat_map(|m| (0..3u8).map(move |c| [m.clone(), vec![c]].concat())).collect();
        messages.extend(frontier.iter().cloned());
    }
    let mut lev_bad = 0;
    for a in &messages {
        for b in &messages {
            lev_bad += usize::from(levenshtein(a, b) != edit_distance_bfs(a, b, 3));
        }
    }
    let mut rho_bad = 0;
    let mut perms = 0;
    for n in 2..=5 {
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        for p in permutations(n) {
            let y: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let d2: f64 = p.iter().enumerate().map(|(i, &v)| (i as f64 - v as f64).powi(2)).sum();
            let nf = n as f64;
            let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            let rho = spearman(&x, &y);
            let ok = rho.defined && (rho.value - closed).abs() < 1e-12;
            rho_bad += usize::from(!ok);
            perms += 1;
        }
    }
    let mut tuple_bad = 0;
    let digits = |k: usize| [k / 20, (k / 4) % 5, k % 4];
    for a in enumerate_combinations() {
        for b in enumerate_combinations() {
            let expected = digits(a.index()).iter().zip(digits(b.index())).filter(|(x, y)| **x != *y).count();
            tuple_bad += usize::from(tuple_distance(a, b) != expected);
        }
    }
    let compositional: Vec<(Combination, Message)> = enumerate_combinations()
        .into_iter()
        .map(|c| (c, Message(vec![c.shape_a.id() as u8, 5 + c.shape_b.id() as u8, 10 + c.relation.index() as u8])))
        .collect();
    let ts = topsim_of(&compositional);
    let constant: Vec<(Combination, Message)> = enumerate_combinations().into_iter().map(|c| (c, Message(vec![1; 6]))).collect();
    let tc = topsim_of(&constant);
    let pass = lev_bad == 0 && rho_bad == 0 && tuple_bad == 0 && ts.defined && ts.value > TOPSIM_COMPOSITIONAL_MIN && !tc.defined;
    verdict(
        pass,
        format!(
            "levenshtein {} pairs ({lev_bad} wrong), spearman {perms} permutations ({rho_bad} wrong), tuple distance 10000 pairs ({tuple_bad} wrong), compositional TopSim {:.3}, constant code undefined: {}",
            messages.len() * messages.len(),
            ts.value,
            !tc.defined
        ),
    )
}

// 8
fn gridworld_mechanics() -> Result<Verdict, String> {
    let oracle = |rel: Relation| -> &'static [(i8, i8)] {
        match rel {
            Relation::Right => &[(1, 0), (2, 0)],
            Relation::TopRight => &[(1, 1), (1, 2), (2, 1), (2, 2)],
            Relation::Top => &[(0, 1), (0, 2)],
            Relation::TopLeft => &[(-1, 1), (-1, 2), (-2, 1), (-2, 2)],
        }
    };
    let mut pairs = Vec::new();
    for a in Pos::all() {
        for b in Pos::all() {
            if a != b {
                pairs.push((a, b));
            }
        }
    }
    let mut table_bad = 0;
    for &(a, b) in &pairs {
        let off = (a.x as i8 - b.x as i8, a.y as i8 - b.y as i8);
        for rel in Relation::ALL {
            table_bad += usize::from(relation_satisfied(a, b, rel, false) != oracle(rel).contains(&off));
        }
    }

    let cfg = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut steps, mut episodes, mut bad) = (0usize, 0usize, 0usize);
    while steps < 200_000 {
        let goal = Combination::from_index(rng.random_range(0..Combination::COUNT)).ok_or("bad index")?;
        let mut s: GridState = reset(goal, &cfg, &mut rng);
        bad += usize::from(s.pos_a == s.pos_b || relation_satisfied(s.pos_a, s.pos_b, goal.relation, false));
        for k in 1..=20u32 {
            let action = PlacementAction::from_index(rng.random_range(0..36)).ok_or("bad action")?;
            let (dx, dy) = match action.direction {
                Direction::Right => (1i8, 0i8),
                Direction::Left => (-1, 0),
                Direction::Up => (0, 1),
                Direction::Down => (0, -1),
            };
            let (x, y) = (action.grid.x as i8 + dx, action.grid.y as i8 + dy);
            let target = ((0..3).contains(&x) && (0..3).contains(&y)).then(|| Pos::new(x as u8, y as u8));
            let legal = target.filter(|t| *t != s.pos_a && *t != s.pos_b);
            let expected = match legal {
                Some(t) if action.grid == s.pos_a => (t, s.pos_b),
                Some(t) if action.grid == s.pos_b => (s.pos_a, t),
                _ => (s.pos_a, s.pos_b),
            };
            let out = step(&mut s, action, goal, &cfg).map_err(|e| e.to_string())?;
            steps += 1;
            let success = relation_satisfied(s.pos_a, s.pos_b, goal.relation, false);
            let ok = (s.pos_a, s.pos_b) == expected
                && s.pos_a != s.pos_b
                && out.success == success
                && out.reward == if success { 1.0 } else { -0.01 }
                && out.done == (success || k == 20);
            bad += usize::from(!ok);
            if out.done {
                break;
            }
        }
        bad += usize::from(step(&mut s, PlacementAction::from_index(0).unwrap(), goal, &cfg).is_ok());
        episodes += 1;
    }
    verdict(
        table_bad == 0 && bad == 0,
        format!("relation table {} pairs x 4 relations ({table_bad} wrong); {steps} random steps over {episodes} episodes ({bad} wrong)", pairs.len()),
    )
}

/// Desk refgame run, trained on first use and reused afterwards.
fn desk_refgame() -> Result<PathBuf, String> {
    let cfg = desk_config(DESK_REFGAME, &[]);
    if cfg.game.total_steps > DESK_MAX_STEPS {
        return Err(format!("desk run of {} steps exceeds {DESK_MAX_STEPS}", cfg.game.total_steps));
    }
    run_experiment(&cfg).map_err(|e| e.to_string())
}

fn unit_dir(run: &Path, regime: DatasetRegime, seed: u64) -> PathBuf {
    run.join("refgame").join(regime.name()).join(format!("seed{seed}"))
}

fn desk_seeds() -> Vec<u64> {
    desk_config(DESK_REFGAME, &[]).seeds
}

fn unit_value(run: &Path, regime: DatasetRegime, seed: u64, key: &str) -> Result<Option<f64>, String> {
    let r = UnitResult::load(&unit_dir(run, regime, seed)).map_err(|e| e.to_string())?;
    r.values.get(key).copied().ok_or_else(|| format!("{key} missing for {regime} seed {seed}"))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// 5
fn referential_ordering() -> Result<Verdict, String> {
    let run = desk_refgame()?;
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for regime in DatasetRegime::ALL {
        for seed in desk_seeds() {
            let v = unit_value(&run, regime, seed, "accuracy")?.ok_or("accuracy undefined")?;
            acc.entry(regime.name()).or_default().push(v);
        }
    }
    let (r, f, v) = (mean(&acc["random"]), mean(&acc["fixed"]), mean(&acc["variation"]));
    let chance = 1.0 / CHANCE_CANDIDATES as f64;
    let pass = r - f >= ORDERING_MARGIN && r - v >= ORDERING_MARGIN && r - chance >= ABOVE_CHANCE_MARGIN;
    verdict(
        pass,
        format!(
            "Random-episode test accuracy by training regime: random {r:.3} {:?}, fixed {f:.3} {:?}, variation {v:.3} {:?}; need random - other >= {ORDERING_MARGIN} and random >= chance + {ABOVE_CHANCE_MARGIN}",
            acc["random"], acc["fixed"], acc["variation"]
        ),
    )
}

/// Probe and TopSim values of the desk checkpoints, cached beside them.
fn desk_metric(run: &Path, regime: DatasetRegime, seed: u64, metric: &str) -> Result<(Option<f64>, f64), String> {
    let dir = unit_dir(run, regime, seed);
    let cache = dir.join(format!("acceptance-{metric}.json"));
    if let Ok(text) = fs::read_to_string(&cache) {
        let (v, secs): (Option<f64>, f64) = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        return Ok((v, secs));
    }
    let (game, state) = load_game_checkpoint(&dir.join("final.rlck")).map_err(|e| e.to_string())?;
    let cfg = desk_config(DESK_REFGAME, &[]);
    let split = split_combinations(game.seed);
    let t0 = Instant::now();
    let ctx = MetricContext { state: &state, game: &game, split: &split, probe: &cfg.probe, seed };
    let v = metric_registry().get(metric).map_err(|e| e.to_string())?.evaluate(&ctx).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let value = v.defined.then_some(v.value);
    fs::write(&cache, serde_json::to_string(&(value, secs)).unwrap()).map_err(|e| e.to_string())?;
    Ok((value, secs))
}

fn metric_by_regime(metric: &str) -> Result<(BTreeMap<&'static str, Vec<Option<f64>>>, f64), String> {
    let run = desk_refgame()?;
    let mut out: BTreeMap<&'static str, Vec<Option<f64>>> = BTreeMap::new();
    let mut secs = 0.0;
    for regime in [DatasetRegime::Random, DatasetRegime::Fixed] {
        for seed in desk_seeds() {
            let (v, s) = desk_metric(&run, regime, seed, metric)?;
            out.entry(regime.name()).or_default().push(v);
            secs += s;
        }
    }
    Ok((out, secs))
}

fn defined_mean(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| mean(&v))
}

// 6
fn probe_ordering() -> Result<Verdict, String> {
    let (probe, s1) = metric_by_regime("visual-probe")?;
    let (etl, s2) = metric_by_regime("etl")?;
    let pr = defined_mean(&probe["random"]).ok_or("probe undefined")?;
    let pf = defined_mean(&probe["fixed"]).ok_or("probe undefined")?;
    let er = defined_mean(&etl["random"]).ok_or("etl undefined")?;
    let ef = defined_mean(&etl["fixed"]).ok_or("etl undefined")?;
    let secs = s1 + s2;
    let pass = pr > pf && er > ef + ETL_MARGIN && secs < 30.0 * 60.0;
    verdict(
        pass,
        format!(
            "visual probe random {pr:.3} vs fixed {pf:.3}; ETL random {er:.3} vs fixed {ef:.3} (need a {ETL_MARGIN} gap); evaluation {secs:.0}s of 1800s"
        ),
    )
}

// 7
fn topsim_ordering() -> Result<Verdict, String> {
    let (ts, secs) = metric_by_regime("topsim")?;
    let r = defined_mean(&ts["random"]);
    let f = defined_mean(&ts["fixed"]);
    // A constant (undefined) code carries no structure; rank it below any defined value.
    let pass = match (r, f) {
        (Some(r), Some(f)) => r > f,
        (Some(_), None) => true,
        _ => false,
    } && secs < 5.0 * 60.0;
    verdict(
        pass,
        format!(
            "TopSim random {} [{}] vs fixed {} [{}]; evaluation {secs:.0}s of 300s",
            fmt_opt(r),
            fmt_all(&ts["random"]),
            fmt_opt(f),
            fmt_all(&ts["fixed"])
        ),
    )
}

fn steps_text(s: Option<u64>) -> String {
    s.map_or("never".into(), |s| format!("step {s}"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.3}"))
}

fn fmt_all(vs: &[Option<f64>]) -> String {
    vs.iter().map(|v| fmt_opt(*v)).collect::<Vec<_>>().join(", ")
}

// 9
fn transfer_sanity() -> Result<Verdict, String> {
    let refgame = desk_refgame()?;
    let mut best = None;
    for seed in desk_seeds() {
        let acc = unit_value(&refgame, DatasetRegime::Random, seed, "accuracy")?.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, a)| acc > a) {
            best = Some((seed, acc));
        }
    }
    let (best_seed, _) = best.ok_or("no desk seeds")?;
    let speaker = unit_dir(&refgame, DatasetRegime::Random, best_seed).join("final.rlck");
    let override_speaker = format!("transfer.speaker_checkpoint={}", toml::Value::String(speaker.display().to_string()));
    let cfg = desk_config(DESK_TRANSFER, &[override_speaker]);
    if cfg.transfer.ppo.total_steps > TRANSFER_BUDGET {
        return Err("transfer budget exceeded".into());
    }
    let run = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let rows = |kind: BaselineKind| -> Result<Vec<TransferRow>, String> {
        read_rows(&run.join("transfer").join(kind.name()).join("seed0").join("transfer_metrics.csv")).map_err(|e| e.to_string())
    };
    let (state, raw, el) = (rows(BaselineKind::State)?, rows(BaselineKind::RawPixel)?, rows(BaselineKind::EmergentLanguage)?);
    let s_state = steps_to_threshold(&state, TRANSFER_SOLVED);
    let s_raw = steps_to_threshold(&raw, TRANSFER_SOLVED);
    let s_el = steps_to_threshold(&el, TRANSFER_SOLVED);
    let raw_max = raw.iter().filter_map(|r| r.mean_ep_reward).fold(f64::NEG_INFINITY, f64::max);
    let el_final = el.iter().rev().filter_map(|r| r.mean_ep_reward).take(5).sum::<f64>() / 5.0;
    let state_ok = s_state.is_some_and(|s| s <= TRANSFER_BUDGET);
    let raw_ok = raw_max < RAW_PIXEL_CEILING;
    let el_ok = match (s_el, s_state) {
        (Some(e), Some(s)) => e <= 2 * s && s_raw.is_none_or(|r| e < r),
        _ => false,
    };
    verdict(
        state_ok && raw_ok && el_ok,
        format!(
            "State reaches {TRANSFER_SOLVED} at {}; RawPixel best window {raw_max:.3} (< {RAW_PIXEL_CEILING}), reaches at {}; EmergentLanguage (Speaker seed {best_seed}) reaches at {}, final {el_final:.3}; need EL <= 2 x State",
            steps_text(s_state),
            steps_text(s_raw),
            steps_text(s_el)
        ),
    )
}

// 10
fn reproducibility() -> Result<Verdict, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tiny = r#"
name = "repro"
recipe = "full"
image_size = 64
regimes = ["random"]
seeds = [0]
metrics = ["accuracy"]
baselines = ["state", "emergent-language"]

[game]
batch_size = 4
train_candidates = 5
total_steps = 6
eval_every = 3
eval_episodes = 20
checkpoint_every = 3

[simclr]
steps = 2
batch_size = 8

[transfer.ppo]
total_steps = 4096
"#;
    let mk = |root: &Path, extra: &[&str]| -> Result<ExperimentConfig, String> {
        let mut o: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        o.push(format!("out_dir={}", toml::Value::String(root.display().to_string())));
        parse_config(tiny, &o).map_err(|e| e.to_string())
    };
    let a = run_experiment(&mk(&tmp.path().join("a"), &[])?).map_err(|e| e.to_string())?;
    let b = run_experiment(&mk(&tmp.path().join("b"), &[])?).map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    collect_csvs(&a, &a, &mut csvs);
    let differing: Vec<String> = csvs
        .iter()
        .filter(|rel| fs::read(a.join(rel)).ok() != fs::read(b.join(rel)).ok())
        .map(|p| p.display().to_string())
        .collect();

    // Stop the game at step 3, then resume to 6.
    let c_root = tmp.path().join("c");
    let half = mk(&c_root, &["recipe=\"refgame\"", "game.total_steps=3"])?;
    let unit = c_root.join("repro/refgame/random/seed0");
    relcomm::refgame::train(&relcomm_cli::game_config(&half, DatasetRegime::Random, 0), Some(&relcomm::refgame::RunPaths::new(&unit)), None)
        .map_err(|e| e.to_string())?;
    let c = run_experiment(&mk(&c_root, &["recipe=\"refgame\""])?).map_err(|e| e.to_string())?;
    let rel = Path::new("refgame/random/seed0");
    let resumed_csv = fs::read(c.join(rel).join("metrics.csv")).ok() == fs::read(a.join(rel).join("metrics.csv")).ok();
    let resumed_ck = fs::read(c.join(rel).join("final.rlck")).ok() == fs::read(a.join(rel).join("final.rlck")).ok();

    // Save, load, save again.
    let ck_path = a.join(rel).join("final.rlck");
    let ck = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    let again = tmp.path().join("again.rlck");
    ck.save(&again).map_err(|e| e.to_string())?;
    let round_trip = fs::read(&ck_path).ok() == fs::read(&again).ok();

    verdict(
        csvs.len() >= 4 && differing.is_empty() && resumed_csv && resumed_ck && round_trip,
        format!(
            "{} metrics CSVs compared across two full-recipe runs, differing: {differing:?}; resumed refgame CSV identical: {resumed_csv}, final checkpoint identical: {resumed_ck}; checkpoint save/load/save identical: {round_trip}",
            csvs.len()
        ),
    )
}

fn collect_csvs(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<_> = fs::read_dir(dir).into_iter().flatten().flatten().map(|e| e.path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_csvs(root, &p, out);
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches nothing here skips the suite.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let only = std::env::var("RELCOMM_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut report = Report { lines: Vec::new(), only };
    report.run(1, "generator geometry", min(1), generator_geometry);
    report.run(2, "chance calibration", min(2), chance_calibration);
    report.run(3, "gradient suite", min(5), gradient_suite);
    report.run(4, "metric oracles", min(1), metric_oracles);
    report.run(5, "referential ordering", None, referential_ordering);
    report.run(6, "probe ordering", None, probe_ordering);
    report.run(7, "TopSim ordering", None, topsim_ordering);
    report.run(8, "gridworld mechanics", min(1), gridworld_mechanics);
    report.run(9, "transfer sanity", None, transfer_sanity);
    report.run(10, "reproducibility", None, reproducibility);
    let passed = report.lines.iter().filter(|(_, p)| *p).count();
    println!("acceptance: {passed}/{} criteria pass", report.lines.len());
    if std::env::var("RELCOMM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") && passed < report.lines.len() {
        std::process::exit(1);
    }
}
