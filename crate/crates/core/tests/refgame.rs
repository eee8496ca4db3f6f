use relcomm::agents::{images_to_tensor, Decode};
use relcomm::refgame::{
    evaluate, listener_ce_update, play_batch, reinforce_gradient, reinforce_update, train, train_step, CandidateMode, GameBatch,
    GameConfig, GameState, SimclrConfig, simclr_pretrain,
};
use relcomm::rng::{indexed_stream, stream};
use relcomm::scene::{render, split_combinations, DatasetRegime, GeneratorConfig, SceneImage};
use relcomm_nn::{Graph, ParamStore, Tensor};

fn cfg64(seed: u64) -> GameConfig {
    GameConfig { seed, generator: GeneratorConfig::with_size(64), ..Default::default() }
}

fn grads(store: &ParamStore<f32>) -> Vec<f32> {
    store.iter().flat_map(|p| p.grad.data().to_vec()).collect()
}

#[test]
fn untrained_agents_play_at_chance() {
    let cfg = cfg64(11);
    let state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Random.build(cfg.generator, cfg.seed).unwrap();
    let mut rng = stream(cfg.seed, "chance");
    let acc = evaluate(&state, regime.as_ref(), &split.test, 20, 2000, &mut rng).unwrap();
    // Binomial sd at p = 0.05, n = 2000 is 0.0049.
    assert!((acc - 0.05).abs() <= 0.015, "accuracy {acc}");
}

#[test]
fn uniform_listener_has_log_candidates_loss() {
    let mut cfg = cfg64(1);
    cfg.agents.listener_inv_temp = 1e-9;
    let mut state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Random.build(cfg.generator, cfg.seed).unwrap();
    let mut rng = stream(1, "batch");
    let batch = GameBatch::in_batch(regime.as_ref(), &split.train, 32, &mut rng).unwrap();
    let mut played = play_batch(&state, &batch, Some(&mut rng));
    for r in &played.records {
        assert!(r.listener_probs.iter().all(|p| (p - 1.0 / 32.0).abs() < 1e-6));
    }
    let loss = listener_ce_update(&mut played, &mut state, &cfg);
    assert!((loss - 32f64.ln()).abs() < 1e-5, "loss {loss}");
}

#[test]
fn listener_cross_entropy_descends_on_a_fixed_batch() {
    let mut cfg = cfg64(2);
    cfg.lr = 3e-4;
    let mut state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Random.build(cfg.generator, cfg.seed).unwrap();
    let mut rng = stream(2, "batch");
    let batch = GameBatch::independent(regime.as_ref(), &split.train, 8, 5, &mut rng).unwrap();
    let mut losses = Vec::new();
    for i in 0..30 {
        let mut r = indexed_stream(2, "play", i);
        let mut played = play_batch(&state, &batch, Some(&mut r));
        losses.push(listener_ce_update(&mut played, &mut state, &cfg));
    }
    assert!(losses[29] < 0.5 * losses[0], "{losses:?}");
}

/// The REINFORCE gradient against an independently assembled objective:
/// `-(1/n) sum (r_i - b) log p(m_i) - c * mean(H_i)` on a fresh tape that
/// rescores the emitted messages.
#[test]
fn reinforce_gradient_matches_assembled_objective() {
    let cfg = cfg64(3);
    let mut state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Variation.build(cfg.generator, cfg.seed).unwrap();
    let mut rng = stream(3, "batch");
    let batch = GameBatch::independent(regime.as_ref(), &split.train, 6, 4, &mut rng).unwrap();
    let mut played = play_batch(&state, &batch, Some(&mut rng));
    let rewards = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    for (r, &v) in played.records.iter_mut().zip(&rewards) {
        r.reward = v;
    }
    let (baseline, coef) = (0.3, 0.05);
    // Gradients land in the store the tape was recorded from.
    state.speaker.store.zero_grad();
    reinforce_gradient(&mut played, &mut state.speaker.store, baseline, coef);
    let ours = &state.speaker.store;

    let mut oracle = state.speaker.store.clone();
    oracle.zero_grad();
    let messages: Vec<_> = played.records.iter().map(|r| r.message.clone()).collect();
    let refs: Vec<&SceneImage> = batch.speaker_images.iter().map(|a| a.as_ref()).collect();
    let mut g = Graph::new();
    let x = g.constant(images_to_tensor(&refs));
    let out = state.speaker.net.forward::<f32, relcomm::rng::SimRng>(&mut g, &oracle, x, Decode::Forced(&messages));
    let n = rewards.len();
    let mut total = None;
    for i in 0..n {
        let lp = g.pick_rows(out.log_prob, &[i]);
        let lp = g.sum(lp);
        let term = g.scale(lp, (-(rewards[i] - baseline) / n as f64) as f32);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    let ent = g.mean(out.entropy);
    let ent = g.scale(ent, -coef as f32);
    let loss = g.add(total.unwrap(), ent);
    g.backward_into(loss, &mut oracle);

    let (a, b) = (grads(ours), grads(&oracle));
    let scale = b.iter().fold(0f32, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-4 * scale + 1e-7, "{x} vs {y}");
    }
}

#[test]
fn zero_advantage_without_entropy_gives_zero_gradient() {
    let cfg = cfg64(4);
    let mut state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Random.build(cfg.generator, cfg.seed).unwrap();
    let mut rng = stream(4, "batch");
    let batch = GameBatch::independent(regime.as_ref(), &split.train, 5, 4, &mut rng).unwrap();
    let mut played = play_batch(&state, &batch, Some(&mut rng));
    for r in played.records.iter_mut() {
        r.reward = 0.5;
    }
    state.speaker.store.zero_grad();
    let loss = reinforce_gradient(&mut played, &mut state.speaker.store, 0.5, 0.0);
    assert_eq!(loss, 0.0);
    assert!(grads(&state.speaker.store).iter().all(|&v| v == 0.0));
}

#[test]
fn entropy_regularizer_alone_keeps_symbols_spread() {
    let mut cfg = cfg64(9);
    cfg.lr = 3e-4;
    let mut state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Random.build(cfg.generator, cfg.seed).unwrap();
    let mut entropy = 0.0;
    for i in 0..1000 {
        let mut rng = indexed_stream(9, "entropy", i);
        let batch = GameBatch::independent(regime.as_ref(), &split.train, 8, 2, &mut rng).unwrap();
        let mut played = play_batch(&state, &batch, Some(&mut rng));
        // No reward signal: every reward equals the baseline.
        for r in played.records.iter_mut() {
            r.reward = state.baseline;
        }
        entropy = played.mean_symbol_entropy(cfg.agents.message_len);
        reinforce_update(&mut played, &mut state, &cfg);
    }
    assert!(entropy >= 5f64.ln() - 0.5, "per-step entropy {entropy}");
}

#[test]
fn evaluation_and_listener_updates_leave_the_speaker_untouched() {
    let cfg = cfg64(5);
    let mut state = GameState::new(&cfg);
    let split = split_combinations(cfg.seed);
    let regime = DatasetRegime::Random.build(cfg.generator, cfg.seed).unwrap();
    let (s0, l0) = (state.speaker.store.fingerprint(), state.listener.store.fingerprint());
    evaluate(&state, regime.as_ref(), &split.test, 20, 50, &mut stream(5, "eval")).unwrap();
    assert_eq!((state.speaker.store.fingerprint(), state.listener.store.fingerprint()), (s0, l0));

    let mut rng = stream(5, "batch");
    let batch = GameBatch::independent(regime.as_ref(), &split.train, 4, 5, &mut rng).unwrap();
    let mut played = play_batch(&state, &batch, Some(&mut rng));
    listener_ce_update(&mut played, &mut state, &cfg);
    assert_eq!(state.speaker.store.fingerprint(), s0);
    assert_ne!(state.listener.store.fingerprint(), l0);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let cfg = GameConfig {
        batch_size: 4,
        train_candidates: 4,
        candidate_mode: CandidateMode::InBatch,
        total_steps: 3,
        eval_every: 3,
        eval_episodes: 10,
        ..cfg64(6)
    };
    let a = train(&cfg, None, None).unwrap();
    let b = train(&cfg, None, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.state.speaker.store.fingerprint(), b.state.speaker.store.fingerprint());

    let ck = a.state.checkpoint(&cfg);
    let restored = GameState::from_checkpoint(&cfg, &ck).unwrap();
    assert_eq!(restored.step, 3);
    assert_eq!(restored.baseline, a.state.baseline);
    assert_eq!(restored.speaker.store.fingerprint(), a.state.speaker.store.fingerprint());
    assert_eq!(restored.listener.store.fingerprint(), a.state.listener.store.fingerprint());

    // Continuing the restored state equals continuing the original.
    let split = split_combinations(cfg.seed);
    let regime = cfg.regime.build(cfg.generator, cfg.seed).unwrap();
    let (mut x, mut y) = (a.state, restored);
    let sx = train_step(&mut x, &cfg, regime.as_ref(), &split.train).unwrap();
    let sy = train_step(&mut y, &cfg, regime.as_ref(), &split.train).unwrap();
    assert_eq!(sx, sy);
    assert_eq!(x.speaker.store.fingerprint(), y.speaker.store.fingerprint());
}

#[test]
fn frozen_encoders_do_not_move() {
    let cfg = GameConfig {
        batch_size: 4,
        train_candidates: 4,
        candidate_mode: CandidateMode::InBatch,
        lr: 1e-3,
        ..cfg64(7)
    };
    let donor = GameState::new(&cfg64(99));
    let mut state = GameState::new(&cfg);
    state.freeze_encoders_from(&donor.speaker.store).unwrap();
    let enc = |s: &ParamStore<f32>| -> Vec<f32> {
        s.iter().filter(|p| p.name.starts_with("encoder.")).flat_map(|p| p.value.data().to_vec()).collect()
    };
    let before = enc(&state.speaker.store);
    assert_eq!(before, enc(&donor.speaker.store));
    let split = split_combinations(cfg.seed);
    let regime = cfg.regime.build(cfg.generator, cfg.seed).unwrap();
    for _ in 0..3 {
        train_step(&mut state, &cfg, regime.as_ref(), &split.train).unwrap();
    }
    assert_eq!(enc(&state.speaker.store), before);
    assert_eq!(enc(&state.listener.store), before);
}

#[test]
fn contrastive_pretraining_separates_positives_from_negatives() {
    let cfg = SimclrConfig { steps: 60, batch_size: 32, generator: GeneratorConfig::with_size(64), seed: 8, ..Default::default() };
    let split = split_combinations(8);
    let out = simclr_pretrain(&cfg, &split.train).unwrap();
    let first: f64 = out.losses[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = out.losses[out.losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(last < first, "loss {first} -> {last}");

    // Two independent renders per held-out combination.
    let mut rng = stream(8, "views");
    let mut views = Vec::new();
    for &c in &split.test {
        views.push(render(c, &mut rng, &cfg.generator).unwrap().0);
        views.push(render(c, &mut rng, &cfg.generator).unwrap().0);
    }
    let refs: Vec<&SceneImage> = views.iter().collect();
    let f: Tensor<f32> = out.features(&refs);
    let dot = |i: usize, j: usize| -> f64 { f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a * b) as f64).sum() };
    let n = split.test.len();
    let pos: f64 = (0..n).map(|k| dot(2 * k, 2 * k + 1)).sum::<f64>() / n as f64;
    let mut neg = 0.0;
    let mut count = 0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                neg += dot(2 * a, 2 * b + 1);
                count += 1;
            }
        }
    }
    let neg = neg / count as f64;
    assert!(pos > neg, "positive {pos} vs negative {neg}");
}
