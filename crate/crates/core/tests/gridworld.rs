use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relcomm::gridworld::{
    multi_step, relation_satisfied, reset, step, Direction, GridConfig, GridState, MultiAction, PlacementAction, Pos,
};
use relcomm::scene::{Combination, Relation};

/// Offsets `(x_a - x_b, y_a - y_b)` that realize each relation, written out
/// by hand for a 3x3 board.
fn oracle_offsets(relation: Relation) -> &'static [(i8, i8)] {
    match relation {
        Relation::Right => &[(1, 0), (2, 0)],
        Relation::TopRight => &[(1, 1), (1, 2), (2, 1), (2, 2)],
        Relation::Top => &[(0, 1), (0, 2)],
        Relation::TopLeft => &[(-1, 1), (-1, 2), (-2, 1), (-2, 2)],
    }
}

fn ordered_pairs() -> Vec<(Pos, Pos)> {
    let mut pairs = Vec::new();
    for a in Pos::all() {
        for b in Pos::all() {
            if a != b {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

#[test]
fn relation_table_matches_hand_oracle() {
    let pairs = ordered_pairs();
    assert_eq!(pairs.len(), 72);
    let mut satisfied = [0usize; 4];
    for &(a, b) in &pairs {
        let offset = (a.x as i8 - b.x as i8, a.y as i8 - b.y as i8);
        for rel in Relation::ALL {
            let expected = oracle_offsets(rel).contains(&offset);
            assert_eq!(relation_satisfied(a, b, rel, false), expected, "{a:?} {b:?} {rel:?}");
            satisfied[rel.index()] += usize::from(expected);
        }
    }
    // Right: 3 rows x 3 ordered column pairs; Top likewise; each diagonal
    // has 3x3 column-row pairs.
    assert_eq!(satisfied, [9, 9, 9, 9]);
}

#[test]
fn strict_diagonal_keeps_only_equal_magnitudes() {
    for (a, b) in ordered_pairs() {
        let (dx, dy) = (a.x as i8 - b.x as i8, a.y as i8 - b.y as i8);
        for rel in [Relation::TopRight, Relation::TopLeft] {
            let loose = relation_satisfied(a, b, rel, false);
            assert_eq!(relation_satisfied(a, b, rel, true), loose && dx.abs() == dy.abs());
        }
        for rel in [Relation::Right, Relation::Top] {
            assert_eq!(relation_satisfied(a, b, rel, true), relation_satisfied(a, b, rel, false));
        }
    }
}

#[test]
fn relation_is_translation_invariant() {
    for (a, b) in ordered_pairs() {
        for (tx, ty) in [(-2i8, 0i8), (-1, 0), (1, 0), (2, 0), (0, -1), (0, 1), (1, 1), (-1, -1)] {
            let shift = |p: Pos| {
                let (x, y) = (p.x as i8 + tx, p.y as i8 + ty);
                ((0..3).contains(&x) && (0..3).contains(&y)).then(|| Pos::new(x as u8, y as u8))
            };
            if let (Some(a2), Some(b2)) = (shift(a), shift(b)) {
                for rel in Relation::ALL {
                    assert_eq!(relation_satisfied(a, b, rel, false), relation_satisfied(a2, b2, rel, false));
                }
            }
        }
    }
}

/// Direct model of a single placement move.
fn expected_after(state: &GridState, action: PlacementAction) -> (Pos, Pos) {
    let (dx, dy) = match action.direction {
        Direction::Right => (1i8, 0i8),
        Direction::Left => (-1, 0),
        Direction::Up => (0, 1),
        Direction::Down => (0, -1),
    };
    let (x, y) = (action.grid.x as i8 + dx, action.grid.y as i8 + dy);
    let in_bounds = (0..3).contains(&x) && (0..3).contains(&y);
    if !in_bounds {
        return (state.pos_a, state.pos_b);
    }
    let to = Pos::new(x as u8, y as u8);
    if to == state.pos_a || to == state.pos_b {
        (state.pos_a, state.pos_b)
    } else if action.grid == state.pos_a {
        (to, state.pos_b)
    } else if action.grid == state.pos_b {
        (state.pos_a, to)
    } else {
        (state.pos_a, state.pos_b)
    }
}

fn random_goal(rng: &mut ChaCha8Rng) -> Combination {
    Combination::from_index(rng.random_range(0..Combination::COUNT)).unwrap()
}

#[test]
fn single_listener_random_walk_fuzz() {
    let cfg = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut steps = 0usize;
    let mut episodes = 0usize;
    while steps < 1_000_000 {
        let goal = random_goal(&mut rng);
        let mut s = reset(goal, &cfg, &mut rng);
        assert_ne!(s.pos_a, s.pos_b);
        assert!(!relation_satisfied(s.pos_a, s.pos_b, goal.relation, false));
        let mut ret = 0.0;
        let mut k = 0;
        loop {
            let action = PlacementAction::from_index(rng.random_range(0..36)).unwrap();
            let expected = expected_after(&s, action);
            let out = step(&mut s, action, goal, &cfg).unwrap();
            steps += 1;
            k += 1;
            assert_eq!((s.pos_a, s.pos_b), expected);
            assert_ne!(s.pos_a, s.pos_b);
            assert!(s.pos_a.x < 3 && s.pos_a.y < 3 && s.pos_b.x < 3 && s.pos_b.y < 3);
            assert!(s.steps_taken <= 20);
            let success = relation_satisfied(s.pos_a, s.pos_b, goal.relation, false);
            assert_eq!(out.success, success);
            assert_eq!(out.reward, if success { 1.0 } else { -0.01 });
            assert_eq!(out.done, success || k == 20);
            ret += out.reward;
            if out.done {
                break;
            }
        }
        if s.done && relation_satisfied(s.pos_a, s.pos_b, goal.relation, false) {
            assert!((ret - (1.0 - 0.01 * (k - 1) as f64)).abs() < 1e-9);
        } else {
            assert!((ret + 0.2).abs() < 1e-9);
        }
        assert!(step(&mut s, PlacementAction::from_index(0).unwrap(), goal, &cfg).is_err());
        episodes += 1;
    }
    assert!(episodes > 50_000);
}

#[test]
fn multi_listener_random_walk_fuzz() {
    let cfg = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut steps = 0usize;
    while steps < 200_000 {
        let goal = random_goal(&mut rng);
        let mut s = reset(goal, &cfg, &mut rng);
        loop {
            let action = MultiAction {
                dir_a: Direction::from_index(rng.random_range(0..4)).unwrap(),
                dir_b: Direction::from_index(rng.random_range(0..4)).unwrap(),
            };
            let mut model = s;
            let (a1, b1) = expected_after(&model, PlacementAction { grid: model.pos_a, direction: action.dir_a });
            model.pos_a = a1;
            model.pos_b = b1;
            let (a2, b2) = expected_after(&model, PlacementAction { grid: model.pos_b, direction: action.dir_b });
            let out = multi_step(&mut s, action, goal, &cfg).unwrap();
            steps += 1;
            assert_eq!((s.pos_a, s.pos_b), (a2, b2));
            assert_ne!(s.pos_a, s.pos_b);
            assert!(out.reward == 1.0 || out.reward == -0.01);
            if out.done {
                break;
            }
        }
    }
}

#[test]
fn b_cannot_enter_the_cell_a_just_took() {
    let cfg = GridConfig::default();
    let goal = Combination::new(0, 1, Relation::TopLeft).unwrap();
    // Every board where A's move lands next to B and B moves toward it.
    let mut checked = 0;
    for (a, b) in ordered_pairs() {
        for dir_a in Direction::ALL {
            let Some(a_to) = a.moved(dir_a) else { continue };
            if a_to == b {
                continue;
            }
            for dir_b in Direction::ALL {
                if b.moved(dir_b) != Some(a_to) {
                    continue;
                }
                let mut s = GridState {
                    pos_a: a,
                    pos_b: b,
                    shape_a: goal.shape_a,
                    shape_b: goal.shape_b,
                    steps_taken: 0,
                    done: false,
                };
                multi_step(&mut s, MultiAction { dir_a, dir_b }, goal, &cfg).unwrap();
                assert_eq!((s.pos_a, s.pos_b), (a_to, b));
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn resets_never_start_satisfied_and_are_seeded() {
    let cfg = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let goal = random_goal(&mut rng);
        let s = reset(goal, &cfg, &mut rng);
        assert_ne!(s.pos_a, s.pos_b);
        assert!(!relation_satisfied(s.pos_a, s.pos_b, goal.relation, false));
        assert_eq!(s.steps_taken, 0);
    }
    let goal = Combination::new(2, 4, Relation::Right).unwrap();
    let a = reset(goal, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let b = reset(goal, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}

#[test]
fn shared_reward_on_joint_success() {
    let cfg = GridConfig::default();
    let goal = Combination::new(0, 1, Relation::Top).unwrap();
    let mut s =
        GridState { pos_a: Pos::new(0, 1), pos_b: Pos::new(2, 0), shape_a: goal.shape_a, shape_b: goal.shape_b, steps_taken: 0, done: false };
    // A to (1,1), B to (1,0): Top.
    let out = multi_step(&mut s, MultiAction { dir_a: Direction::Right, dir_b: Direction::Left }, goal, &cfg).unwrap();
    assert_eq!((out.reward, out.done, out.success), (1.0, true, true));
}
