//! Object Placement on a 3x3 grid: two shaped objects are moved until their
//! positional relation matches a goal combination.
//!
//! Coordinates are `(x, y)` with `x` growing to the right and `y` growing
//! upward, both in `0..3`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{Combination, Relation, SceneImage, Shape};
use crate::Error;

pub const GRID: u8 = 3;
pub const CELLS: usize = 9;
pub const NUM_PLACEMENT_ACTIONS: usize = CELLS * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: u8,
    pub y: u8,
}

impl Pos {
    pub fn new(x: u8, y: u8) -> Self {
        assert!(x < GRID && y < GRID, "({x}, {y}) is off the grid");
        Self { x, y }
    }

    pub fn index(self) -> usize {
        (self.y * GRID + self.x) as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::new((i % 3) as u8, (i / 3) as u8)
    }

    pub fn all() -> impl Iterator<Item = Pos> {
        (0..CELLS).map(Pos::from_index)
    }

    /// Neighbouring cell, or `None` past the border.
    pub fn moved(self, dir: Direction) -> Option<Pos> {
        let (dx, dy) = dir.offset();
        let x = self.x as i8 + dx;
        let y = self.y as i8 + dy;
        ((0..GRID as i8).contains(&x) && (0..GRID as i8).contains(&y)).then(|| Pos::new(x as u8, y as u8))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Up, Direction::Down];

    pub fn offset(self) -> (i8, i8) {
        match self {
            Direction::Right => (1, 0),
            Direction::Left => (-1, 0),
            Direction::Up => (0, 1),
            Direction::Down => (0, -1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Select a cell and push whatever sits there one step in `direction`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementAction {
    pub grid: Pos,
    pub direction: Direction,
}

impl PlacementAction {
    pub fn index(self) -> usize {
        self.grid.index() * 4 + self.direction.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < NUM_PLACEMENT_ACTIONS)
            .then(|| Self { grid: Pos::from_index(i / 4), direction: Direction::from_index(i % 4).expect("dir") })
    }
}

/// One direction per Listener: the first moves object A, the second B.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiAction {
    pub dir_a: Direction,
    pub dir_b: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub pos_a: Pos,
    pub pos_b: Pos,
    pub shape_a: Shape,
    pub shape_b: Shape,
    pub steps_taken: u32,
    pub done: bool,
}

impl GridState {
    /// `(x_a, y_a, shape_a, x_b, y_b, shape_b)`.
    pub fn tuple(&self) -> [u8; 6] {
        [self.pos_a.x, self.pos_a.y, self.shape_a.id() as u8, self.pos_b.x, self.pos_b.y, self.shape_b.id() as u8]
    }
}

impl fmt::Display for GridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for y in (0..GRID).rev() {
            for x in 0..GRID {
                let p = Pos::new(x, y);
                let c = if p == self.pos_a {
                    'A'
                } else if p == self.pos_b {
                    'B'
                } else {
                    '.'
                };
                write!(f, "{c}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Target of one episode; the image is what the Speaker sees.
#[derive(Clone, Debug)]
pub struct Goal {
    pub combination: Combination,
    pub target_image: Arc<SceneImage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub max_steps: u32,
    pub success_reward: f64,
    pub step_reward: f64,
    /// Diagonal relations additionally need `|dx| == |dy|`.
    pub strict_diagonal: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { max_steps: 20, success_reward: 1.0, step_reward: -0.01, strict_diagonal: false }
    }
}

/// Sign-pattern match of A relative to B.
pub fn relation_satisfied(pos_a: Pos, pos_b: Pos, relation: Relation, strict_diagonal: bool) -> bool {
    let dx = pos_a.x as i8 - pos_b.x as i8;
    let dy = pos_a.y as i8 - pos_b.y as i8;
    let signs_match = match relation {
        Relation::Right => dx > 0 && dy == 0,
        Relation::TopRight => dx > 0 && dy > 0,
        Relation::Top => dx == 0 && dy > 0,
        Relation::TopLeft => dx < 0 && dy > 0,
    };
    let diagonal = matches!(relation, Relation::TopRight | Relation::TopLeft);
    signs_match && (!strict_diagonal || !diagonal || dx.abs() == dy.abs())
}

pub fn state_satisfies(state: &GridState, combination: Combination, cfg: &GridConfig) -> bool {
    relation_satisfied(state.pos_a, state.pos_b, combination.relation, cfg.strict_diagonal)
}

/// Two distinct uniform cells that do not already satisfy the goal.
pub fn reset<R: Rng + ?Sized>(goal: Combination, cfg: &GridConfig, rng: &mut R) -> GridState {
    loop {
        let a = rng.random_range(0..CELLS);
        let mut b = rng.random_range(0..CELLS - 1);
        if b >= a {
            b += 1;
        }
        let (pos_a, pos_b) = (Pos::from_index(a), Pos::from_index(b));
        if !relation_satisfied(pos_a, pos_b, goal.relation, cfg.strict_diagonal) {
            return GridState { pos_a, pos_b, shape_a: goal.shape_a, shape_b: goal.shape_b, steps_taken: 0, done: false };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

fn finish(state: &mut GridState, goal: Combination, cfg: &GridConfig) -> StepOutcome {
    state.steps_taken += 1;
    let success = state_satisfies(state, goal, cfg);
    let done = success || state.steps_taken >= cfg.max_steps;
    state.done = done;
    StepOutcome { reward: if success { cfg.success_reward } else { cfg.step_reward }, done, success }
}

/// Moves the object at `from` one cell if the destination is on the grid
/// and empty. Returns whether it moved.
fn try_move(state: &mut GridState, from: Pos, dir: Direction) -> bool {
    let Some(to) = from.moved(dir) else { return false };
    if to == state.pos_a || to == state.pos_b {
        return false;
    }
    if from == state.pos_a {
        state.pos_a = to;
        true
    } else if from == state.pos_b {
        state.pos_b = to;
        true
    } else {
        false
    }
}

pub fn step(state: &mut GridState, action: PlacementAction, goal: Combination, cfg: &GridConfig) -> Result<StepOutcome, Error> {
    if state.done {
        return Err(Error::Invalid("step on a finished episode".into()));
    }
    try_move(state, action.grid, action.direction);
    Ok(finish(state, goal, cfg))
}

/// Object A moves first, then B against the updated board.
pub fn multi_step(state: &mut GridState, action: MultiAction, goal: Combination, cfg: &GridConfig) -> Result<StepOutcome, Error> {
    if state.done {
        return Err(Error::Invalid("step on a finished episode".into()));
    }
    let a = state.pos_a;
    try_move(state, a, action.dir_a);
    let b = state.pos_b;
    try_move(state, b, action.dir_b);
    Ok(finish(state, goal, cfg))
}

/// Grid part of an observation: normalized coordinates then one-hot shapes,
/// laid out as `[x_a, y_a, x_b, y_b, onehot(shape_a), onehot(shape_b)]`.
pub fn encode_state(state: &GridState) -> Vec<f32> {
    let mut out = vec![
        state.pos_a.x as f32 / 2.0,
        state.pos_a.y as f32 / 2.0,
        state.pos_b.x as f32 / 2.0,
        state.pos_b.y as f32 / 2.0,
    ];
    for shape in [state.shape_a, state.shape_b] {
        let mut one_hot = [0.0f32; Shape::COUNT];
        one_hot[shape.id()] = 1.0;
        out.extend_from_slice(&one_hot);
    }
    out
}

pub const STATE_FEATURES: usize = 4 + 2 * Shape::COUNT;

/// Encoded state followed by the message as `T` one-hot blocks of `vocab`.
pub fn encode_obs(state: &GridState, message: &[u8], vocab: usize) -> Vec<f32> {
    let mut out = encode_state(state);
    for &s in message {
        let mut block = vec![0.0f32; vocab];
        block[s as usize] = 1.0;
        out.extend(block);
    }
    out
}

/// JSON-lines trajectory record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub episode: u64,
    pub step: u32,
    pub state: [u8; 6],
    pub action: serde_json::Value,
    pub reward: f64,
    pub done: bool,
}

pub struct TrajectoryLog<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, entry: &TrajectoryEntry) -> Result<(), Error> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn combo(rel: Relation) -> Combination {
        Combination::new(0, 1, rel).unwrap()
    }

    #[test]
    fn relation_examples() {
        assert!(relation_satisfied(Pos::new(2, 0), Pos::new(0, 0), Relation::Right, false));
        assert!(relation_satisfied(Pos::new(1, 1), Pos::new(1, 0), Relation::Top, false));
        assert!(!relation_satisfied(Pos::new(0, 0), Pos::new(1, 0), Relation::Right, false));
        assert!(relation_satisfied(Pos::new(2, 1), Pos::new(0, 0), Relation::TopRight, false));
        assert!(!relation_satisfied(Pos::new(2, 1), Pos::new(0, 0), Relation::TopRight, true));
        assert!(relation_satisfied(Pos::new(1, 1), Pos::new(0, 0), Relation::TopRight, true));
    }

    #[test]
    fn action_index_round_trip() {
        for i in 0..NUM_PLACEMENT_ACTIONS {
            assert_eq!(PlacementAction::from_index(i).unwrap().index(), i);
        }
        assert!(PlacementAction::from_index(36).is_none());
    }

    #[test]
    fn completing_move_pays_one_and_ends() {
        let cfg = GridConfig::default();
        let goal = combo(Relation::Right);
        let mut s = GridState {
            pos_a: Pos::new(1, 1),
            pos_b: Pos::new(1, 0),
            shape_a: goal.shape_a,
            shape_b: goal.shape_b,
            steps_taken: 0,
            done: false,
        };
        // B moves left: A at (1,1), B at (0,0): dy = 1, not Right yet.
        let out = step(&mut s, PlacementAction { grid: Pos::new(1, 0), direction: Direction::Left }, goal, &cfg).unwrap();
        assert_eq!((out.reward, out.done), (-0.01, false));
        let out = step(&mut s, PlacementAction { grid: Pos::new(1, 1), direction: Direction::Down }, goal, &cfg).unwrap();
        assert_eq!((out.reward, out.done, out.success), (1.0, true, true));
        assert!(step(&mut s, PlacementAction { grid: Pos::new(0, 0), direction: Direction::Up }, goal, &cfg).is_err());
    }

    #[test]
    fn empty_cell_and_blocked_moves_leave_state() {
        let cfg = GridConfig::default();
        let goal = combo(Relation::Top);
        let mut s = GridState {
            pos_a: Pos::new(0, 0),
            pos_b: Pos::new(1, 0),
            shape_a: goal.shape_a,
            shape_b: goal.shape_b,
            steps_taken: 0,
            done: false,
        };
        let before = (s.pos_a, s.pos_b);
        let out = step(&mut s, PlacementAction { grid: Pos::new(2, 2), direction: Direction::Left }, goal, &cfg).unwrap();
        assert_eq!(out.reward, -0.01);
        assert_eq!((s.pos_a, s.pos_b), before);
        step(&mut s, PlacementAction { grid: Pos::new(0, 0), direction: Direction::Right }, goal, &cfg).unwrap();
        step(&mut s, PlacementAction { grid: Pos::new(0, 0), direction: Direction::Left }, goal, &cfg).unwrap();
        step(&mut s, PlacementAction { grid: Pos::new(0, 0), direction: Direction::Down }, goal, &cfg).unwrap();
        assert_eq!((s.pos_a, s.pos_b), before);
        assert_eq!(s.steps_taken, 4);
    }

    #[test]
    fn truncates_at_twenty_steps() {
        let cfg = GridConfig::default();
        let goal = combo(Relation::Top);
        let mut s = GridState {
            pos_a: Pos::new(0, 0),
            pos_b: Pos::new(2, 2),
            shape_a: goal.shape_a,
            shape_b: goal.shape_b,
            steps_taken: 0,
            done: false,
        };
        let idle = PlacementAction { grid: Pos::new(1, 1), direction: Direction::Up };
        for k in 1..=20 {
            let out = step(&mut s, idle, goal, &cfg).unwrap();
            assert_eq!(out.reward, -0.01);
            assert_eq!(out.done, k == 20);
        }
    }

    #[test]
    fn multi_step_resolves_a_then_b() {
        let cfg = GridConfig::default();
        let goal = combo(Relation::TopLeft);
        let mut s = GridState {
            pos_a: Pos::new(1, 1),
            pos_b: Pos::new(0, 0),
            shape_a: goal.shape_a,
            shape_b: goal.shape_b,
            steps_taken: 0,
            done: false,
        };
        // A moves right to (2,1); B tries up into (0,1): legal.
        multi_step(&mut s, MultiAction { dir_a: Direction::Right, dir_b: Direction::Up }, goal, &cfg).unwrap();
        assert_eq!((s.pos_a, s.pos_b), (Pos::new(2, 1), Pos::new(0, 1)));
        // A moves left to (1,1); B tries right into (1,1), now occupied.
        multi_step(&mut s, MultiAction { dir_a: Direction::Left, dir_b: Direction::Right }, goal, &cfg).unwrap();
        assert_eq!((s.pos_a, s.pos_b), (Pos::new(1, 1), Pos::new(0, 1)));
    }

    #[test]
    fn encode_examples() {
        let s = GridState {
            pos_a: Pos::new(0, 2),
            pos_b: Pos::new(2, 1),
            shape_a: Shape::new(3).unwrap(),
            shape_b: Shape::new(0).unwrap(),
            steps_taken: 0,
            done: false,
        };
        let obs = encode_obs(&s, &[1, 4], 5);
        assert_eq!(obs.len(), STATE_FEATURES + 10);
        assert_eq!(&obs[..4], &[0.0, 1.0, 1.0, 0.5]);
        assert_eq!(obs[4 + 3], 1.0);
        assert_eq!(obs[9], 1.0);
        assert_eq!(&obs[14..], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.tuple(), [0, 2, 3, 2, 1, 0]);
    }
}
