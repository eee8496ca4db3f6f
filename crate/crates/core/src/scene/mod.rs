//! Procedural two-object scenes: the combination space, the train/test
//! split, the randomized renderer and the three dataset regimes.

mod dump;
mod regime;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::Error;

pub use dump::{dump_dataset, DumpEntry};
pub use regime::{
    regime_registry, sample_episode, DatasetRegime, Episode, FixedRegime, RandomRegime, SceneRegime,
    VariationRegime,
};
pub use render::{
    add_noise, canonical_params, render, render_with_params, GeneratorConfig, RenderParams, SceneImage,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Shape(u8);

impl Shape {
    pub const COUNT: usize = 5;
    const NAMES: [&'static str; 5] = ["circle", "square", "triangle", "star", "cross"];

    pub fn new(id: usize) -> Option<Self> {
        (id < Self::COUNT).then_some(Self(id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.id()]
    }

    pub fn all() -> impl Iterator<Item = Shape> {
        (0..Self::COUNT as u8).map(Shape)
    }
}

impl TryFrom<u8> for Shape {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        Shape::new(v as usize).ok_or_else(|| format!("shape id {v} out of range"))
    }
}

impl From<Shape> for u8 {
    fn from(s: Shape) -> u8 {
        s.0
    }
}

/// Position of object A relative to object B.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Right,
    TopRight,
    Top,
    TopLeft,
}

impl Relation {
    pub const COUNT: usize = 4;
    pub const ALL: [Relation; 4] = [Relation::Right, Relation::TopRight, Relation::Top, Relation::TopLeft];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Right => "right",
            Relation::TopRight => "top_right",
            Relation::Top => "top",
            Relation::TopLeft => "top_left",
        }
    }

    /// Displacement intervals `(dx, dy)` of A relative to B at the 128-pixel
    /// reference resolution, y pointing up.
    pub fn displacement_intervals(self) -> ((f64, f64), (f64, f64)) {
        const NEAR: (f64, f64) = (-5.0, 5.0);
        const FAR: (f64, f64) = (50.0, 88.0);
        const FAR_NEG: (f64, f64) = (-88.0, -50.0);
        match self {
            Relation::Right => (FAR, NEAR),
            Relation::TopRight => (FAR, FAR),
            Relation::Top => (NEAR, FAR),
            Relation::TopLeft => (FAR_NEG, FAR),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown relation '{s}'")))
    }
}

/// The semantic content of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combination {
    pub shape_a: Shape,
    pub shape_b: Shape,
    pub relation: Relation,
}

impl Combination {
    pub const COUNT: usize = Shape::COUNT * Shape::COUNT * Relation::COUNT;

    pub fn new(shape_a: usize, shape_b: usize, relation: Relation) -> Option<Self> {
        Some(Self { shape_a: Shape::new(shape_a)?, shape_b: Shape::new(shape_b)?, relation })
    }

    /// Position in the canonical (shape_a, shape_b, relation) order.
    pub fn index(self) -> usize {
        (self.shape_a.id() * Shape::COUNT + self.shape_b.id()) * Relation::COUNT + self.relation.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i >= Self::COUNT {
            return None;
        }
        let rel = Relation::from_index(i % Relation::COUNT)?;
        let ab = i / Relation::COUNT;
        Self::new(ab / Shape::COUNT, ab % Shape::COUNT, rel)
    }

    /// `{shapeA}_{shapeB}_{relation}`.
    pub fn label(self) -> String {
        format!("{}_{}_{}", self.shape_a.name(), self.shape_b.name(), self.relation.name())
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// All 100 combinations, lexicographic by (shape_a, shape_b, relation).
pub fn enumerate_combinations() -> Vec<Combination> {
    (0..Combination::COUNT).map(|i| Combination::from_index(i).expect("in range")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<Combination>,
    pub test: Vec<Combination>,
    pub seed: u64,
}

impl SplitSpec {
    pub const TEST_SIZE: usize = 20;

    fn covers_all_attributes(train: &[Combination]) -> bool {
        Shape::all().all(|s| train.iter().any(|c| c.shape_a == s || c.shape_b == s))
            && Relation::ALL.iter().all(|r| train.iter().any(|c| c.relation == *r))
    }

    pub fn is_valid(&self) -> bool {
        let mut all: Vec<usize> = self.train.iter().chain(&self.test).map(|c| c.index()).collect();
        all.sort_unstable();
        all.dedup();
        self.test.len() == Self::TEST_SIZE
            && self.train.len() == Combination::COUNT - Self::TEST_SIZE
            && all.len() == Combination::COUNT
            && Self::covers_all_attributes(&self.train)
    }
}

/// Deterministic 80/20 split of the combinations; both halves sorted
/// canonically.
pub fn split_combinations(seed: u64) -> SplitSpec {
    let mut rng = stream(seed, "split");
    loop {
        let mut all = enumerate_combinations();
        all.shuffle(&mut rng);
        let mut test = all.split_off(Combination::COUNT - SplitSpec::TEST_SIZE);
        let mut train = all;
        if SplitSpec::covers_all_attributes(&train) {
            train.sort();
            test.sort();
            return SplitSpec { train, test, seed };
        }
    }
}
