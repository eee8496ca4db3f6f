use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{add_noise, canonical_params, render, render_with_params};
use super::{enumerate_combinations, Combination, GeneratorConfig, SceneImage};
use crate::registry::Registry;
use crate::rng::{stream, SimRng};
use crate::Error;

/// How target images are instantiated for the two roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRegime {
    Fixed,
    Variation,
    Random,
}

impl DatasetRegime {
    pub const ALL: [DatasetRegime; 3] = [DatasetRegime::Fixed, DatasetRegime::Variation, DatasetRegime::Random];

    pub fn name(self) -> &'static str {
        match self {
            DatasetRegime::Fixed => "fixed",
            DatasetRegime::Variation => "variation",
            DatasetRegime::Random => "random",
        }
    }

    /// Instantiates the registered strategy for this regime.
    pub fn build(self, cfg: GeneratorConfig, seed: u64) -> Result<Box<dyn SceneRegime>, Error> {
        cfg.validate()?;
        let factory = *regime_registry().get(self.name())?;
        Ok(factory(cfg, seed))
    }
}

impl fmt::Display for DatasetRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownName { kind: "regime", name: s.into(), available: "fixed, random, variation".into() })
    }
}

/// Image source for one dataset regime.
pub trait SceneRegime: Send + Sync {
    fn kind(&self) -> DatasetRegime;
    fn config(&self) -> &GeneratorConfig;
    /// Speaker's and Listener's views of the same target combination.
    fn target_views(&self, combo: Combination, rng: &mut SimRng) -> Result<(Arc<SceneImage>, Arc<SceneImage>), Error>;
    /// A Listener-side image of `combo` (used for distractors).
    fn view(&self, combo: Combination, rng: &mut SimRng) -> Result<Arc<SceneImage>, Error>;
}

pub type RegimeFactory = fn(GeneratorConfig, u64) -> Box<dyn SceneRegime>;

pub fn regime_registry() -> Registry<RegimeFactory> {
    fn fixed(cfg: GeneratorConfig, seed: u64) -> Box<dyn SceneRegime> {
        Box::new(FixedRegime::new(cfg, seed))
    }
    fn variation(cfg: GeneratorConfig, _: u64) -> Box<dyn SceneRegime> {
        Box::new(VariationRegime { cfg })
    }
    fn random(cfg: GeneratorConfig, _: u64) -> Box<dyn SceneRegime> {
        Box::new(RandomRegime { cfg })
    }
    Registry::new("regime")
        .with("fixed", fixed as RegimeFactory)
        .with("variation", variation)
        .with("random", random)
}

/// One cached image per combination for the whole run.
pub struct FixedRegime {
    cfg: GeneratorConfig,
    images: Vec<Arc<SceneImage>>,
}

impl FixedRegime {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Self {
        let images = enumerate_combinations()
            .into_iter()
            .map(|c| {
                let clean = render_with_params(c, &canonical_params(c, &cfg), cfg.image_size);
                let mut rng = stream(seed, &format!("fixed/{}", c.index()));
                Arc::new(add_noise(&clean, cfg.noise_std, &mut rng))
            })
            .collect();
        Self { cfg, images }
    }
}

impl SceneRegime for FixedRegime {
    fn kind(&self) -> DatasetRegime {
        DatasetRegime::Fixed
    }

    fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn target_views(&self, combo: Combination, _: &mut SimRng) -> Result<(Arc<SceneImage>, Arc<SceneImage>), Error> {
        let img = self.images[combo.index()].clone();
        Ok((img.clone(), img))
    }

    fn view(&self, combo: Combination, _: &mut SimRng) -> Result<Arc<SceneImage>, Error> {
        Ok(self.images[combo.index()].clone())
    }
}

/// Fresh render per episode, shared by both roles.
pub struct VariationRegime {
    cfg: GeneratorConfig,
}

impl SceneRegime for VariationRegime {
    fn kind(&self) -> DatasetRegime {
        DatasetRegime::Variation
    }

    fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn target_views(&self, combo: Combination, rng: &mut SimRng) -> Result<(Arc<SceneImage>, Arc<SceneImage>), Error> {
        let img = Arc::new(render(combo, rng, &self.cfg)?.0);
        Ok((img.clone(), img))
    }

    fn view(&self, combo: Combination, rng: &mut SimRng) -> Result<Arc<SceneImage>, Error> {
        Ok(Arc::new(render(combo, rng, &self.cfg)?.0))
    }
}

/// Independent renders for Speaker and Listener.
pub struct RandomRegime {
    cfg: GeneratorConfig,
}

impl SceneRegime for RandomRegime {
    fn kind(&self) -> DatasetRegime {
        DatasetRegime::Random
    }

    fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn target_views(&self, combo: Combination, rng: &mut SimRng) -> Result<(Arc<SceneImage>, Arc<SceneImage>), Error> {
        let speaker = Arc::new(render(combo, rng, &self.cfg)?.0);
        let listener = Arc::new(render(combo, rng, &self.cfg)?.0);
        Ok((speaker, listener))
    }

    fn view(&self, combo: Combination, rng: &mut SimRng) -> Result<Arc<SceneImage>, Error> {
        Ok(Arc::new(render(combo, rng, &self.cfg)?.0))
    }
}

/// One referential-game round.
#[derive(Clone, Debug)]
pub struct Episode {
    pub speaker_target: Arc<SceneImage>,
    pub candidates: Vec<Arc<SceneImage>>,
    pub candidate_combinations: Vec<Combination>,
    pub target_index: usize,
    pub target_combination: Combination,
}

/// Draws a target uniformly from `pool` and `num_candidates - 1` distinct
/// distractor combinations, then shuffles the candidate order.
pub fn sample_episode(
    regime: &dyn SceneRegime,
    pool: &[Combination],
    num_candidates: usize,
    rng: &mut SimRng,
) -> Result<Episode, Error> {
    if num_candidates == 0 || pool.len() < num_candidates {
        return Err(Error::PoolTooSmall { pool: pool.len(), needed: num_candidates });
    }
    let t = rng.random_range(0..pool.len());
    let target = pool[t];
    let others: Vec<Combination> = pool.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, c)| *c).collect();
    let picked = index::sample(rng, others.len(), num_candidates - 1);
    let mut combos = vec![target];
    combos.extend(picked.iter().map(|i| others[i]));
    let mut order: Vec<usize> = (0..num_candidates).collect();
    order.shuffle(rng);

    let (speaker_target, listener_target) = regime.target_views(target, rng)?;
    let mut images = vec![listener_target];
    for &c in &combos[1..] {
        images.push(regime.view(c, rng)?);
    }
    let candidates = order.iter().map(|&i| images[i].clone()).collect();
    let candidate_combinations = order.iter().map(|&i| combos[i]).collect();
    let target_index = order.iter().position(|&i| i == 0).expect("target present");
    Ok(Episode { speaker_target, candidates, candidate_combinations, target_index, target_combination: target })
}
