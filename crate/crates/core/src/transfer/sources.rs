//! What the placement Listener is told about the goal, per condition.

use std::sync::Arc;

use rand::Rng;
use relcomm_nn::{argmax, Adam, Encoder, EncoderSpec, Graph, Linear, ParamStore};
use serde::{Deserialize, Serialize};

use super::policy::{Payload, PayloadSpec};
use super::{BaselineKind, TransferConfig};
use crate::agents::{images_to_tensor, Speaker, EMBED_DIM};
use crate::gridworld::Goal;
use crate::refgame::{simclr_pretrain, SimclrOutcome};
use crate::registry::Registry;
use crate::rng::{indexed_stream, stream};
use crate::scene::{render, Combination, GeneratorConfig, Relation, SceneImage, Shape, SplitSpec};
use crate::Error;

pub trait MessageSource: Send {
    fn kind(&self) -> BaselineKind;
    fn spec(&self) -> PayloadSpec;
    fn payload(&self, goal: &Goal) -> Result<Payload, Error>;

    /// Fingerprint of the parameters the source reads, if it has any.
    fn fingerprint(&self) -> Option<u64> {
        None
    }

    /// The Speaker, for conditions that keep training it.
    fn trainable_speaker(&mut self) -> Option<&mut Speaker<f32>> {
        None
    }
}

/// Inputs available to source factories.
pub struct SourceContext<'a> {
    pub cfg: &'a TransferConfig,
    pub split: &'a SplitSpec,
    /// Referential-game Speaker, when a checkpoint was given.
    pub speaker: Option<&'a Speaker<f32>>,
}

pub type SourceFactory = fn(&SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error>;

pub fn source_registry() -> Registry<SourceFactory> {
    Registry::new("baseline")
        .with(BaselineKind::EmergentLanguage.name(), emergent_language as SourceFactory)
        .with(BaselineKind::RawPixel.name(), raw_pixel)
        .with(BaselineKind::CnnFeature.name(), cnn_feature)
        .with(BaselineKind::SimclrFeature.name(), simclr_feature)
        .with(BaselineKind::RlScratch.name(), rl_scratch)
        .with(BaselineKind::RlScratchUpdate.name(), rl_scratch_update)
        .with(BaselineKind::State.name(), state)
}

fn require_speaker<'a>(ctx: &SourceContext<'a>, kind: BaselineKind) -> Result<&'a Speaker<f32>, Error> {
    ctx.speaker.ok_or_else(|| Error::Invalid(format!("condition '{}' needs a Speaker checkpoint", kind.name())))
}

fn emergent_language(ctx: &SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error> {
    let speaker = require_speaker(ctx, BaselineKind::EmergentLanguage)?.clone();
    Ok(Box::new(SpeakerSource { kind: BaselineKind::EmergentLanguage, speaker }))
}

fn rl_scratch(ctx: &SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error> {
    let mut init = stream(ctx.cfg.seed, "transfer/init/speaker");
    let speaker = Speaker::new(&ctx.cfg.agents, EncoderSpec::reduced_alexnet(), &mut init);
    Ok(Box::new(SpeakerSource { kind: BaselineKind::RlScratch, speaker }))
}

fn rl_scratch_update(ctx: &SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error> {
    let speaker = require_speaker(ctx, BaselineKind::RlScratchUpdate)?.clone();
    Ok(Box::new(SpeakerSource { kind: BaselineKind::RlScratchUpdate, speaker }))
}

fn raw_pixel(ctx: &SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error> {
    Ok(Box::new(RawPixelSource { size: ctx.cfg.generator.image_size }))
}

fn state(_: &SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error> {
    Ok(Box::new(StateSource))
}

fn cnn_feature(ctx: &SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error> {
    let model = pretrain_cnn_classifier(&ctx.cfg.cnn, &ctx.split.train, &ctx.cfg.generator, ctx.cfg.seed)?;
    Ok(Box::new(FeatureSource { kind: BaselineKind::CnnFeature, encoder: FeatureEncoder::Cnn(model) }))
}

fn simclr_feature(ctx: &SourceContext<'_>) -> Result<Box<dyn MessageSource>, Error> {
    let mut simclr = ctx.cfg.simclr.clone();
    simclr.seed = ctx.cfg.seed;
    simclr.generator = ctx.cfg.generator;
    let outcome = simclr_pretrain(&simclr, &ctx.split.train)?;
    Ok(Box::new(FeatureSource { kind: BaselineKind::SimclrFeature, encoder: FeatureEncoder::Simclr(outcome) }))
}

/// Greedy messages of a referential-game (or scratch) Speaker.
pub struct SpeakerSource {
    kind: BaselineKind,
    pub speaker: Speaker<f32>,
}

impl MessageSource for SpeakerSource {
    fn kind(&self) -> BaselineKind {
        self.kind
    }

    fn spec(&self) -> PayloadSpec {
        let cfg = self.speaker.cfg();
        PayloadSpec::Message { len: cfg.message_len, vocab: cfg.vocab_size }
    }

    fn payload(&self, goal: &Goal) -> Result<Payload, Error> {
        let msg = self.speaker.speak(&[goal.target_image.as_ref()]).pop().expect("one message");
        Ok(Payload::Message(msg))
    }

    fn fingerprint(&self) -> Option<u64> {
        Some(self.speaker.store.fingerprint())
    }

    fn trainable_speaker(&mut self) -> Option<&mut Speaker<f32>> {
        matches!(self.kind, BaselineKind::RlScratch | BaselineKind::RlScratchUpdate).then_some(&mut self.speaker)
    }
}

pub struct RawPixelSource {
    size: usize,
}

impl MessageSource for RawPixelSource {
    fn kind(&self) -> BaselineKind {
        BaselineKind::RawPixel
    }

    fn spec(&self) -> PayloadSpec {
        PayloadSpec::Pixels { size: self.size }
    }

    fn payload(&self, goal: &Goal) -> Result<Payload, Error> {
        Ok(Payload::Pixels(Arc::clone(&goal.target_image)))
    }
}

/// One-hot shape A, shape B and relation of the goal.
pub fn state_payload(c: Combination) -> Vec<f32> {
    let mut v = vec![0.0; 2 * Shape::COUNT + Relation::COUNT];
    v[c.shape_a.id()] = 1.0;
    v[Shape::COUNT + c.shape_b.id()] = 1.0;
    v[2 * Shape::COUNT + c.relation.index()] = 1.0;
    v
}

pub struct StateSource;

impl MessageSource for StateSource {
    fn kind(&self) -> BaselineKind {
        BaselineKind::State
    }

    fn spec(&self) -> PayloadSpec {
        PayloadSpec::Vector { dim: 2 * Shape::COUNT + Relation::COUNT }
    }

    fn payload(&self, goal: &Goal) -> Result<Payload, Error> {
        Ok(Payload::Vector(state_payload(goal.combination).into()))
    }
}

enum FeatureEncoder {
    Cnn(CnnClassifier),
    Simclr(SimclrOutcome),
}

/// Unit-norm 216-dim features from a frozen pretrained encoder.
pub struct FeatureSource {
    kind: BaselineKind,
    encoder: FeatureEncoder,
}

impl MessageSource for FeatureSource {
    fn kind(&self) -> BaselineKind {
        self.kind
    }

    fn spec(&self) -> PayloadSpec {
        PayloadSpec::Vector { dim: EMBED_DIM }
    }

    fn payload(&self, goal: &Goal) -> Result<Payload, Error> {
        let img = [goal.target_image.as_ref()];
        let f = match &self.encoder {
            FeatureEncoder::Cnn(m) => m.features(&img),
            FeatureEncoder::Simclr(o) => o.features(&img).into_data(),
        };
        Ok(Payload::Vector(f.into()))
    }

    fn fingerprint(&self) -> Option<u64> {
        Some(match &self.encoder {
            FeatureEncoder::Cnn(m) => m.store.fingerprint(),
            FeatureEncoder::Simclr(o) => o.store.fingerprint(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnPretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Stop once accuracy on a fixed set of fresh renders reaches this.
    pub target_accuracy: f64,
    pub eval_every: u64,
    /// Fresh renders per class for the stopping check and the final report.
    pub eval_renders: usize,
}

impl Default for CnnPretrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 64, max_steps: 6000, target_accuracy: 0.97, eval_every: 250, eval_renders: 5 }
    }
}

/// Reduced-AlexNet encoder trained as a classifier over the training
/// combinations.
pub struct CnnClassifier {
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub head: Linear,
    pub classes: Vec<Combination>,
    pub steps: u64,
    /// On renders never used for training or for the stopping rule.
    pub heldout_accuracy: f64,
}

impl CnnClassifier {
    pub fn features(&self, images: &[&SceneImage]) -> Vec<f32> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(images));
        let f = self.encoder.forward(&mut g, &self.store, x);
        let f = g.l2_normalize_rows(f, 1e-8);
        g.value(f).data().to_vec()
    }

    pub fn predict(&self, images: &[&SceneImage]) -> Vec<usize> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(images));
        let f = self.encoder.forward(&mut g, &self.store, x);
        let logits = self.head.forward(&mut g, &self.store, f);
        let lv = g.value(logits);
        (0..images.len()).map(|r| argmax(lv.row(r))).collect()
    }

    pub fn accuracy(&self, images: &[SceneImage], labels: &[usize]) -> f64 {
        let mut correct = 0;
        for (chunk, ys) in images.chunks(100).zip(labels.chunks(100)) {
            let refs: Vec<&SceneImage> = chunk.iter().collect();
            correct += self.predict(&refs).iter().zip(ys).filter(|(p, y)| p == y).count();
        }
        correct as f64 / labels.len() as f64
    }
}

fn labelled(
    classes: &[Combination],
    per_class: usize,
    generator: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<SceneImage>, Vec<usize>), Error> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (k, &c) in classes.iter().enumerate() {
        for _ in 0..per_class {
            images.push(render(c, rng, generator)?.0);
            labels.push(k);
        }
    }
    Ok((images, labels))
}

pub fn pretrain_cnn_classifier(
    cfg: &CnnPretrainConfig,
    classes: &[Combination],
    generator: &GeneratorConfig,
    seed: u64,
) -> Result<CnnClassifier, Error> {
    let mut init = stream(seed, "init/cnn-feature");
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, "encoder", EncoderSpec::reduced_alexnet(), &mut init);
    let head = Linear::plain(&mut store, "head", encoder.output_dim(), classes.len(), &mut init);
    let (stop_x, stop_y) = labelled(classes, cfg.eval_renders, generator, &mut stream(seed, "cnn-feature/stop"))?;
    let mut model = CnnClassifier {
        store,
        encoder,
        head,
        classes: classes.to_vec(),
        steps: 0,
        heldout_accuracy: 0.0,
    };
    let adam = Adam::new(cfg.lr);
    while model.steps < cfg.max_steps {
        let mut rng = indexed_stream(seed, "cnn-feature/train", model.steps);
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(0..classes.len());
            images.push(render(classes[k], &mut rng, generator)?.0);
            labels.push(k);
        }
        let refs: Vec<&SceneImage> = images.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&refs));
        let f = model.encoder.forward(&mut g, &model.store, x);
        let logits = model.head.forward(&mut g, &model.store, f);
        let loss = g.cross_entropy_mean(logits, &labels);
        g.backward_into(loss, &mut model.store);
        adam.step(&mut model.store);
        model.steps += 1;
        if model.steps % cfg.eval_every == 0 && model.accuracy(&stop_x, &stop_y) >= cfg.target_accuracy {
            break;
        }
    }
    let (test_x, test_y) = labelled(classes, cfg.eval_renders, generator, &mut stream(seed, "cnn-feature/heldout"))?;
    model.heldout_accuracy = model.accuracy(&test_x, &test_y);
    Ok(model)
}
