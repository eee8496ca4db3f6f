//! Language and representation metrics: edit distance, attribute distance,
//! Spearman correlation, topographic similarity, the linear visual probe
//! and message-based classification with a fresh Listener.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use relcomm_nn::{Adam, Graph, Linear, LstmCell, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::agents::{Message, Speaker, LISTENER_HIDDEN};
use crate::refgame::{evaluate, GameConfig, GameState};
use crate::registry::Registry;
use crate::rng::{stream, SimRng};
use crate::scene::{render, Combination, DatasetRegime, GeneratorConfig, SceneImage, SplitSpec};
use crate::Error;

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Number of attributes (shape A, shape B, relation) that differ.
pub fn tuple_distance(a: Combination, b: Combination) -> usize {
    usize::from(a.shape_a != b.shape_a) + usize::from(a.shape_b != b.shape_b) + usize::from(a.relation != b.relation)
}

/// Correlation that may be undefined when an input has zero variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// NaN when undefined.
    pub value: f64,
    pub defined: bool,
}

impl Correlation {
    pub fn undefined() -> Self {
        Self { value: f64::NAN, defined: false }
    }
}

/// Fractional ranks starting at 1, ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Correlation {
    assert_eq!(x.len(), y.len(), "length mismatch");
    let n = x.len() as f64;
    if x.len() < 2 {
        return Correlation::undefined();
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Correlation::undefined();
    }
    Correlation { value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), defined: true }
}

pub fn spearman(x: &[f64], y: &[f64]) -> Correlation {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// TopSim over all unordered pairs of `(meaning, message)` items.
pub fn topsim_of(items: &[(Combination, Message)]) -> Correlation {
    let mut semantic = Vec::new();
    let mut lexical = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            semantic.push(tuple_distance(items[i].0, items[j].0) as f64);
            lexical.push(levenshtein(items[i].1.symbols(), items[j].1.symbols()) as f64);
        }
    }
    spearman(&semantic, &lexical)
}

/// Mean TopSim of a Speaker's greedy messages over `resamples` independent
/// rounds of `renders_per_combination` random renders per combination.
pub fn topsim(
    speaker: &Speaker<f32>,
    combinations: &[Combination],
    renders_per_combination: usize,
    resamples: usize,
    generator: &GeneratorConfig,
    rng: &mut SimRng,
) -> Result<Correlation, Error> {
    if combinations.len() < 2 {
        return Err(Error::Invalid("topsim needs at least 2 combinations".into()));
    }
    let mut sum = 0.0;
    for _ in 0..resamples {
        let mut metas = Vec::new();
        let mut images = Vec::new();
        for &c in combinations {
            for _ in 0..renders_per_combination {
                metas.push(c);
                images.push(render(c, rng, generator)?.0);
            }
        }
        let messages = speak_in_chunks(speaker, &images);
        let items: Vec<(Combination, Message)> = metas.into_iter().zip(messages).collect();
        let r = topsim_of(&items);
        if !r.defined {
            return Ok(Correlation::undefined());
        }
        sum += r.value;
    }
    Ok(Correlation { value: sum / resamples as f64, defined: true })
}

fn speak_in_chunks(speaker: &Speaker<f32>, images: &[SceneImage]) -> Vec<Message> {
    images
        .chunks(64)
        .flat_map(|chunk| speaker.speak(&chunk.iter().collect::<Vec<_>>()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fresh training renders per class.
    pub train_renders: usize,
    /// Fresh held-out renders per class.
    pub test_renders: usize,
    /// ETL only: train the message encoder together with the linear head.
    pub train_encoder: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr: 3e-4, batch_size: 128, epochs: 100, train_renders: 50, test_renders: 25, train_encoder: true }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (name, ok) in [
            ("lr", self.lr > 0.0),
            ("batch_size", self.batch_size > 0),
            ("epochs", self.epochs > 0),
            ("train_renders", self.train_renders > 0),
            ("test_renders", self.test_renders > 0),
        ] {
            if !ok {
                return Err(Error::Config { path: name.into(), message: "must be positive".into() });
            }
        }
        Ok(())
    }
}

/// Labelled random renders, `per_class` for each class in order.
fn labelled_renders(
    classes: &[Combination],
    per_class: usize,
    generator: &GeneratorConfig,
    rng: &mut SimRng,
) -> Result<(Vec<SceneImage>, Vec<usize>), Error> {
    let mut images = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for (label, &c) in classes.iter().enumerate() {
        for _ in 0..per_class {
            images.push(render(c, rng, generator)?.0);
            labels.push(label);
        }
    }
    Ok((images, labels))
}

fn speaker_features(speaker: &Speaker<f32>, images: &[SceneImage]) -> Tensor<f32> {
    let mut data = Vec::new();
    for chunk in images.chunks(64) {
        data.extend_from_slice(speaker.features(&chunk.iter().collect::<Vec<_>>()).data());
    }
    let dim = data.len() / images.len().max(1);
    Tensor::from_vec(&[images.len(), dim], data)
}

fn rows_of(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let w = t.row_len();
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::from_vec(&[idx.len(), w], out)
}

/// Held-out accuracy of a linear classifier trained on fixed input rows.
pub fn linear_probe(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    test_x: &Tensor<f32>,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    rng: &mut SimRng,
) -> f64 {
    let mut store = ParamStore::<f32>::new();
    let head = Linear::plain(&mut store, "probe", train_x.row_len(), classes, rng);
    let adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.constant(rows_of(train_x, batch));
            let logits = head.forward(&mut g, &store, x);
            let targets: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let loss = g.cross_entropy_mean(logits, &targets);
            g.backward_into(loss, &mut store);
            adam.step(&mut store);
        }
    }
    let mut g = Graph::new();
    let x = g.constant(test_x.clone());
    let logits = head.forward(&mut g, &store, x);
    let lv = g.value(logits);
    let correct = test_y.iter().enumerate().filter(|&(r, &y)| relcomm_nn::argmax(lv.row(r)) == y).count();
    correct as f64 / test_y.len() as f64
}

/// Linear classification of the held-out combinations from the Speaker's
/// frozen encoder features.
pub fn visual_probe(
    speaker: &Speaker<f32>,
    classes: &[Combination],
    generator: &GeneratorConfig,
    cfg: &ProbeConfig,
    rng: &mut SimRng,
) -> Result<f64, Error> {
    cfg.validate()?;
    let (train_imgs, train_y) = labelled_renders(classes, cfg.train_renders, generator, rng)?;
    let (test_imgs, test_y) = labelled_renders(classes, cfg.test_renders, generator, rng)?;
    let train_x = speaker_features(speaker, &train_imgs);
    let test_x = speaker_features(speaker, &test_imgs);
    Ok(linear_probe(&train_x, &train_y, &test_x, &test_y, classes.len(), cfg, rng))
}

/// Classification of the held-out combinations by a fresh Listener that
/// reads only the Speaker's greedy messages.
pub fn etl_classification(
    speaker: &Speaker<f32>,
    classes: &[Combination],
    generator: &GeneratorConfig,
    cfg: &ProbeConfig,
    rng: &mut SimRng,
) -> Result<f64, Error> {
    cfg.validate()?;
    let (train_imgs, train_y) = labelled_renders(classes, cfg.train_renders, generator, rng)?;
    let (test_imgs, test_y) = labelled_renders(classes, cfg.test_renders, generator, rng)?;
    let train_m = speak_in_chunks(speaker, &train_imgs);
    let test_m = speak_in_chunks(speaker, &test_imgs);
    let agent = speaker.cfg();
    Ok(message_classifier(&train_m, &train_y, &test_m, &test_y, classes.len(), agent.vocab_size, cfg, rng))
}

/// Fresh LSTM message encoder plus linear head.
struct MessageClassifier {
    store: ParamStore<f32>,
    lstm: LstmCell,
    head: Linear,
    vocab: usize,
}

impl MessageClassifier {
    /// Logits for each distinct message in `distinct`.
    fn logits(&self, g: &mut Graph<f32>, distinct: &[&Message]) -> relcomm_nn::NodeId {
        let n = distinct.len();
        let mut h = g.constant(Tensor::zeros(&[n, LISTENER_HIDDEN]));
        let mut c = g.constant(Tensor::zeros(&[n, LISTENER_HIDDEN]));
        let len = distinct.first().map_or(0, |m| m.len());
        for t in 0..len {
            let sym: Vec<usize> = distinct.iter().map(|m| m.symbols()[t] as usize).collect();
            let x = g.constant(Tensor::one_hot(&sym, self.vocab));
            (h, c) = self.lstm.step(g, &self.store, x, h, c);
        }
        self.head.forward(g, &self.store, h)
    }
}

#[allow(clippy::too_many_arguments)]
fn message_classifier(
    train_m: &[Message],
    train_y: &[usize],
    test_m: &[Message],
    test_y: &[usize],
    classes: usize,
    vocab: usize,
    cfg: &ProbeConfig,
    rng: &mut SimRng,
) -> f64 {
    let mut store = ParamStore::<f32>::new();
    let lstm = LstmCell::new(&mut store, "lstm", vocab, LISTENER_HIDDEN, rng);
    let head = Linear::plain(&mut store, "head", LISTENER_HIDDEN, classes, rng);
    if !cfg.train_encoder {
        store.set_trainable_prefix("lstm.", false);
    }
    let mut model = MessageClassifier { store, lstm, head, vocab };
    let adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let (distinct, idx) = dedup(batch.iter().map(|&i| &train_m[i]));
            let mut g = Graph::new();
            let logits = model.logits(&mut g, &distinct);
            let logits = g.gather_rows(logits, &idx);
            let targets: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let loss = g.cross_entropy_mean(logits, &targets);
            g.backward_into(loss, &mut model.store);
            adam.step(&mut model.store);
        }
    }
    let (distinct, idx) = dedup(test_m.iter());
    let mut g = Graph::new();
    let logits = model.logits(&mut g, &distinct);
    let lv = g.value(logits);
    let correct = test_y.iter().zip(&idx).filter(|&(&y, &k)| relcomm_nn::argmax(lv.row(k)) == y).count();
    correct as f64 / test_y.len() as f64
}

fn dedup<'a>(messages: impl Iterator<Item = &'a Message>) -> (Vec<&'a Message>, Vec<usize>) {
    let mut distinct = Vec::new();
    let mut slot = HashMap::new();
    let idx = messages
        .map(|m| {
            *slot.entry(m).or_insert_with(|| {
                distinct.push(m);
                distinct.len() - 1
            })
        })
        .collect();
    (distinct, idx)
}

/// Number of distinct messages among `messages`.
pub fn vocabulary_size(messages: &[Message]) -> usize {
    messages.iter().collect::<BTreeSet<_>>().len()
}

/// Scalar result of a named metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub defined: bool,
}

/// Everything a metric may read. Models are never mutated.
pub struct MetricContext<'a> {
    pub state: &'a GameState,
    pub game: &'a GameConfig,
    pub split: &'a SplitSpec,
    pub probe: &'a ProbeConfig,
    pub seed: u64,
}

pub trait Metric: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, ctx: &MetricContext<'_>) -> Result<MetricValue, Error>;
}

fn defined(value: f64) -> MetricValue {
    MetricValue { value, defined: true }
}

/// Greedy test accuracy on Random-regime episodes over the held-out pool.
pub struct Accuracy;

impl Metric for Accuracy {
    fn name(&self) -> &'static str {
        "accuracy"
    }

    fn evaluate(&self, ctx: &MetricContext<'_>) -> Result<MetricValue, Error> {
        let regime = DatasetRegime::Random.build(ctx.game.generator, ctx.seed)?;
        let mut rng = stream(ctx.seed, "metric/accuracy");
        let acc = evaluate(
            ctx.state,
            regime.as_ref(),
            &ctx.split.test,
            ctx.game.test_candidates,
            ctx.game.eval_episodes,
            &mut rng,
        )?;
        Ok(defined(acc))
    }
}

pub struct TopSim;

impl Metric for TopSim {
    fn name(&self) -> &'static str {
        "topsim"
    }

    fn evaluate(&self, ctx: &MetricContext<'_>) -> Result<MetricValue, Error> {
        let mut rng = stream(ctx.seed, "metric/topsim");
        let combos = crate::scene::enumerate_combinations();
        let r = topsim(&ctx.state.speaker, &combos, 1, 5, &ctx.game.generator, &mut rng)?;
        Ok(MetricValue { value: r.value, defined: r.defined })
    }
}

pub struct VisualProbe;

impl Metric for VisualProbe {
    fn name(&self) -> &'static str {
        "visual-probe"
    }

    fn evaluate(&self, ctx: &MetricContext<'_>) -> Result<MetricValue, Error> {
        let mut rng = stream(ctx.seed, "metric/visual-probe");
        let acc = visual_probe(&ctx.state.speaker, &ctx.split.test, &ctx.game.generator, ctx.probe, &mut rng)?;
        Ok(defined(acc))
    }
}

pub struct EtlClassification;

impl Metric for EtlClassification {
    fn name(&self) -> &'static str {
        "etl"
    }

    fn evaluate(&self, ctx: &MetricContext<'_>) -> Result<MetricValue, Error> {
        let mut rng = stream(ctx.seed, "metric/etl");
        let acc = etl_classification(&ctx.state.speaker, &ctx.split.test, &ctx.game.generator, ctx.probe, &mut rng)?;
        Ok(defined(acc))
    }
}

pub fn metric_registry() -> Registry<Box<dyn Metric>> {
    let metrics: Vec<Box<dyn Metric>> = vec![Box::new(Accuracy), Box::new(TopSim), Box::new(VisualProbe), Box::new(EtlClassification)];
    metrics.into_iter().fold(Registry::new("metric"), |r, m| r.with(m.name(), m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Relation;

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[0, 1, 2], &[0, 1, 3]), 1);
        assert_eq!(levenshtein(&[0, 1, 2, 3], &[1, 2, 3, 4]), 2);
        assert_eq!(levenshtein::<u8>(&[], &[1, 2]), 2);
    }

    #[test]
    fn tuple_distance_examples() {
        let a = Combination::new(0, 1, Relation::Top).unwrap();
        assert_eq!(tuple_distance(a, a), 0);
        assert_eq!(tuple_distance(a, Combination::new(0, 1, Relation::Right).unwrap()), 1);
        assert_eq!(tuple_distance(a, Combination::new(2, 3, Relation::Right).unwrap()), 3);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).value - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).value + 1.0).abs() < 1e-12);
        let flat = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        assert!(!flat.defined && flat.value.is_nan());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
    }

    #[test]
    fn registry_lists_all_metrics() {
        assert_eq!(metric_registry().names(), vec!["accuracy", "etl", "topsim", "visual-probe"]);
        assert!(metric_registry().get("bleu").is_err());
    }
}
