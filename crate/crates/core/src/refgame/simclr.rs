//! Contrastive pretraining of the image encoder: two independent renders
//! of the same combination form a positive pair.

use rand::seq::index;
use relcomm_nn::{Adam, Encoder, EncoderSpec, Graph, Linear, NodeId, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::agents::images_to_tensor;
use crate::rng::{indexed_stream, stream};
use crate::scene::{render, Combination, GeneratorConfig, SceneImage};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimclrConfig {
    pub steps: u64,
    /// Views per batch; half as many combinations.
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for SimclrConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 128,
            lr: 3e-4,
            temperature: 0.5,
            proj_hidden: 128,
            proj_dim: 64,
            seed: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

impl SimclrConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config { path: "batch_size".into(), message: "must be a positive even number".into() });
        }
        for (name, v) in [("lr", self.lr), ("temperature", self.temperature)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config { path: name.into(), message: format!("must be positive, got {v}") });
            }
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::Config { path: "proj_dim".into(), message: "projector sizes must be positive".into() });
        }
        self.generator.validate().map_err(|e| e.at("generator"))
    }
}

/// NT-Xent over `z: [2N, d]` whose rows `2k` and `2k + 1` are positives.
pub fn nt_xent<T: Scalar>(g: &mut Graph<T>, z: NodeId, temperature: f64) -> NodeId {
    let n2 = g.value(z).dim(0);
    assert!(n2 >= 2 && n2 % 2 == 0, "need an even number of views");
    let zn = g.l2_normalize_rows(z, T::lit(1e-8));
    let sims = g.matmul_t(zn, zn);
    let sims = g.scale(sims, T::lit(1.0 / temperature));
    let mut mask = Tensor::zeros(&[n2, n2]);
    for i in 0..n2 {
        mask.data_mut()[i * n2 + i] = T::lit(-1e9);
    }
    let logits = g.add_const(sims, &mask);
    let targets: Vec<usize> = (0..n2).map(|i| i ^ 1).collect();
    g.cross_entropy_mean(logits, &targets)
}

pub struct SimclrOutcome {
    /// Encoder parameters (named `encoder.*`) plus the discarded head.
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub losses: Vec<f64>,
}

impl SimclrOutcome {
    /// Unit-norm encoder features `[n, 216]` for `images`.
    pub fn features(&self, images: &[&SceneImage]) -> Tensor<f32> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(images));
        let f = self.encoder.forward(&mut g, &self.store, x);
        let f = g.l2_normalize_rows(f, 1e-8);
        g.value(f).clone()
    }
}

pub fn simclr_pretrain(cfg: &SimclrConfig, pool: &[Combination]) -> Result<SimclrOutcome, Error> {
    cfg.validate()?;
    let pairs = cfg.batch_size / 2;
    let mut init = stream(cfg.seed, "init/simclr");
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, "encoder", EncoderSpec::reduced_alexnet(), &mut init);
    let head1 = Linear::relu(&mut store, "head1", encoder.output_dim(), cfg.proj_hidden, &mut init);
    let head2 = Linear::plain(&mut store, "head2", cfg.proj_hidden, cfg.proj_dim, &mut init);
    let adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = indexed_stream(cfg.seed, "simclr", step);
        let combos: Vec<Combination> = if pool.len() >= pairs {
            index::sample(&mut rng, pool.len(), pairs).iter().map(|i| pool[i]).collect()
        } else {
            use rand::Rng;
            (0..pairs).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        let mut views = Vec::with_capacity(2 * pairs);
        for c in combos {
            views.push(render(c, &mut rng, &cfg.generator)?.0);
            views.push(render(c, &mut rng, &cfg.generator)?.0);
        }
        let refs: Vec<&SceneImage> = views.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&refs));
        let f = encoder.forward(&mut g, &store, x);
        let h = head1.forward(&mut g, &store, f);
        let h = g.relu(h);
        let z = head2.forward(&mut g, &store, h);
        let loss = nt_xent(&mut g, z, cfg.temperature);
        g.backward_into(loss, &mut store);
        adam.step(&mut store);
        losses.push(g.value(loss).item() as f64);
    }
    Ok(SimclrOutcome { store, encoder, losses })
}
