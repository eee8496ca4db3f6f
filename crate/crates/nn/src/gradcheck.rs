//! Central finite-difference gradient checks in 64-bit precision.

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::SeedableRng;

use crate::graph::{Graph, NodeId};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the tensor (parameter name or `input[i]`) holding the worst element.
    pub worst: String,
    pub checked: usize,
    /// Elements skipped because a perturbation crossed a ReLU/pool/clamp kink.
    pub skipped_kinks: usize,
}

/// Which elements to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many randomly chosen elements per tensor.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate<F>(f: &F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Eval
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, store, &ids);
    Eval { loss: g.value(loss).item(), signature: g.kink_signature() }
}

fn pick_elements(n: usize, coverage: Coverage, salt: usize) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..n).collect(),
        Coverage::Sampled { per_tensor, seed } => {
            if n <= per_tensor {
                return (0..n).collect();
            }
            let mut rng = StdRng::seed_from_u64(
                seed ^ (salt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let mut idx = sample(&mut rng, n, per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences, for every trainable parameter element and every input
/// element covered by `coverage`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    coverage: Coverage,
    f: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &ids);
    let base_sig = g.kink_signature();
    let grads = g.backward(loss);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    let record = |report: &mut GradCheckReport, name: &str, analytic: f64, plus: Eval, minus: Eval| {
        if plus.signature != base_sig || minus.signature != base_sig {
            report.skipped_kinks += 1;
            return;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = name.to_string();
        }
    };

    let param_ids: Vec<_> = (0..store.len()).map(crate::ParamId).collect();
    for (salt, pid) in param_ids.into_iter().enumerate() {
        if !store.get(pid).trainable {
            continue;
        }
        let name = store.get(pid).name.clone();
        let analytic = g
            .param_node(store, pid)
            .and_then(|n| grads.get(n))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(pid).value.numel()]);
        for i in pick_elements(analytic.len(), coverage, salt) {
            let orig = store.get(pid).value.data()[i];
            store.get_mut(pid).value.data_mut()[i] = orig + eps;
            let plus = evaluate(&f, store, inputs);
            store.get_mut(pid).value.data_mut()[i] = orig - eps;
            let minus = evaluate(&f, store, inputs);
            store.get_mut(pid).value.data_mut()[i] = orig;
            record(&mut report, &name, analytic[i], plus, minus);
        }
    }

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic =
            grads.get(*id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let name = format!("input[{k}]");
        for i in pick_elements(analytic.len(), coverage, 10_000 + k) {
            let orig = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = orig + eps;
            let plus = evaluate(&f, store, &perturbed);
            perturbed[k].data_mut()[i] = orig - eps;
            let minus = evaluate(&f, store, &perturbed);
            perturbed[k].data_mut()[i] = orig;
            record(&mut report, &name, analytic[i], plus, minus);
        }
    }
    report
}
