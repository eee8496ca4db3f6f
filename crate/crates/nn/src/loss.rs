use crate::graph::{softmax_in_place, Graph, NodeId};
use crate::scalar::Scalar;

/// Softmax of a vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy<T: Scalar>(probs: &[T]) -> T {
    probs
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum()
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    assert!(target < logits.len(), "target {target} out of range {}", logits.len());
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    let loss = lse - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= T::one();
    (loss, grad)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Graph<T> {
    /// Mean cross-entropy of row-wise `logits: [n, c]` against `targets`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let logp = self.log_softmax(logits);
        let picked = self.pick_rows(logp, targets);
        let mean = self.mean(picked);
        self.scale(mean, -T::one())
    }

    /// Per-row entropy `-Σ p log p` from log-probabilities, giving `[n]`.
    pub fn entropy_rows(&mut self, log_probs: NodeId) -> NodeId {
        let p = self.exp(log_probs);
        let plogp = self.mul(p, log_probs);
        let s = self.sum_cols(plogp);
        self.scale(s, -T::one())
    }
}
