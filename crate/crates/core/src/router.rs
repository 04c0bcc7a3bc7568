//! Expert-affinity scores, top-k sparsification and softmax gating, and the
//! CV² balancing statistic.

use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, ParamId, Real, SparseSoftmaxGrad, Tensor, Var};

/// Scores, dense gate and selected experts for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<T = f32> {
    pub scores: Vec<T>,
    /// Zero at unselected experts.
    pub gate: Vec<T>,
    /// Ascending expert indices.
    pub selected: Vec<usize>,
}

impl<T: Real> RoutingDecision<T> {
    /// Selected expert with the largest gate (lower index on ties).
    pub fn primary(&self) -> usize {
        let mut best = self.selected[0];
        for &j in &self.selected[1..] {
            if self.gate[j] > self.gate[best] {
                best = j;
            }
        }
        best
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k must satisfy 1 <= k <= {n}, got {k}")));
    }
    Ok(())
}

/// Indices of the `k` largest scores in ascending index order. Ties go to
/// the lower index.
pub fn top_k_indices<T: Real>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    check_k(k, scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            context: "router scores".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Gate from precomputed scores: softmax over the top-k, zeros elsewhere.
pub fn gate_from_scores<T: Real>(scores: &[T], k: usize) -> Result<RoutingDecision<T>> {
    let selected = top_k_indices(scores, k)?;
    let mut masked = vec![T::neg_infinity(); scores.len()];
    for &j in &selected {
        masked[j] = scores[j];
    }
    let gate = ops::softmax_1d(&Tensor::vector(masked))?.into_data();
    Ok(RoutingDecision {
        scores: scores.to_vec(),
        gate,
        selected,
    })
}

/// `s = W·l_o`, then the top-k gate.
pub fn route<T: Real>(l_o: &[T], w: &Tensor<T>, k: usize) -> Result<RoutingDecision<T>> {
    let s = ops::matmul(w, &Tensor::vector(l_o.to_vec()))?;
    gate_from_scores(s.data(), k)
}

/// Graph nodes of one routing step.
#[derive(Clone, Debug)]
pub struct RouteVars {
    pub scores: Var,
    pub gate: Var,
    pub selected: Vec<usize>,
}

pub fn route_var<T: Real>(
    g: &mut Graph<'_, T>,
    w: ParamId,
    l_o: Var,
    k: usize,
    grad: SparseSoftmaxGrad,
) -> Result<RouteVars> {
    let w = g.param(w);
    let scores = g.matmul(w, l_o)?;
    let selected = top_k_indices(g.value(scores).data(), k)?;
    let gate = g.sparse_softmax(scores, &selected, grad)?;
    Ok(RouteVars { scores, gate, selected })
}

impl RouteVars {
    pub fn decision<T: Real>(&self, g: &Graph<'_, T>) -> RoutingDecision<T> {
        RoutingDecision {
            scores: g.value(self.scores).data().to_vec(),
            gate: g.value(self.gate).data().to_vec(),
            selected: self.selected.clone(),
        }
    }
}

/// Per-expert summed gate mass over a batch.
pub fn importance<T: Real>(gates: &[RoutingDecision<T>]) -> Result<Vec<T>> {
    let first = gates.first().ok_or_else(|| Error::config("empty batch"))?;
    let mut imp = vec![T::zero(); first.gate.len()];
    for d in gates {
        if d.gate.len() != imp.len() {
            return Err(Error::dim("gates disagree on expert count"));
        }
        for (acc, &p) in imp.iter_mut().zip(&d.gate) {
            *acc = *acc + p;
        }
    }
    Ok(imp)
}

/// `Var_pop(I) / (Mean(I)² + 1e-10)` of the batch importance `I`.
pub fn cv2_loss<T: Real>(gates: &[RoutingDecision<T>]) -> Result<T> {
    Ok(ops::cv_squared(&importance(gates)?))
}

/// Graph form of [`cv2_loss`] over per-sample gate nodes.
pub fn cv2_loss_var<T: Real>(g: &mut Graph<'_, T>, gates: &[Var]) -> Result<Var> {
    let (&first, rest) = gates.split_first().ok_or_else(|| Error::config("empty batch"))?;
    let mut imp = first;
    for &p in rest {
        imp = g.add(imp, p)?;
    }
    g.cv_squared(imp)
}
