//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied to
//! its parameters and constants. [`Graph::backward`] walks the tape in
//! reverse and returns one gradient per parameter that took part in the
//! computation; parameters that were never touched have no gradient at all
//! (not a zero tensor), which the optimizer treats as an exact zero.

use crate::error::{Error, Result};

use super::ops::{self, ConvGeom};
use super::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule for [`Graph::sparse_softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseSoftmaxGrad {
    /// True Jacobian of the masked softmax. For a single kept entry the
    /// output is the constant 1 and the gradient is zero.
    Exact,
    /// Jacobian of the dense softmax restricted to the kept block:
    /// `d out_j / d s_i = p_j (δ_ij - p_i)` for kept `i, j`, with `p` the
    /// softmax over all scores. The forward value is unchanged.
    #[default]
    DenseSurrogate,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    MaskExcept(Var, Vec<usize>),
    SparseSoftmax {
        scores: Var,
        kept: Vec<usize>,
        grad: SparseSoftmaxGrad,
    },
    MeanPool(Var),
    Upsample(Var, usize),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Select(Var, usize),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var, Tensor<T>),
    Cv2(Var),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `id`, or `None` if the parameter was not used.
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradient for `id` as a dense tensor (zeros if unused).
    pub fn dense(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
    }
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'a, T: Real = f32> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    signature: u64,
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Hash of every piecewise branch taken so far (ReLU activity patterns and
    /// sparse-softmax selections). Two evaluations with equal signatures lie
    /// on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    fn mix(&mut self, word: u64) {
        self.signature = (self.signature ^ word).wrapping_mul(FNV_PRIME);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        Ok(self.push(op, value, requires_grad))
    }

    /// Node for a stored parameter. Repeated calls return the same node, so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push_checked(Op::MatMul(a, b), out, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push_checked(Op::Add(a, b), out, rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push_checked(Op::Mul(a, b), out, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        let rg = self.requires(a);
        self.push_checked(Op::Scale(a, c), out, rg, "scale")
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let factor = self.scalar_of(s, "scale_by")?;
        let out = self.value(a).map(|v| v * factor);
        let rg = self.requires(a) || self.requires(s);
        self.push_checked(Op::ScaleBy(a, s), out, rg, "scale_by")
    }

    /// Adds the one-element tensor `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let shift = self.scalar_of(s, "add_scalar")?;
        let out = self.value(a).map(|v| v + shift);
        let rg = self.requires(a) || self.requires(s);
        self.push_checked(Op::AddScalar(a, s), out, rg, "add_scalar")
    }

    fn scalar_of(&self, s: Var, op: &str) -> Result<T> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(Error::dim(format!("{op}: expected one element, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = ops::relu(self.value(a));
        let mut word = 0u64;
        for (i, &v) in out.data().iter().enumerate() {
            if v > T::zero() {
                word = word.rotate_left(7) ^ (i as u64 + 1);
            }
        }
        self.mix(word);
        let rg = self.requires(a);
        self.push_checked(Op::Relu(a), out, rg, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(a));
        let rg = self.requires(a);
        self.push_checked(Op::Sigmoid(a), out, rg, "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = ops::softplus(self.value(a));
        let rg = self.requires(a);
        self.push_checked(Op::Softplus(a), out, rg, "softplus")
    }

    /// Softmax over a vector; `-inf` inputs map to exact zeros.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_1d(self.value(a))?;
        let rg = self.requires(a);
        self.push_checked(Op::Softmax(a), out, rg, "softmax")
    }

    /// Keeps the entries at `kept` and sets every other entry to `-inf`.
    pub fn mask_except(&mut self, a: Var, kept: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.rank() != 1 || kept.iter().any(|&i| i >= src.len()) {
            return Err(Error::dim("mask_except: index out of range"));
        }
        let mut out = Tensor::full(src.shape().to_vec(), T::neg_infinity());
        for &i in kept {
            out.data_mut()[i] = src.data()[i];
        }
        let rg = self.requires(a);
        // -inf is the point of this op, so no finiteness check.
        Ok(self.push(Op::MaskExcept(a, kept.to_vec()), out, rg))
    }

    /// Softmax restricted to the `kept` entries of a score vector (zeros
    /// elsewhere), with a selectable backward rule.
    pub fn sparse_softmax(&mut self, scores: Var, kept: &[usize], grad: SparseSoftmaxGrad) -> Result<Var> {
        let s = self.value(scores);
        if s.rank() != 1 || kept.is_empty() || kept.iter().any(|&i| i >= s.len()) {
            return Err(Error::dim("sparse_softmax: invalid kept set"));
        }
        let mut masked = Tensor::full(s.shape().to_vec(), T::neg_infinity());
        for &i in kept {
            masked.data_mut()[i] = s.data()[i];
        }
        let out = ops::softmax_1d(&masked)?;
        for &i in kept {
            self.mix(i as u64 + 0x5bd1);
        }
        let rg = self.requires(scores);
        self.push_checked(
            Op::SparseSoftmax {
                scores,
                kept: kept.to_vec(),
                grad,
            },
            out,
            rg,
            "sparse_softmax",
        )
    }

    pub fn mean_pool_spatial(&mut self, a: Var) -> Result<Var> {
        let out = ops::mean_pool_spatial(self.value(a))?;
        let rg = self.requires(a);
        self.push_checked(Op::MeanPool(a), out, rg, "mean_pool_spatial")
    }

    pub fn bilinear_upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(a), factor)?;
        let rg = self.requires(a);
        self.push_checked(Op::Upsample(a, factor), out, rg, "bilinear_upsample")
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (out, cols, geom) =
            ops::conv2d_forward(self.value(input), self.value(kernels), self.value(bias), stride)?;
        let rg = self.requires(input) || self.requires(kernels) || self.requires(bias);
        self.push_checked(
            Op::Conv2d {
                input,
                kernels,
                bias,
                cols,
                geom,
            },
            out,
            rg,
            "conv2d",
        )
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rg |= self.requires(p);
        }
        let out = Tensor::vector(data);
        self.push_checked(Op::Concat(parts.to_vec()), out, rg, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Entry `index` of a flattened tensor, as a one-element tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = self.value(a);
        let v = *src
            .data()
            .get(index)
            .ok_or_else(|| Error::dim(format!("select: index {index} out of range")))?;
        let rg = self.requires(a);
        Ok(self.push(Op::Select(a, index), Tensor::scalar(v), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v: T = self.value(a).data().iter().copied().sum();
        let rg = self.requires(a);
        self.push_checked(Op::Sum(a), Tensor::scalar(v), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = t.data().iter().copied().sum::<T>() / T::lit(t.len().max(1) as f64);
        let rg = self.requires(a);
        self.push_checked(Op::Mean(a), Tensor::scalar(v), rg, "mean")
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let v = ops::bce_with_logits(self.value(logits), &target)?;
        let rg = self.requires(logits);
        self.push_checked(Op::BceWithLogits(logits, target), Tensor::scalar(v), rg, "bce")
    }

    /// Squared coefficient of variation of a vector.
    pub fn cv_squared(&mut self, importance: Var) -> Result<Var> {
        let v = ops::cv_squared(self.value(importance).data());
        let rg = self.requires(importance);
        self.push_checked(Op::Cv2(importance), Tensor::scalar(v), rg, "cv_squared")
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_seeded(&[(loss, Tensor::scalar(T::one()))])
    }

    /// Reverse pass with explicit output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::dim("backward seed shape mismatch"));
            }
            let g = g.clone().reshape(self.value(*v).shape().to_vec())?;
            accumulate(&mut grads, *v, g);
        }
        let mut out: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, idx, g, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        idx: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let value = || self.value(Var(idx));
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match &mut out[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &g, want(*a), want(*b));
                if let Some(da) = da {
                    accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, ops::mul(&g, self.value(*b))?);
                }
                if want(*b) {
                    accumulate(grads, *b, ops::mul(&g, self.value(*a))?);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * *c)),
            Op::ScaleBy(a, s) => {
                if want(*s) {
                    let ds: T = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .sum();
                    accumulate(grads, *s, Tensor::scalar(ds).reshape(self.value(*s).shape().to_vec())?);
                }
                if want(*a) {
                    let f = self.value(*s).item();
                    accumulate(grads, *a, g.map(|v| v * f));
                }
            }
            Op::AddScalar(a, s) => {
                if want(*s) {
                    let ds: T = g.data().iter().copied().sum();
                    accumulate(grads, *s, Tensor::scalar(ds).reshape(self.value(*s).shape().to_vec())?);
                }
                if want(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Relu(a) => {
                let y = value();
                let d = elementwise(&g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = value();
                let d = elementwise(&g, y, |gv, yv| gv * yv * (T::one() - yv));
                accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = elementwise(&g, x, |gv, xv| gv * ops::sigmoid_scalar(xv));
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let p = value();
                accumulate(grads, *a, softmax_vjp(p.data(), &g, None));
            }
            Op::MaskExcept(a, kept) => {
                let mut d = Tensor::zeros(g.shape().to_vec());
                for &i in kept {
                    d.data_mut()[i] = g.data()[i];
                }
                accumulate(grads, *a, d);
            }
            Op::SparseSoftmax { scores, kept, grad } => {
                let d = match grad {
                    SparseSoftmaxGrad::Exact => softmax_vjp(value().data(), &g, Some(kept)),
                    SparseSoftmaxGrad::DenseSurrogate => {
                        let dense = ops::softmax_1d(self.value(*scores))?;
                        softmax_vjp(dense.data(), &g, Some(kept))
                    }
                };
                accumulate(grads, *scores, d);
            }
            Op::MeanPool(a) => {
                let (c, h, w) = self.value(*a).chw()?;
                let inv = T::one() / T::lit((h * w) as f64);
                let mut d = Vec::with_capacity(c * h * w);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                accumulate(grads, *a, Tensor::new([c, h, w], d)?);
            }
            Op::Upsample(a, factor) => {
                let d = ops::bilinear_upsample_backward(&g, self.value(*a).shape(), *factor);
                accumulate(grads, *a, d);
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                cols,
                geom,
            } => {
                let cg = ops::conv2d_backward(
                    &g,
                    cols,
                    self.value(*kernels),
                    geom,
                    [want(*input), want(*kernels), want(*bias)],
                );
                if let Some(d) = cg.input {
                    accumulate(grads, *input, d);
                }
                if let Some(d) = cg.kernels {
                    accumulate(grads, *kernels, d);
                }
                if let Some(d) = cg.bias {
                    accumulate(grads, *bias, d);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    if want(p) {
                        let d = Tensor::new(shape, g.data()[offset..offset + n].to_vec())?;
                        accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, g.reshape(shape)?);
            }
            Op::Select(a, i) => {
                let mut d = Tensor::zeros(self.value(*a).shape().to_vec());
                d.data_mut()[*i] = g.item();
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item() / T::lit(t.len().max(1) as f64);
                accumulate(grads, *a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::BceWithLogits(logits, target) => {
                let x = self.value(*logits);
                let scale = g.item() / T::lit(x.len().max(1) as f64);
                let d = elementwise(x, target, |xv, tv| (ops::sigmoid_scalar(xv) - tv) * scale);
                accumulate(grads, *logits, d);
            }
            Op::Cv2(a) => {
                let gv = g.item();
                let d = ops::cv_squared_grad(self.value(*a).data())
                    .into_iter()
                    .map(|v| v * gv)
                    .collect();
                accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape")
}

/// `p ⊙ (g - <p, g>)`, optionally restricted to the `kept` block.
fn softmax_vjp<T: Real>(p: &[T], g: &Tensor<T>, kept: Option<&[usize]>) -> Tensor<T> {
    let mut d = vec![T::zero(); p.len()];
    match kept {
        None => {
            let dot: T = p.iter().zip(g.data()).map(|(&pv, &gv)| pv * gv).sum();
            for (i, di) in d.iter_mut().enumerate() {
                *di = p[i] * (g.data()[i] - dot);
            }
        }
        Some(kept) => {
            let dot: T = kept.iter().map(|&i| p[i] * g.data()[i]).sum();
            for &i in kept {
                d[i] = p[i] * (g.data()[i] - dot);
            }
        }
    }
    Tensor::new(g.shape().to_vec(), d).expect("shape")
}
