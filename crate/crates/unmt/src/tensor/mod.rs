//! Minimal reverse-mode automatic differentiation.
//!
//! Graphs are built define-by-run: each operation allocates a node holding its
//! value, its parent tensors, and a closure that propagates the upstream
//! gradient into the parents. [`backward`] topologically sorts the graph from
//! a scalar loss, seeds it with 1, runs the closures in reverse order, and
//! then dismantles the graph so a deep chain of `Rc`s cannot overflow the
//! stack on drop. A graph is therefore consumed by a single backward pass；
//! leaves created with [`Tensor::param`] keep their accumulated gradients
//! until [`Tensor::zero_grad`].
//!
//! Tensors are dense row-major `Vec`s with an explicit shape. Everything the
//! translation model needs — matrix products, gate nonlinearities, attention
//! contractions, fused softmax/sigmoid cross-entropies — is implemented in
//! [`ops`] with hand-written backward closures, each checked against central
//! differences (see [`grad_check`]).

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use ops::{
    attn_context, attn_scores, bce_with_logits, concat_cols, cross_entropy_logits,
    embedding_lookup, stack_positions,
};
pub use optim::{clip_grad_norm, AdamState, RmsPropState};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
}

/// Scalar types the graph can run on. Training uses `f32`; gradient checks
/// run the same generic code in `f64` so finite differences are meaningful.
pub trait Element:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + 'static
{
    fn from_f64_exact(x: f64) -> Self;
    fn to_f64_exact(self) -> f64;
}

impl Element for f32 {
    fn from_f64_exact(x: f64) -> Self {
        x as f32
    }
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64_exact(x: f64) -> Self {
        x
    }
    fn to_f64_exact(self) -> f64 {
        self
    }
}

/// Shorthand used throughout the crate to write literals generically.
pub(crate) fn elem<T: Element>(x: f64) -> T {
    T::from_f64_exact(x)
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Node<T: Element> {
    value: RefCell<Vec<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: RefCell<Vec<Tensor<T>>>,
    backward: RefCell<Option<BackwardFn<T>>>,
}

/// A shared handle to a graph node. Cloning is cheap and refers to the same
/// storage, so parameter structs can hand the same tensor to the optimizer
/// and to every forward pass.
pub struct Tensor<T: Element = f32> {
    node: Rc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn new(value: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            value.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                value: RefCell::new(value),
                shape,
                requires_grad,
                grad: RefCell::new(None),
                parents: RefCell::new(Vec::new()),
                backward: RefCell::new(None),
            }),
        }
    }

    /// A constant (no gradient) tensor.
    pub fn constant(value: Vec<T>, shape: &[usize]) -> Self {
        Tensor::new(value, shape.to_vec(), false)
    }

    /// A leaf that accumulates gradients — a trainable parameter.
    pub fn param(value: Vec<T>, shape: &[usize]) -> Self {
        Tensor::new(value, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(vec![T::zero(); shape.iter().product()], shape)
    }

    pub fn scalar(v: T) -> Self {
        Tensor::constant(vec![v], &[1])
    }

    /// Result of an operation. Gradients flow only if some parent wants them;
    /// otherwise the node is a plain value and keeps no graph edges.
    pub(crate) fn from_op(
        value: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let t = Tensor::new(value, shape, requires_grad);
        if requires_grad {
            *t.node.parents.borrow_mut() = parents;
            *t.node.backward.borrow_mut() = Some(backward);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    /// Rows of a 2-D tensor (or length of a 1-D one).
    pub fn rows(&self) -> usize {
        self.node.shape[0]
    }

    /// Columns of a 2-D tensor; 1 for 1-D.
    pub fn cols(&self) -> usize {
        self.node.shape.get(1).copied().unwrap_or(1)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow the value. Short-lived borrows only; ops borrow internally.
    pub fn value(&self) -> Ref<'_, Vec<T>> {
        self.node.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.value.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        let v = self.node.value.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", self.node.shape);
        v[0]
    }

    /// Overwrite the value in place (same length). Used by optimizers and by
    /// the finite-difference checker.
    pub fn set_value(&self, value: &[T]) {
        let mut v = self.node.value.borrow_mut();
        assert_eq!(v.len(), value.len(), "set_value length mismatch");
        v.copy_from_slice(value);
    }

    pub(crate) fn value_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.value.borrow_mut()
    }

    /// Accumulated gradient, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Gradient buffer, created zeroed on first touch.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, Vec<T>> {
        let mut opt = self.node.grad.borrow_mut();
        if opt.is_none() {
            *opt = Some(vec![T::zero(); self.numel()]);
        }
        RefMut::map(opt, |o| o.as_mut().expect("grad buffer just initialized"))
    }

    /// A gradient-free leaf with a copy of this tensor's current value.
    /// The bridge for "treat this activation as data": discriminator inputs,
    /// frozen parameter snapshots, back-translation models.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::constant(self.to_vec(), &self.node.shape)
    }

    /// Like [`Tensor::detach`] but the copy is itself trainable.
    pub fn detach_param(&self) -> Tensor<T> {
        Tensor::param(self.to_vec(), &self.node.shape)
    }
}

/// Run reverse-mode accumulation from a scalar loss, then dismantle the graph.
///
/// Interior nodes release their parents and closures afterwards, so the same
/// graph cannot be differentiated twice; leaf gradients accumulate across
/// separate graphs until explicitly zeroed, which is what lets one training
/// step sum several losses built as independent graphs.
pub fn backward<T: Element>(loss: &Tensor<T>) -> Result<(), TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let order = topo_order(loss);
    {
        let mut g = loss.grad_mut();
        g[0] = g[0] + T::one();
    }
    for t in order.iter().rev() {
        let g = t.node.grad.borrow();
        if let Some(g) = g.as_ref() {
            if let Some(f) = t.node.backward.borrow().as_ref() {
                f(g);
            }
        }
    }
    // Free edges in forward (leaf-first) order so no recursive Rc drop can
    // recurse through a long chain of nodes.
    for t in &order {
        t.node.parents.borrow_mut().clear();
        t.node.backward.borrow_mut().take();
        if !t.node.requires_grad || Rc::strong_count(&t.node) > 1 {
            continue;
        }
        // Interior node owned only by `order`: its gradient is dead weight.
        t.node.grad.borrow_mut().take();
    }
    Ok(())
}

/// Iterative post-order over the ancestor graph: every node appears after all
/// of its parents, so reversing gives a valid gradient propagation order.
fn topo_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node<T>> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = Vec::new();
    visited.insert(Rc::as_ptr(&root.node));
    stack.push((root.clone(), 0));
    while let Some((t, i)) = stack.pop() {
        let parent = {
            let parents = t.node.parents.borrow();
            parents.get(i).cloned()
        };
        match parent {
            Some(p) => {
                stack.push((t, i + 1));
                if visited.insert(Rc::as_ptr(&p.node)) {
                    stack.push((p, 0));
                }
            }
            None => order.push(t),
        }
    }
    order
}

/// Builders for gradient-check cases covering every op family. Shared by the
/// unit tests here and the acceptance suite's full-model check.
#[cfg(test)]
pub(crate) mod ops_test_support {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) type Case = (
        &'static str,
        Box<dyn FnMut() -> Result<Tensor<f64>, TensorError>>,
        Vec<Tensor<f64>>,
    );

    fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::param(data, shape)
    }

    /// Values bounded away from 0 so ±eps never crosses a ReLU kink.
    fn randt_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    x
                } else {
                    -x
                }
            })
            .collect();
        Tensor::param(data, shape)
    }

    pub(crate) fn op_check_cases(seed: u64) -> Vec<Case> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases: Vec<Case> = Vec::new();

        {
            let a = randt(&mut rng, &[3, 4]);
            let b = randt(&mut rng, &[4, 2]);
            let (ac, bc) = (a.clone(), b.clone());
            cases.push((
                "matmul",
                Box::new(move || Ok(ac.matmul(&bc)?.sum_all())),
                vec![a, b],
            ));
        }
        {
            let a = randt(&mut rng, &[2, 3]);
            let b = randt(&mut rng, &[2, 3]);
            let w = randt(&mut rng, &[2, 3]);
            let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
            cases.push((
                "add+mul",
                Box::new(move || Ok(ac.add(&bc)?.mul(&wc)?.sum_all())),
                vec![a, b, w],
            ));
        }
        {
            let x = randt(&mut rng, &[3, 4]);
            let b = randt(&mut rng, &[4]);
            let (xc, bc) = (x.clone(), b.clone());
            cases.push((
                "add_bias",
                Box::new(move || Ok(xc.add_bias(&bc)?.tanh().sum_all())),
                vec![x, b],
            ));
        }
        {
            let x = randt(&mut rng, &[3, 4]);
            let s = randt(&mut rng, &[3]);
            let (xc, sc) = (x.clone(), s.clone());
            cases.push((
                "scale_rows",
                Box::new(move || Ok(xc.scale_rows(&sc)?.sigmoid().sum_all())),
                vec![x, s],
            ));
        }
        {
            let a = randt(&mut rng, &[3, 4]);
            let b = randt(&mut rng, &[3, 4]);
            let m = randt(&mut rng, &[3]);
            let (ac, bc, mc) = (a.clone(), b.clone(), m.clone());
            cases.push((
                "blend_rows",
                Box::new(move || Ok(ac.blend_rows(&bc, &mc)?.sum_all())),
                vec![a, b, m],
            ));
        }
        {
            let x = randt(&mut rng, &[2, 5]);
            let xc = x.clone();
            cases.push((
                "scale_const+mean",
                Box::new(move || Ok(xc.scale_const(-2.5).mean_all())),
                vec![x],
            ));
        }
        {
            let x = randt_off_kink(&mut rng, &[3, 4]);
            let xc = x.clone();
            cases.push((
                "relu",
                Box::new(move || Ok(xc.relu().sum_all())),
                vec![x],
            ));
        }
        {
            let x = randt_off_kink(&mut rng, &[3, 4]);
            let xc = x.clone();
            cases.push((
                "leaky_relu",
                Box::new(move || Ok(xc.leaky_relu(0.2).sum_all())),
                vec![x],
            ));
        }
        {
            let x = randt(&mut rng, &[3, 5]);
            let w = randt(&mut rng, &[3, 5]);
            let (xc, wc) = (x.clone(), w.clone());
            cases.push((
                "softmax_rows",
                Box::new(move || Ok(xc.softmax_rows()?.mul(&wc)?.sum_all())),
                vec![x, w],
            ));
        }
        {
            let x = randt(&mut rng, &[3, 6]);
            let xc = x.clone();
            cases.push((
                "slice_cols",
                Box::new(move || Ok(xc.slice_cols(1, 4)?.tanh().sum_all())),
                vec![x],
            ));
        }
        {
            let a = randt(&mut rng, &[3, 2]);
            let b = randt(&mut rng, &[3, 3]);
            let (ac, bc) = (a.clone(), b.clone());
            cases.push((
                "concat_cols",
                Box::new(move || Ok(concat_cols(&[ac.clone(), bc.clone()])?.sigmoid().sum_all())),
                vec![a, b],
            ));
        }
        {
            let s0 = randt(&mut rng, &[2, 3]);
            let s1 = randt(&mut rng, &[2, 3]);
            let s2 = randt(&mut rng, &[2, 3]);
            let w = randt(&mut rng, &[6, 3]);
            let (a, b, c, wc) = (s0.clone(), s1.clone(), s2.clone(), w.clone());
            cases.push((
                "stack_positions",
                Box::new(move || {
                    Ok(stack_positions(&[a.clone(), b.clone(), c.clone()])?
                        .mul(&wc)?
                        .sum_all())
                }),
                vec![s0, s1, s2, w],
            ));
        }
        {
            let table = randt(&mut rng, &[5, 3]);
            let tc = table.clone();
            cases.push((
                "embedding_lookup",
                Box::new(move || {
                    Ok(embedding_lookup(&tc, &[4, 0, 4, 2])?.tanh().sum_all())
                }),
                vec![table],
            ));
        }
        {
            let logits = randt(&mut rng, &[4, 6]);
            let lc = logits.clone();
            cases.push((
                "cross_entropy_logits",
                Box::new(move || {
                    cross_entropy_logits(&lc, &[1, 5, 0, 3], &[0.25, 0.25, 0.0, 0.5])
                }),
                vec![logits],
            ));
        }
        {
            let logits = randt(&mut rng, &[5, 1]);
            let lc = logits.clone();
            cases.push((
                "bce_with_logits",
                Box::new(move || {
                    bce_with_logits(&lc, &[0.9, 0.1, 0.9, 0.1, 0.9], &[0.2; 5])
                }),
                vec![logits],
            ));
        }
        {
            // Full attention read: softmax(scores + mask) contracted with values.
            let q = randt(&mut rng, &[2, 4]);
            let k = randt(&mut rng, &[6, 4]); // m = 3
            let v = randt(&mut rng, &[6, 5]);
            let w = randt(&mut rng, &[2, 5]);
            let bias = Tensor::constant(vec![0.0, 0.0, -1e9, 0.0, 0.0, 0.0], &[2, 3]);
            let (qc, kc, vc, wc) = (q.clone(), k.clone(), v.clone(), w.clone());
            cases.push((
                "attention",
                Box::new(move || {
                    let s = attn_scores(&qc, &kc, 3)?.add(&bias)?;
                    let a = s.softmax_rows()?;
                    Ok(attn_context(&a, &vc)?.mul(&wc)?.sum_all())
                }),
                vec![q, k, v, w],
            ));
        }
        {
            // One LSTM-style cell built from primitives, to check composition.
            let x = randt(&mut rng, &[2, 3]);
            let h = randt(&mut rng, &[2, 4]);
            let c0 = randt(&mut rng, &[2, 4]);
            let w = randt(&mut rng, &[7, 16]);
            let b = randt(&mut rng, &[16]);
            let (xc, hc, cc, wc, bc) = (x.clone(), h.clone(), c0.clone(), w.clone(), b.clone());
            cases.push((
                "lstm_cell",
                Box::new(move || {
                    let xi = concat_cols(&[xc.clone(), hc.clone()])?;
                    let g = xi.matmul(&wc)?.add_bias(&bc)?;
                    let i = g.slice_cols(0, 4)?.sigmoid();
                    let f = g.slice_cols(4, 8)?.sigmoid();
                    let u = g.slice_cols(8, 12)?.tanh();
                    let o = g.slice_cols(12, 16)?.sigmoid();
                    let c1 = f.mul(&cc)?.add(&i.mul(&u)?)?;
                    Ok(o.mul(&c1.tanh())?.sum_all())
                }),
                vec![x, h, c0, w, b],
            ));
        }
        cases
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]);
        let y = x.scale_const(2.0);
        let err = backward(&y).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn gradients_accumulate_on_shared_leaf() {
        // y = x + x  =>  dy/dx = 2 at every coordinate.
        let x = Tensor::<f64>::param(vec![1.0, -3.0], &[2]);
        let y = x.add(&x).unwrap().sum_all();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn gradients_accumulate_across_graphs_until_zeroed() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]);
        backward(&x.scale_const(3.0).sum_all()).unwrap();
        backward(&x.scale_const(1.0).sum_all()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_collect_no_gradient() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]);
        let c = Tensor::<f64>::constant(vec![5.0], &[1]);
        let y = x.mul(&c).unwrap().sum_all();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]);
        let d = x.scale_const(2.0).detach();
        assert_eq!(d.to_vec(), vec![6.0]);
        let y = d.scale_const(4.0).sum_all();
        backward(&y).unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn deep_chain_does_not_overflow_on_drop() {
        // 200k chained nodes: naive recursive Drop would blow the stack.
        let x = Tensor::<f32>::param(vec![1.0], &[1]);
        let mut y = x.scale_const(1.0);
        for _ in 0..200_000 {
            y = y.scale_const(1.0);
        }
        let loss = y.sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
        drop(loss);
    }
}
