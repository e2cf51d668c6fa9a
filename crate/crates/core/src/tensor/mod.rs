//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every op on tracked inputs records one node
//! holding the parent links and a closure computing the vector-Jacobian
//! product. `backward` walks the recorded graph once in reverse topological
//! order and accumulates gradients into parameter buffers.
//!
//! Precision is generic: `f32` for training and inference, `f64` for
//! finite-difference verification.

mod ops;

pub use ops::concat;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::rc::Rc;

use thiserror::Error;

use crate::rng::RngState;

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("backward expects a tracked scalar root, got shape {shape:?} (tracked: {tracked})")]
    BackwardRoot { shape: Vec<usize>, tracked: bool },
    #[error("dropout probability must lie in [0,1), got {0}")]
    DropoutProbability(f64),
    #[error("normalization over an empty axis")]
    EmptyAxis,
}

fn shape_err(op: &'static str, msg: String) -> TensorError {
    TensorError::Shape { op, msg }
}

pub(crate) type VjpFn<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;
pub(crate) type GradSink<E> = Rc<RefCell<Option<Vec<E>>>>;

/// One recorded operation in the computation graph.
pub(crate) struct Node<E: Element> {
    parents: Vec<Rc<Node<E>>>,
    /// Upstream gradient -> gradient per parent, in `parents` order.
    vjp: Option<VjpFn<E>>,
    /// Leaf parameters accumulate their gradient here.
    sink: Option<GradSink<E>>,
    len: usize,
}

/// Dense n-dimensional value, optionally tracked in a computation graph.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Rc<Vec<E>>,
    node: Option<Rc<Node<E>>>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &self.data)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], data: Rc::new(vec![v]), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![E::ZERO; numel]), node: None }
    }

    pub fn filled(shape: &[usize], v: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![v; numel]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of this tensor with the graph link removed.
    pub fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<E>> {
        Rc::clone(&self.data)
    }

    /// Build an op result. `parents` lists the op inputs in the order the
    /// vjp closure reports their gradients; the node is recorded only when
    /// at least one input is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Rc<Vec<E>>,
        parents: &[&Tensor<E>],
        vjp: VjpFn<E>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked: Vec<Option<Rc<Node<E>>>> = parents.iter().map(|p| p.node.clone()).collect();
        let node = if tracked.iter().any(|n| n.is_some()) {
            let keep: Vec<usize> =
                (0..tracked.len()).filter(|&i| tracked[i].is_some()).collect();
            let parent_nodes: Vec<Rc<Node<E>>> =
                keep.iter().map(|&i| tracked[i].clone().unwrap()).collect();
            let filtered: VjpFn<E> = if keep.len() == tracked.len() {
                vjp
            } else {
                Box::new(move |g| {
                    let mut all = vjp(g);
                    keep.iter().map(|&i| std::mem::take(&mut all[i])).collect()
                })
            };
            Some(Rc::new(Node {
                parents: parent_nodes,
                vjp: Some(filtered),
                sink: None,
                len: data.len(),
            }))
        } else {
            None
        };
        Tensor { shape, data, node }
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Rc<Vec<E>>, sink: GradSink<E>) -> Self {
        let len = data.len();
        Tensor {
            shape,
            data,
            node: Some(Rc::new(Node { parents: Vec::new(), vjp: None, sink: Some(sink), len })),
        }
    }
}

/// Accumulate gradients of `root` into every reachable parameter buffer.
///
/// Repeated calls accumulate; clear the parameter buffers between steps.
pub fn backward<E: Element>(root: &Tensor<E>) -> Result<(), TensorError> {
    let node = match (&root.node, root.numel()) {
        (Some(n), 1) => Rc::clone(n),
        _ => {
            return Err(TensorError::BackwardRoot {
                shape: root.shape.clone(),
                tracked: root.node.is_some(),
            })
        }
    };

    // Iterative DFS post-order: every node appears after all of its parents,
    // so the reversed order processes each node once all consumers are done.
    let mut order: Vec<Rc<Node<E>>> = Vec::new();
    let mut visited: HashSet<*const Node<E>> = HashSet::new();
    let mut stack: Vec<(Rc<Node<E>>, usize)> = vec![(Rc::clone(&node), 0)];
    visited.insert(Rc::as_ptr(&node));
    while let Some((current, child_idx)) = stack.pop() {
        if child_idx < current.parents.len() {
            let parent = Rc::clone(&current.parents[child_idx]);
            stack.push((current, child_idx + 1));
            if visited.insert(Rc::as_ptr(&parent)) {
                stack.push((parent, 0));
            }
        } else {
            order.push(current);
        }
    }

    let mut grads: HashMap<*const Node<E>, Vec<E>> = HashMap::new();
    grads.insert(Rc::as_ptr(&node), vec![E::ONE]);

    for current in order.iter().rev() {
        let g = match grads.remove(&Rc::as_ptr(current)) {
            Some(g) => g,
            None => continue, // not on a path to the root
        };
        debug_assert_eq!(g.len(), current.len);
        if let Some(sink) = &current.sink {
            let mut cell = sink.borrow_mut();
            match cell.as_mut() {
                Some(buf) => accumulate(buf, &g),
                None => *cell = Some(g.clone()),
            }
        }
        if let Some(vjp) = &current.vjp {
            let parent_grads = vjp(&g);
            debug_assert_eq!(parent_grads.len(), current.parents.len());
            for (parent, pg) in current.parents.iter().zip(parent_grads) {
                match grads.entry(Rc::as_ptr(parent)) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        accumulate(e.get_mut(), &pg)
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
    }
    Ok(())
}

fn accumulate<E: Element>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Const(f64),
}

/// A named learnable tensor with an accumulated gradient buffer.
pub struct Parameter<E: Element> {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Rc<Vec<E>>>,
    grad: GradSink<E>,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init, rng: &mut RngState) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::ZERO; numel],
            Init::Ones => vec![E::ONE; numel],
            Init::Const(c) => vec![E::from_f64(c); numel],
            Init::Normal(std) => (0..numel).map(|_| E::from_f64(rng.normal_scaled(0.0, std))).collect(),
        };
        Parameter {
            name: name.into(),
            shape: shape.to_vec(),
            value: RefCell::new(Rc::new(data)),
            grad: Rc::new(RefCell::new(None)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Graph-tracked view; gradients from `backward` accumulate into this
    /// parameter. Multiple views in one graph sum their contributions.
    pub fn tracked(&self) -> Tensor<E> {
        Tensor::leaf(self.shape.clone(), self.value.borrow().clone(), Rc::clone(&self.grad))
    }

    /// Untracked snapshot (inference use).
    pub fn constant(&self) -> Tensor<E> {
        Tensor { shape: self.shape.clone(), data: self.value.borrow().clone(), node: None }
    }

    pub fn value(&self) -> Vec<E> {
        self.value.borrow().as_ref().clone()
    }

    pub fn set_value(&self, data: Vec<E>) {
        assert_eq!(data.len(), self.numel(), "parameter {}: value length mismatch", self.name);
        *self.value.borrow_mut() = Rc::new(data);
    }

    /// Mutate the value in place; copies only if a graph still holds it.
    pub fn update_value(&self, f: impl FnOnce(&mut [E])) {
        let mut rc = self.value.borrow_mut();
        if Rc::strong_count(&rc) != 1 {
            *rc = Rc::new(rc.as_ref().clone());
        }
        f(Rc::get_mut(&mut rc).expect("unique after copy-on-write"));
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.grad.borrow().clone()
    }

    pub fn set_grad(&self, g: Option<Vec<E>>) {
        if let Some(g) = &g {
            assert_eq!(g.len(), self.numel());
        }
        *self.grad.borrow_mut() = g;
    }

    pub fn clear_grad(&self) {
        *self.grad.borrow_mut() = None;
    }
}

impl<E: Element> fmt::Debug for Parameter<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.shape)
            .finish()
    }
}

/// Ordered registry of parameters with unique names. The registration order
/// fixes initialization draws, optimizer iteration, and checkpoint layout.
#[derive(Default)]
pub struct ParamSet<E: Element> {
    params: Vec<Rc<Parameter<E>>>,
    names: HashSet<String>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), names: HashSet::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut RngState,
    ) -> Rc<Parameter<E>> {
        let name = name.into();
        assert!(self.names.insert(name.clone()), "duplicate parameter name {name}");
        let p = Rc::new(Parameter::new(name, shape, init, rng));
        self.params.push(Rc::clone(&p));
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<Parameter<E>>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Parameter<E>>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn clear_grads(&self) {
        for p in &self.params {
            p.clear_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}
