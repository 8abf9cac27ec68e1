use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pointwise nonlinearities recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Tanh,
    /// Tanh approximation `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))`.
    Gelu,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, T),
    Unary(usize, Unary),
    SoftmaxRows(usize),
    Sum(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    tracked: bool,
}

/// Dynamic reverse-mode tape over dense matrices.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is rebuilt for every forward pass; parameters are bound by name so a
/// weight reused at several rollout steps owns a single gradient accumulator.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    named: RefCell<HashMap<String, usize>>,
}

/// Handle to a matrix recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            named: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, value: Array2<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Anonymous leaf that receives a gradient.
    pub fn leaf(&self, value: Array2<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable leaf. Binding the same name twice returns the first leaf.
    pub fn param(&self, name: &str, value: &Array2<T>) -> Var<'_, T> {
        if let Some(&id) = self.named.borrow().get(name) {
            return Var { tape: self, id };
        }
        let var = self.leaf(value.clone());
        self.named.borrow_mut().insert(name.to_owned(), var.id);
        var
    }

    /// Registers an existing var under `name`; later [`Tape::param`] calls
    /// with that name return it instead of creating a new leaf.
    pub fn alias(&self, name: &str, var: Var<'_, T>) {
        self.named.borrow_mut().insert(name.to_owned(), var.id);
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one part".into()))?;
        let rows = first.shape().0;
        let value = {
            let nodes = self.nodes.borrow();
            let mut cols = 0;
            for p in parts {
                let sh = nodes[p.id].value.dim();
                if sh.0 != rows {
                    return Err(Error::shape("concat_cols", first.shape(), sh));
                }
                cols += sh.1;
            }
            let mut out = Array2::zeros((rows, cols));
            let mut c = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                out.slice_mut(s![.., c..c + v.ncols()]).assign(v);
                c += v.ncols();
            }
            out
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let tracked = self.tracked(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), tracked))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every tracked leaf gets exactly one accumulated gradient; leaves that do
    /// not influence the loss receive zeros.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.dim();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Array2::ones((1, 1)));

        let acc = |grads: &mut Vec<Option<Array2<T>>>, id: usize, g: Array2<T>| {
            if !nodes[id].tracked {
                return;
            }
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].tracked {
                        acc(&mut grads, *a, g.dot(&vb.t()));
                    }
                    if nodes[*b].tracked {
                        acc(&mut grads, *b, va.t().dot(&g));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    let shape_b = nodes[*b].value.dim();
                    if nodes[*b].tracked {
                        acc(&mut grads, *b, reduce_to(&g, shape_b));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let shape_b = nodes[*b].value.dim();
                    if nodes[*b].tracked {
                        acc(&mut grads, *b, reduce_to(&g, shape_b).mapv(|v| -v));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*b].tracked {
                        acc(&mut grads, *b, reduce_to(&(&g * va), vb.dim()));
                    }
                    if nodes[*a].tracked {
                        acc(&mut grads, *a, &g * vb);
                    }
                }
                Op::Affine(a, scale) => acc(&mut grads, *a, g.mapv(|v| v * *scale)),
                Op::Unary(a, kind) => {
                    let x = &nodes[*a].value;
                    let y = &node.value;
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(x)
                        .and(y)
                        .for_each(|g, &x, &y| *g *= unary_derivative(*kind, x, y));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: T = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let sh = nodes[*a].value.dim();
                    acc(&mut grads, *a, Array2::from_elem(sh, g[[0, 0]]));
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        if nodes[p].tracked {
                            acc(&mut grads, p, g.slice(s![.., c..c + w]).to_owned());
                        }
                        c += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
            }
        }

        let mut leaves = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.tracked {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                leaves.insert(id, g);
            }
        }
        Ok(Gradients {
            leaves,
            named: self.named.borrow().clone(),
        })
    }
}

fn reduce_to<T: Scalar>(g: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    if g.dim() == shape {
        g.clone()
    } else if shape == (1, 1) {
        Array2::from_elem((1, 1), g.sum())
    } else {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
}

const GELU_CUBIC: f64 = 0.044715;

fn gelu_inner<T: Scalar>(x: T) -> T {
    let c = (T::of(2.0) / T::PI()).sqrt();
    c * (x + T::of(GELU_CUBIC) * x * x * x)
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + gelu_inner(x).tanh())
}

fn unary_forward<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Relu => x.max(T::zero()),
        Unary::Sigmoid => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        Unary::Exp => x.exp(),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => gelu(x),
    }
}

fn unary_derivative<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Exp => y,
        Unary::Tanh => T::one() - y * y,
        Unary::Gelu => {
            let half = T::of(0.5);
            let c = (T::of(2.0) / T::PI()).sqrt();
            let t = gelu_inner(x).tanh();
            let du = c * (T::one() + T::of(3.0 * GELU_CUBIC) * x * x);
            half * (T::one() + t) + half * x * (T::one() - t * t) * du
        }
    }
}

fn broadcast_ok(lhs: (usize, usize), rhs: (usize, usize)) -> bool {
    rhs == lhs || rhs == (1, 1) || (rhs.0 == 1 && rhs.1 == lhs.1)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array2<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_array(&self) -> Array2<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Value of a 1x1 node.
    pub fn item(&self) -> T {
        self.value()[[0, 0]]
    }

    pub fn is_finite(&self) -> bool {
        self.value().iter().all(|v| v.is_finite())
    }

    fn unary_op(self, kind: Unary) -> Var<'t, T> {
        let value = self.value().mapv(|x| unary_forward(kind, x));
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, Op::Unary(self.id, kind), tracked)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), rhs.value());
            if a.ncols() != b.nrows() {
                return Err(Error::shape("matmul", a.dim(), b.dim()));
            }
            a.dot(&*b)
        };
        let tracked = self.tape.tracked(&[self.id, rhs.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, rhs.id), tracked))
    }

    pub fn t(self) -> Var<'t, T> {
        let value = self.value().t().to_owned();
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, Op::Transpose(self.id), tracked)
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(&Array2<T>, &Array2<T>) -> Array2<T>,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), rhs.value());
            if !broadcast_ok(a.dim(), b.dim()) {
                return Err(Error::shape(name, a.dim(), b.dim()));
            }
            f(&a, &b)
        };
        let tracked = self.tape.tracked(&[self.id, rhs.id]);
        Ok(self.tape.push(value, op, tracked))
    }

    /// Elementwise sum; `rhs` may be a row vector or a 1x1 scalar broadcast over `self`.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    /// Hadamard product with the same broadcast rule as [`Var::add`].
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "hadamard", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.affine(c, T::zero())
    }

    /// `c * self + shift`, elementwise.
    pub fn affine(self, c: T, shift: T) -> Var<'t, T> {
        let value = self.value().mapv(|x| c * x + shift);
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, Op::Affine(self.id, c), tracked)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary_op(Unary::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary_op(Unary::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary_op(Unary::Exp)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary_op(Unary::Tanh)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary_op(Unary::Gelu)
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(self) -> Var<'t, T> {
        let mut value = self.value().clone();
        for mut row in value.rows_mut() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z: T = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, Op::SoftmaxRows(self.id), tracked)
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Array2::from_elem((1, 1), self.value().sum());
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, Op::Sum(self.id), tracked)
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let value = {
            let v = self.value();
            if start > end || end > v.ncols() {
                return Err(Error::shape("slice_cols", v.dim(), (start, end)));
            }
            v.slice(s![.., start..end]).to_owned()
        };
        let tracked = self.tape.tracked(&[self.id]);
        Ok(self.tape.push(value, Op::SliceCols(self.id, start), tracked))
    }
}

/// Gradients of one backward sweep, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Array2<T>>,
    named: HashMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf; zeros-shaped `None` for untracked vars.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Array2<T>> {
        self.leaves.get(&var.id)
    }

    pub fn named(&self, name: &str) -> Option<&Array2<T>> {
        self.named.get(name).and_then(|id| self.leaves.get(id))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }
}
