//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation as a node holding its value, its
//! parents and a closure mapping the upstream gradient to parent gradients.
//! Nodes are appended in evaluation order, so parents always precede their
//! children and a single reverse sweep suffices.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::numerics::linalg::{self, tri_solve};
use crate::numerics::{Matrix, NumericsError};
use crate::scalar::Scalar;

/// Inputs handed to a node's backward closure.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's value.
    pub grad: &'a Matrix<T>,
    pub value: &'a Matrix<T>,
    pub parents: &'a [Rc<Matrix<T>>],
    /// Which parents need a gradient; entries for the others may be `None`.
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Matrix<T>>>>;

struct Node<T> {
    value: Rc<Matrix<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Operation record for one differentiation pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
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
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub fn constant(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A leaf when `trainable`, a constant otherwise.
    pub fn input(&self, value: Matrix<T>, trainable: bool) -> Var<'_, T> {
        if trainable {
            self.leaf(value)
        } else {
            self.constant(value)
        }
    }

    pub fn scalar_constant(&self, value: T) -> Var<'_, T> {
        self.constant(Matrix::scalar(value))
    }

    /// Records a custom operation. `backward` is only invoked when at least
    /// one parent requires a gradient.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Matrix<T>,
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: ids,
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Matrix<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates gradients from a scalar `loss` back to every node that
    /// requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, NumericsError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.shape() != (1, 1) {
            return Err(NumericsError::NotScalar(nodes[loss.id].value.shape()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::scalar(T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if node.parents.iter().any(|&p| p >= id) {
                return Err(NumericsError::GraphCycle(id));
            }
            let parents: Vec<Rc<Matrix<T>>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&BackwardArgs {
                grad: &grad,
                value: &node.value,
                parents: &parents,
                needs: &needs,
            });
            for ((&pid, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[pid].value.shape(), "gradient shape");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the gradient of leaves only
            grads[id] = None;
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss with respect to the tape's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Matrix<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Matrix<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of softplus, used when initializing positive parameters.
pub fn softplus_inverse<T: Scalar>(y: T) -> T {
    if y > T::lit(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn softplus_value<T: Scalar>(x: T) -> T {
    softplus(x)
}

fn tril<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| if j <= i { m[(i, j)] } else { T::zero() })
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix<T>> {
        self.tape.value_of(self.id)
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self) -> T {
        self.value().to_scalar()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(self, value: Matrix<T>, backward: BackwardFn<T>) -> Self {
        self.tape.custom(&[self], value, backward)
    }

    pub fn add(self, rhs: Self) -> Self {
        let v = self.value().add(&rhs.value());
        self.tape.custom(
            &[self, rhs],
            v,
            Box::new(|a| vec![Some(a.grad.clone()), Some(a.grad.clone())]),
        )
    }

    pub fn sub(self, rhs: Self) -> Self {
        let v = self.value().sub(&rhs.value());
        self.tape.custom(
            &[self, rhs],
            v,
            Box::new(|a| vec![Some(a.grad.clone()), Some(a.grad.scale(-T::one()))]),
        )
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Self) -> Self {
        let v = self.value().zip_map(&rhs.value(), |x, y| x * y);
        self.tape.custom(
            &[self, rhs],
            v,
            Box::new(|a| {
                vec![
                    a.needs[0].then(|| a.grad.zip_map(&a.parents[1], |g, y| g * y)),
                    a.needs[1].then(|| a.grad.zip_map(&a.parents[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(self, s: T) -> Self {
        let v = self.value().scale(s);
        self.unary(v, Box::new(move |a| vec![Some(a.grad.scale(s))]))
    }

    pub fn neg(self) -> Self {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> Self {
        let v = self.value().map(|x| x + s);
        self.unary(v, Box::new(|a| vec![Some(a.grad.clone())]))
    }

    /// Adds an `R×1` column to every column of an `R×C` node.
    pub fn add_col_broadcast(self, col: Self) -> Self {
        let x = self.value();
        let c = col.value();
        assert_eq!((x.rows(), 1), c.shape(), "column broadcast shape");
        let v = Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + c[(i, 0)]);
        self.tape.custom(
            &[self, col],
            v,
            Box::new(|a| {
                let g = a.grad;
                let col_grad = Matrix::column((0..g.rows()).map(|i| g.row(i).iter().copied().sum()).collect());
                vec![Some(g.clone()), Some(col_grad)]
            }),
        )
    }

    pub fn matmul(self, rhs: Self) -> Self {
        let v = self.value().matmul(&rhs.value());
        self.tape.custom(
            &[self, rhs],
            v,
            Box::new(|a| {
                vec![
                    a.needs[0].then(|| a.grad.matmul_nt(&a.parents[1])),
                    a.needs[1].then(|| a.parents[0].matmul_tn(a.grad)),
                ]
            }),
        )
    }

    /// `selfᵀ · rhs`.
    pub fn matmul_tn(self, rhs: Self) -> Self {
        let v = self.value().matmul_tn(&rhs.value());
        self.tape.custom(
            &[self, rhs],
            v,
            Box::new(|a| {
                vec![
                    a.needs[0].then(|| a.parents[1].matmul_nt(a.grad)),
                    a.needs[1].then(|| a.parents[0].matmul(a.grad)),
                ]
            }),
        )
    }

    pub fn transpose(self) -> Self {
        let v = self.value().transpose();
        self.unary(v, Box::new(|a| vec![Some(a.grad.transpose())]))
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(T::exp);
        self.unary(v, Box::new(|a| vec![Some(a.grad.zip_map(a.value, |g, y| g * y))]))
    }

    pub fn ln(self) -> Self {
        let v = self.value().map(T::ln);
        self.unary(
            v,
            Box::new(|a| vec![Some(a.grad.zip_map(&a.parents[0], |g, x| g / x))]),
        )
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(T::sqrt);
        self.unary(
            v,
            Box::new(|a| {
                let half = T::lit(0.5);
                vec![Some(a.grad.zip_map(a.value, |g, y| g * half / y))]
            }),
        )
    }

    pub fn square(self) -> Self {
        let v = self.value().map(|x| x * x);
        self.unary(
            v,
            Box::new(|a| {
                let two = T::lit(2.0);
                vec![Some(a.grad.zip_map(&a.parents[0], |g, x| two * g * x))]
            }),
        )
    }

    pub fn softplus(self) -> Self {
        let v = self.value().map(softplus);
        self.unary(
            v,
            Box::new(|a| vec![Some(a.grad.zip_map(&a.parents[0], |g, x| g * sigmoid(x)))]),
        )
    }

    /// `max(x, floor)`; the gradient is blocked where the floor is active.
    pub fn clamp_min(self, floor: T) -> Self {
        let v = self.value().map(|x| x.max(floor));
        self.unary(
            v,
            Box::new(move |a| {
                vec![Some(a.grad.zip_map(&a.parents[0], |g, x| {
                    if x > floor {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn sum(self) -> Self {
        let v = Matrix::scalar(self.value().sum());
        self.unary(
            v,
            Box::new(|a| {
                let (r, c) = a.parents[0].shape();
                vec![Some(Matrix::filled(r, c, a.grad.to_scalar()))]
            }),
        )
    }

    /// `1×C` row of column sums.
    pub fn column_sums(self) -> Self {
        let x = self.value();
        let mut sums = vec![T::zero(); x.cols()];
        for r in 0..x.rows() {
            for (s, &v) in sums.iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        self.unary(
            Matrix::row_vector(sums),
            Box::new(|a| {
                let (r, c) = a.parents[0].shape();
                vec![Some(Matrix::from_fn(r, c, |_, j| a.grad[(0, j)]))]
            }),
        )
    }

    /// `R×1` column of row sums.
    pub fn row_sums(self) -> Self {
        let x = self.value();
        let sums = (0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect();
        self.unary(
            Matrix::column(sums),
            Box::new(|a| {
                let (r, c) = a.parents[0].shape();
                vec![Some(Matrix::from_fn(r, c, |i, _| a.grad[(i, 0)]))]
            }),
        )
    }

    /// Diagonal of a square node as an `n×1` column.
    pub fn diag(self) -> Self {
        let x = self.value();
        let v = Matrix::column(x.diagonal());
        self.unary(
            v,
            Box::new(|a| {
                let n = a.parents[0].rows();
                let mut g = Matrix::zeros(n, a.parents[0].cols());
                for i in 0..n {
                    g[(i, i)] = a.grad[(i, 0)];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Lower triangle of a square node with `softplus` applied to the
    /// diagonal; the strict upper triangle is discarded.
    pub fn tril_softplus_diag(self) -> Self {
        let x = self.value();
        let n = x.rows();
        let v = Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => x[(i, j)],
            std::cmp::Ordering::Equal => softplus(x[(i, i)]),
            std::cmp::Ordering::Less => T::zero(),
        });
        self.unary(
            v,
            Box::new(|a| {
                let x = &a.parents[0];
                let n = x.rows();
                vec![Some(Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
                    std::cmp::Ordering::Greater => a.grad[(i, j)],
                    std::cmp::Ordering::Equal => a.grad[(i, i)] * sigmoid(x[(i, i)]),
                    std::cmp::Ordering::Less => T::zero(),
                }))]
            }),
        )
    }

    /// Concatenates nodes with equal row counts side by side.
    pub fn concat_cols(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Matrix<T>>> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == rows), "concat row counts");
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for v in &values {
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        tape.custom(
            parts,
            out,
            Box::new(move |a| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(a.needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| Matrix::from_fn(a.grad.rows(), w, |r, c| a.grad[(r, start + c)]))
                    })
                    .collect()
            }),
        )
    }

    /// Stacks `times` copies of the node vertically.
    pub fn tile_rows(self, times: usize) -> Self {
        assert!(times > 0, "tile count");
        if times == 1 {
            return self;
        }
        let x = self.value();
        let mut data = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            data.extend_from_slice(x.as_slice());
        }
        let v = Matrix::from_vec(x.rows() * times, x.cols(), data).expect("tiled shape");
        self.unary(
            v,
            Box::new(move |a| {
                let (r, c) = a.parents[0].shape();
                let mut g = Matrix::zeros(r, c);
                for block in a.grad.as_slice().chunks_exact(r * c) {
                    for (o, &v) in g.as_mut_slice().iter_mut().zip(block) {
                        *o += v;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Cholesky factor of a symmetric node, escalating jitter per
    /// [`linalg::cholesky`].
    pub fn cholesky(self, jitter: T) -> Result<Self, NumericsError> {
        let ch = linalg::cholesky(&self.value(), jitter)?;
        Ok(self.unary(
            ch.factor,
            Box::new(|a| {
                // Ā = ½(S + Sᵀ), S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, Φ = lower triangle with halved diagonal
                let l = a.value;
                let lbar = tril(a.grad);
                let mut phi = tril(&l.matmul_tn(&lbar));
                for i in 0..phi.rows() {
                    phi[(i, i)] *= T::lit(0.5);
                }
                // S = L⁻ᵀ Φ L⁻¹ = L⁻ᵀ (L⁻ᵀ Φᵀ)ᵀ
                let inner = tri_solve(l, &phi.transpose(), true).expect("factor is nonsingular");
                let s = tri_solve(l, &inner.transpose(), true).expect("factor is nonsingular");
                let sym = s.add(&s.transpose()).scale(T::lit(0.5));
                vec![Some(sym)]
            }),
        ))
    }

    /// Solves `self · X = rhs` (or `selfᵀ · X = rhs`) for lower-triangular `self`.
    pub fn tri_solve(self, rhs: Self, transposed: bool) -> Result<Self, NumericsError> {
        let x = tri_solve(&self.value(), &rhs.value(), transposed)?;
        Ok(self.tape.custom(
            &[self, rhs],
            x,
            Box::new(move |a| {
                let l = &a.parents[0];
                let x = a.value;
                let bbar = tri_solve(l, a.grad, !transposed).expect("factor is nonsingular");
                let lbar = a.needs[0].then(|| {
                    let outer = if transposed {
                        x.matmul_nt(&bbar)
                    } else {
                        bbar.matmul_nt(x)
                    };
                    tril(&outer).scale(-T::one())
                });
                vec![lbar, Some(bbar)]
            }),
        ))
    }

    /// Row-wise `log_softmax(F)[n, labels[n]]` as an `R×1` column.
    pub fn log_softmax_pick(self, labels: &[usize]) -> Self {
        let f = self.value();
        assert_eq!(f.rows(), labels.len(), "one label per row");
        let mut out = Vec::with_capacity(f.rows());
        for (r, &y) in labels.iter().enumerate() {
            out.push(f[(r, y)] - logsumexp(f.row(r)));
        }
        let labels = labels.to_vec();
        self.unary(
            Matrix::column(out),
            Box::new(move |a| {
                let f = &a.parents[0];
                let mut g = Matrix::zeros(f.rows(), f.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let gr = a.grad[(r, 0)];
                    let lse = logsumexp(f.row(r));
                    for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                        let p = (f[(r, c)] - lse).exp();
                        *gv = -gr * p;
                    }
                    g[(r, y)] += gr;
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Max-shifted `log Σ exp`.
pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

impl<'t, T: Scalar> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self {
        Var::neg(self)
    }
}
