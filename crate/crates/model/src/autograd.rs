//! Tape-based reverse-mode differentiation over `f64` tensors.
//!
//! Every operation computes its value eagerly and records itself on a
//! [`Graph`]. The backward rule of every operation is expressed with other
//! graph operations, so the gradients returned by [`Graph::grad`] are
//! themselves differentiable. The gradient penalty relies on this: it
//! differentiates a norm of an input gradient with respect to parameters.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use ndarray::{concatenate, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice};
use talkface_core::par;

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sqrt(usize),
    Sigmoid(usize),
    MaskMul(usize, Arc<Tensor>),
    SumTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    Pad {
        x: usize,
        axis: usize,
        before: usize,
    },
    Conv1d(usize, usize),
    ConvFlip(usize),
    ConvWeightGrad {
        x: usize,
        g: usize,
    },
    PoolGather(usize, Arc<Vec<usize>>),
    PoolScatter(usize, Arc<Vec<usize>>),
    Upsample2(usize),
    PairSum(usize),
    MatMul(usize, usize),
    Transpose(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Conv1d(a, b) | MatMul(a, b) => {
                vec![*a, *b]
            }
            ConvWeightGrad { x, g, .. } => vec![*x, *g],
            Neg(a) | Scale(a, _) | AddScalar(a) | Sqrt(a) | Sigmoid(a) | MaskMul(a, _)
            | SumTo(a) | BroadcastTo(a) | Reshape(a) | ConvFlip(a) | PoolGather(a, _)
            | PoolScatter(a, _) | Upsample2(a) | PairSum(a) | Transpose(a) => vec![*a],
            Slice { x, .. } | Pad { x, .. } => vec![*x],
            Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf: a parameter or an input. Gradients may be taken with respect to it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    /// Gradients of the sum of `y`'s entries with respect to each of `wrt`.
    /// Variables `y` does not depend on get a zero gradient.
    pub fn grad<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        let n = y.id + 1;
        let lo = wrt.iter().map(|w| w.id).min().unwrap_or(n).min(n);
        let mut depends = vec![false; n];
        for w in wrt {
            if w.id < n {
                depends[w.id] = true;
            }
        }
        for id in lo..n {
            if !depends[id] {
                depends[id] = self.op_of(id).parents().iter().any(|&p| depends[p]);
            }
        }
        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        if depends[y.id] {
            let ones = Tensor::ones(y.value().raw_dim());
            grads[y.id] = Some(self.leaf(ones));
        }
        for id in (lo..n).rev() {
            let Some(g) = grads[id] else { continue };
            if !depends[id] {
                continue;
            }
            for (p, gp) in self.backward(id, g) {
                if !depends[p] {
                    continue;
                }
                grads[p] = Some(match grads[p] {
                    Some(prev) => prev + gp,
                    None => gp,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.leaf(Tensor::zeros(w.value().raw_dim())),
            })
            .collect()
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn backward<'g>(&'g self, id: usize, g: Var<'g>) -> Vec<(usize, Var<'g>)> {
        let v = |i: usize| self.var(i);
        let shape_of = |i: usize| self.value_of(i).shape().to_vec();
        match self.op_of(id) {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, -g)],
            Op::Mul(a, b) => vec![(a, g * v(b)), (b, g * v(a))],
            Op::Div(a, b) => {
                let (va, vb) = (v(a), v(b));
                let ga = g.div(vb);
                let gb = -(g * va).div(vb * vb);
                vec![(a, ga), (b, gb)]
            }
            Op::Neg(a) => vec![(a, -g)],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::Sqrt(a) => vec![(a, g.div(v(id).scale(2.0)))],
            Op::Sigmoid(a) => {
                let s = v(id);
                vec![(a, g * (s * (-s).add_scalar(1.0)))]
            }
            Op::MaskMul(a, mask) => vec![(a, g.mask_mul_shared(mask))],
            Op::SumTo(a) => vec![(a, g.broadcast_to(&shape_of(a)))],
            Op::BroadcastTo(a) => vec![(a, g.sum_to(&shape_of(a)))],
            Op::Reshape(a) => vec![(a, g.reshape(&shape_of(a)))],
            Op::Concat(xs) => {
                let mut start = 0;
                xs.iter()
                    .map(|&x| {
                        let w = self.value_of(x).shape()[1];
                        let part = g.slice(1, start, start + w);
                        start += w;
                        (x, part)
                    })
                    .collect()
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let total = self.value_of(x).shape()[axis];
                vec![(x, g.pad(axis, start, total - end))]
            }
            Op::Pad { x, axis, before } => {
                let w = self.value_of(x).shape()[axis];
                vec![(x, g.slice(axis, before, before + w))]
            }
            Op::Conv1d(x, w) => {
                let k = self.value_of(w).shape()[2];
                let gx = g.conv1d(v(w).conv_flip());
                let gw = v(x).conv_weight_grad(g, k);
                vec![(x, gx), (w, gw)]
            }
            Op::ConvFlip(w) => vec![(w, g.conv_flip())],
            Op::ConvWeightGrad { x, g: gy } => {
                let gx = v(gy).conv1d(g.conv_flip());
                let ggy = v(x).conv1d(g);
                vec![(x, gx), (gy, ggy)]
            }
            Op::PoolGather(x, idx) => {
                let len = self.value_of(x).shape()[2];
                vec![(x, g.pool_scatter(idx, len))]
            }
            Op::PoolScatter(x, idx) => vec![(x, g.pool_gather(idx))],
            Op::Upsample2(x) => vec![(x, g.pair_sum())],
            Op::PairSum(x) => vec![(x, g.upsample2())],
            Op::MatMul(a, b) => {
                let ga = g.matmul(v(b).transpose());
                let gb = v(a).transpose().matmul(g);
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => vec![(a, g.transpose())],
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

fn as3(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

/// Columns of a same-padded 1-D convolution: row `c*k + j` holds channel
/// `c` shifted by `j - k/2`.
fn im2col(x: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let (c, l) = x.dim();
    let p = (k / 2) as isize;
    let mut cols = Array2::zeros((c * k, l));
    for ci in 0..c {
        for j in 0..k {
            let shift = j as isize - p;
            let mut row = cols.row_mut(ci * k + j);
            let (lo, hi) = ((-shift).max(0) as usize, (l as isize - shift).min(l as isize).max(0) as usize);
            for t in lo..hi {
                row[t] = x[[ci, (t as isize + shift) as usize]];
            }
        }
    }
    cols
}

fn stack3(parts: Vec<Array2<f64>>) -> Tensor {
    let views: Vec<_> = parts.iter().map(|p| p.view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views).expect("equal shapes").into_dyn()
}

/// `y[n,o,t] = Σ_c Σ_j w[o,c,j] · x[n,c,t+j−k/2]`, zero padded.
fn conv1d_value(x: &Tensor, w: &Tensor) -> Tensor {
    let (x3, w3) = (as3(x), as3(w));
    let (n, cin, _) = x3.dim();
    let (cout, wcin, k) = w3.dim();
    assert_eq!(cin, wcin, "conv1d: input has {cin} channels, weight expects {wcin}");
    assert!(k % 2 == 1, "conv1d: kernel must be odd");
    let w2 = w3.to_shape((cout, cin * k)).expect("contiguous weight");
    let parts = par::map_range(n, |i| w2.dot(&im2col(x3.index_axis(Axis(0), i), k)));
    stack3(parts)
}

/// Gradient of a convolution with respect to its weight, summed over the
/// batch in a fixed order.
fn conv_weight_grad_value(x: &Tensor, g: &Tensor, k: usize) -> Tensor {
    let (x3, g3) = (as3(x), as3(g));
    let (n, cin, l) = x3.dim();
    let (gn, cout, gl) = g3.dim();
    assert_eq!((n, l), (gn, gl), "conv weight grad: batch or length mismatch");
    let parts = par::map_range(n, |i| {
        g3.index_axis(Axis(0), i)
            .dot(&im2col(x3.index_axis(Axis(0), i), k).t())
    });
    let mut acc = Array2::<f64>::zeros((cout, cin * k));
    for p in &parts {
        acc += p;
    }
    acc.into_shape_with_order((cout, cin, k))
        .expect("weight layout")
        .into_dyn()
}

fn conv_flip_value(w: &Tensor) -> Tensor {
    let w3 = as3(w);
    let (o, c, k) = w3.dim();
    Array3::from_shape_fn((c, o, k), |(ci, oi, j)| w3[[oi, ci, k - 1 - j]]).into_dyn()
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} entries", v.len());
        *v.iter().next().expect("one entry")
    }

    fn unary(&self, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var<'g> {
        let v = f(&self.value());
        self.graph.push(v, op)
    }

    fn binary(&self, other: Var<'g>, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        self.graph.push(f(&a, &b), op)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            |a, b| {
                same_shape(a, b, "div");
                a / b
            },
            Op::Div(self.id, other.id),
        )
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(|a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(|a| a + c, Op::AddScalar(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(|a| a.mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(
            |a| a.mapv(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Sigmoid(self.id),
        )
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask_mul(self, mask: Tensor) -> Var<'g> {
        self.mask_mul_shared(Arc::new(mask))
    }

    fn mask_mul_shared(self, mask: Arc<Tensor>) -> Var<'g> {
        let m = mask.clone();
        self.unary(
            move |a| {
                same_shape(a, &m, "mask_mul");
                a * &*m
            },
            Op::MaskMul(self.id, mask),
        )
    }

    pub fn relu(self) -> Var<'g> {
        let mask = self.value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.mask_mul(mask)
    }

    /// Sums over every axis where `shape` has extent 1. Rank is kept.
    pub fn sum_to(self, shape: &[usize]) -> Var<'g> {
        let target = shape.to_vec();
        self.unary(
            move |a| {
                assert_eq!(a.ndim(), target.len(), "sum_to: rank mismatch");
                let mut out = a.clone();
                for (ax, (&from, &to)) in a.shape().iter().zip(&target).enumerate() {
                    if to == 1 && from != 1 {
                        out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                    } else {
                        assert_eq!(from, to, "sum_to: incompatible axis {ax}");
                    }
                }
                out
            },
            Op::SumTo(self.id),
        )
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        let target = shape.to_vec();
        self.unary(
            move |a| {
                a.broadcast(IxDyn(&target))
                    .unwrap_or_else(|| panic!("cannot broadcast {:?} to {target:?}", a.shape()))
                    .to_owned()
            },
            Op::BroadcastTo(self.id),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let target = shape.to_vec();
        self.unary(
            move |a| {
                a.to_shape(IxDyn(&target))
                    .unwrap_or_else(|_| panic!("cannot reshape {:?} to {target:?}", a.shape()))
                    .to_owned()
            },
            Op::Reshape(self.id),
        )
    }

    /// Sum of all entries as a one-element tensor of shape `[1]`.
    pub fn sum_all(self) -> Var<'g> {
        let ones = vec![1; self.value().ndim()];
        self.sum_to(&ones).reshape(&[1])
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat: shapes differ off axis 1");
        graph.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Var<'g> {
        self.unary(
            |a| a.slice_axis(Axis(axis), Slice::from(start..end)).to_owned(),
            Op::Slice {
                x: self.id,
                axis,
                start,
                end,
            },
        )
    }

    /// Zero padding along `axis`; the adjoint of [`Var::slice`].
    pub fn pad(self, axis: usize, before: usize, after: usize) -> Var<'g> {
        self.unary(
            |a| {
                let mut shape = a.shape().to_vec();
                let w = shape[axis];
                shape[axis] = before + w + after;
                let mut out = Tensor::zeros(IxDyn(&shape));
                out.slice_axis_mut(Axis(axis), Slice::from(before..before + w))
                    .assign(a);
                out
            },
            Op::Pad {
                x: self.id,
                axis,
                before,
            },
        )
    }

    /// Same-padded 1-D convolution of `[N, Cin, L]` by `[Cout, Cin, K]`, odd `K`.
    pub fn conv1d(self, w: Var<'g>) -> Var<'g> {
        self.binary(w, conv1d_value, Op::Conv1d(self.id, w.id))
    }

    /// `[O, C, K] -> [C, O, K]` with the kernel reversed.
    pub fn conv_flip(self) -> Var<'g> {
        self.unary(conv_flip_value, Op::ConvFlip(self.id))
    }

    /// Weight gradient of [`Var::conv1d`] for input `self` and output gradient `g`.
    pub fn conv_weight_grad(self, g: Var<'g>, k: usize) -> Var<'g> {
        self.binary(
            g,
            |x, gy| conv_weight_grad_value(x, gy, k),
            Op::ConvWeightGrad {
                x: self.id,
                g: g.id,
            },
        )
    }

    /// Max over non-overlapping pairs along time; an odd last frame is dropped.
    /// Ties pick the earlier frame.
    pub fn max_pool2(self) -> Var<'g> {
        let a = self.value();
        let x3 = as3(&a);
        let (n, c, l) = x3.dim();
        let half = l / 2;
        let mut idx = Vec::with_capacity(n * c * half);
        for row in x3.rows() {
            for i in 0..half {
                let (p, q) = (2 * i, 2 * i + 1);
                idx.push(if row[q] > row[p] { q } else { p });
            }
        }
        self.pool_gather(Arc::new(idx))
    }

    fn pool_gather(self, idx: Arc<Vec<usize>>) -> Var<'g> {
        let a = self.value();
        let x3 = as3(&a);
        let (n, c, _) = x3.dim();
        let out_len = idx.len() / (n * c).max(1);
        let mut out = Array3::zeros((n, c, out_len));
        for (r, (mut dst, src)) in out.rows_mut().into_iter().zip(x3.rows()).enumerate() {
            for i in 0..out_len {
                dst[i] = src[idx[r * out_len + i]];
            }
        }
        self.graph
            .push(out.into_dyn(), Op::PoolGather(self.id, idx))
    }

    fn pool_scatter(self, idx: Arc<Vec<usize>>, len: usize) -> Var<'g> {
        let a = self.value();
        let g3 = as3(&a);
        let (n, c, m) = g3.dim();
        let mut out = Array3::zeros((n, c, len));
        for (r, (mut dst, src)) in out.rows_mut().into_iter().zip(g3.rows()).enumerate() {
            for i in 0..m {
                dst[idx[r * m + i]] += src[i];
            }
        }
        self.graph
            .push(out.into_dyn(), Op::PoolScatter(self.id, idx))
    }

    /// Nearest-neighbour doubling along time.
    pub fn upsample2(self) -> Var<'g> {
        self.unary(
            |a| {
                let x3 = as3(a);
                let (n, c, l) = x3.dim();
                Array3::from_shape_fn((n, c, 2 * l), |(i, j, t)| x3[[i, j, t / 2]]).into_dyn()
            },
            Op::Upsample2(self.id),
        )
    }

    /// Sums consecutive time pairs; the adjoint of [`Var::upsample2`].
    pub fn pair_sum(self) -> Var<'g> {
        self.unary(
            |a| {
                let x3 = as3(a);
                let (n, c, l) = x3.dim();
                Array3::from_shape_fn((n, c, l / 2), |(i, j, t)| {
                    x3[[i, j, 2 * t]] + x3[[i, j, 2 * t + 1]]
                })
                .into_dyn()
            },
            Op::PairSum(self.id),
        )
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            |a, b| {
                let a2 = a.view().into_dimensionality::<Ix2>().expect("rank-2 lhs");
                let b2 = b.view().into_dimensionality::<Ix2>().expect("rank-2 rhs");
                a2.dot(&b2).into_dyn()
            },
            Op::MatMul(self.id, other.id),
        )
    }

    pub fn transpose(self) -> Var<'g> {
        self.unary(
            |a| {
                let a2 = a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor");
                a2.t().as_standard_layout().into_owned().into_dyn()
            },
            Op::Transpose(self.id),
        )
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(
            rhs,
            |a, b| {
                same_shape(a, b, "add");
                a + b
            },
            Op::Add(self.id, rhs.id),
        )
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(
            rhs,
            |a, b| {
                same_shape(a, b, "sub");
                a - b
            },
            Op::Sub(self.id, rhs.id),
        )
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(
            rhs,
            |a, b| {
                same_shape(a, b, "mul");
                a * b
            },
            Op::Mul(self.id, rhs.id),
        )
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(|a| -a, Op::Neg(self.id))
    }
}
