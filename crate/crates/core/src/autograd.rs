//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive as a node holding its forward value
//! and a closure that maps the output gradient to parent gradients.
//! Parameters enter through [`Graph::param`] and their gradients are keyed
//! by parameter name, summed over every use.
//!
//! Graphs are single-threaded (`RefCell`); build one per forward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::param::Param;
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    trainable: Option<Box<dyn Fn(&str) -> bool>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a node of a [`Graph`].
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

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            trainable: None,
        }
    }

    /// A graph where only parameters accepted by `filter` receive gradients;
    /// the rest enter as constants.
    pub fn with_trainable(filter: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            trainable: Some(Box::new(filter)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Tensor, requires_grad: bool, param: Option<String>) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        })
    }

    /// A differentiable input.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true, None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false, None)
    }

    pub fn param(&self, p: &Param) -> Var<'_> {
        let trainable = self.trainable.as_ref().is_none_or(|f| f(p.name()));
        if trainable {
            self.leaf(p.value().clone(), true, Some(p.name().to_string()))
        } else {
            self.constant(p.value().clone())
        }
    }

    fn op<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
            param: None,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar (single element) output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let out_len = nodes[output.id].value.len();
        assert_eq!(out_len, 1, "backward needs a single-element output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match grads[pid].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[pid] = Some(pg),
                }
            }
        }
        let mut by_param: BTreeMap<String, Tensor> = BTreeMap::new();
        for (id, g) in grads.iter().enumerate() {
            if let (Some(name), Some(g)) = (nodes[id].param.as_ref(), g.as_ref()) {
                match by_param.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        by_param.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Gradients {
            by_node: grads,
            by_param,
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every element of `out_shape`, the flat offset into a tensor of
/// `shape` broadcast to it.
fn broadcast_offsets(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src = strides(shape);
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off = idx
            .iter()
            .zip(shape)
            .zip(&src)
            .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
            .sum();
        offsets.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sum `grad` (of `out_shape`) back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let offsets = broadcast_offsets(shape, grad.shape());
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    for (g, &o) in grad.data().iter().zip(&offsets) {
        data[o] += g;
    }
    out
}

fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let oa = broadcast_offsets(a.shape(), &shape);
    let ob = broadcast_offsets(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

// ---------------------------------------------------------------------------
// Operations

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Broadcasting element-wise sum.
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = binary_broadcast(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(out, &[self, other], move |g| {
            vec![reduce_to(g, &sa), reduce_to(g, &sb)]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.add(other.scale(-1.0))
    }

    /// Broadcasting element-wise product.
    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = binary_broadcast(&a, &b, |x, y| x * y);
        self.graph.op(out, &[self, other], move |g| {
            let ga = binary_broadcast(g, &b, |x, y| x * y);
            let gb = binary_broadcast(g, &a, |x, y| x * y);
            vec![reduce_to(&ga, a.shape()), reduce_to(&gb, b.shape())]
        })
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        let out = self.value().map(|v| v * k);
        self.graph.op(out, &[self], move |g| vec![g.map(|v| v * k)])
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        let out = self.value().map(|v| v + k);
        self.graph.op(out, &[self], move |g| vec![g.clone()])
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_out = (*y).clone();
        self.graph.op(y_out, &[self], move |g| {
            let mut d = g.clone();
            for ((gd, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                *gd *= df(xv, yv);
            }
            vec![d]
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `Relu(Tanh(x))` capped at the largest double below one, so gates
    /// stay in `[0, 1)` even where `tanh` rounds to 1.
    pub fn gate(self) -> Var<'g> {
        self.unary(
            |v| v.tanh().max(0.0).min(GATE_MAX),
            |x, _| {
                if x > 0.0 {
                    let t = x.tanh();
                    1.0 - t * t
                } else {
                    0.0
                }
            },
        )
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.op(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Tensor::full(&shape, g.data()[0])]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = 1;
        let out = reduce_to(&x, &out_shape);
        let in_shape = x.shape().to_vec();
        self.graph.op(out, &[self], move |g| {
            vec![binary_broadcast(&Tensor::zeros(&in_shape), g, |_, v| v)]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).expect("reshape");
        self.graph.op(out, &[self], move |g| {
            vec![g.clone().reshape(&in_shape).expect("reshape back")]
        })
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let x = self.value();
        let out = permute_tensor(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph
            .op(out, &[self], move |g| vec![permute_tensor(g, &inverse)])
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let out = Tensor::new(out_shape, data).expect("narrow");
        self.graph.op(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                let base = (o * shape[axis] + start) * inner;
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                gd[base..base + len * inner].copy_from_slice(src);
            }
            vec![gx]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut y = Tensor::zeros(&shape);
        {
            let (xd, yd) = (x.data(), y.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..n {
                        let e = (xd[at(k)] - m).exp();
                        yd[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        yd[at(k)] /= z;
                    }
                }
            }
        }
        let y = Rc::new(y);
        let y_out = (*y).clone();
        self.graph.op(y_out, &[self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            let (gd, yd, gxd) = (g.data(), y.data(), gx.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..n {
                        gxd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![gx]
        })
    }

    /// Global average pooling `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let x = self.value();
        let [b, c, h, w] = x.dims4();
        let hw = h * w;
        let data = x.data().chunks(hw).map(|s| s.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::new(vec![b, c], data).expect("gap");
        self.graph.op(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for (chunk, &gv) in gx.data_mut().chunks_mut(hw).zip(g.data()) {
                chunk.fill(gv / hw as f64);
            }
            vec![gx]
        })
    }

    /// Global max pooling `(B, C, H, W) -> (B, C)`. The gradient goes to
    /// the first maximal position in row-major order.
    pub fn global_max_pool(self) -> Var<'g> {
        let x = self.value();
        let [b, c, h, w] = x.dims4();
        let hw = h * w;
        let mut argmax = Vec::with_capacity(b * c);
        let mut data = Vec::with_capacity(b * c);
        for s in x.data().chunks(hw) {
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            argmax.push(best);
            data.push(s[best]);
        }
        let out = Tensor::new(vec![b, c], data).expect("gmp");
        self.graph.op(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for ((chunk, &gv), &am) in gx.data_mut().chunks_mut(hw).zip(g.data()).zip(&argmax) {
                chunk[am] = gv;
            }
            vec![gx]
        })
    }

    /// `x @ wᵀ + b` over the last axis; `w` is `(out, in)`, `b` is `(out)`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let in_dim = *x.shape().last().expect("linear input rank");
        assert_eq!(w.rank(), 2);
        assert_eq!(w.dim(1), in_dim, "linear: weight {:?} vs input {:?}", w.shape(), x.shape());
        let out_dim = w.dim(0);
        let rows = x.len() / in_dim;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut data = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &x.data()[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let wr = &w.data()[o * in_dim..(o + 1) * in_dim];
                data[r * out_dim + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        let out = Tensor::new(out_shape, data).expect("linear");
        let y = self.graph.op(out, &[self, weight], move |g| {
            let gd = g.data();
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(w.shape());
            {
                let gxd = gx.data_mut();
                for r in 0..rows {
                    for o in 0..out_dim {
                        let gv = gd[r * out_dim + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for i in 0..in_dim {
                            gxd[r * in_dim + i] += gv * w.data()[o * in_dim + i];
                        }
                    }
                }
            }
            {
                let gwd = gw.data_mut();
                for r in 0..rows {
                    for o in 0..out_dim {
                        let gv = gd[r * out_dim + o];
                        for i in 0..in_dim {
                            gwd[o * in_dim + i] += gv * x.data()[r * in_dim + i];
                        }
                    }
                }
            }
            vec![gx, gw]
        });
        match bias {
            Some(b) => y.add(b.reshape(&broadcast_bias_shape(y.shape().len(), out_dim))),
            None => y,
        }
    }

    /// Batched matrix product `(B, N, K) x (B, K, M) -> (B, N, M)`.
    pub fn bmm(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.rank(), 3);
        assert_eq!(b.rank(), 3);
        let (bs, n, k) = (a.dim(0), a.dim(1), a.dim(2));
        assert_eq!(b.dim(0), bs);
        assert_eq!(b.dim(1), k, "bmm inner dims");
        let m = b.dim(2);
        let mut out = Tensor::zeros(&[bs, n, m]);
        matmul_into(a.data(), b.data(), out.data_mut(), bs, n, k, m);
        self.graph.op(out, &[self, other], move |g| {
            let mut ga = Tensor::zeros(&[bs, n, k]);
            let mut gb = Tensor::zeros(&[bs, k, m]);
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            {
                let gad = ga.data_mut();
                for s in 0..bs {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = gd[(s * n + i) * m + j];
                            for t in 0..k {
                                gad[(s * n + i) * k + t] += gv * bd[(s * k + t) * m + j];
                            }
                        }
                    }
                }
            }
            {
                let gbd = gb.data_mut();
                for s in 0..bs {
                    for i in 0..n {
                        for t in 0..k {
                            let av = ad[(s * n + i) * k + t];
                            for j in 0..m {
                                gbd[(s * k + t) * m + j] += av * gd[(s * n + i) * m + j];
                            }
                        }
                    }
                }
            }
            vec![ga, gb]
        })
    }

    /// 2-D convolution. `weight` is `(out, in, k, k)`, `bias` `(out)`.
    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding);
        let out = geom.forward(x.data(), w.data());
        let y = self.graph.op(out, &[self, weight], move |g| {
            let (gx, gw) = geom.backward(x.data(), w.data(), g.data());
            vec![gx, gw]
        });
        match bias {
            Some(b) => {
                let c = b.value().len();
                y.add(b.reshape(&[1, c, 1, 1]))
            }
            None => y,
        }
    }
}

fn broadcast_bias_shape(rank: usize, n: usize) -> Vec<usize> {
    let mut s = vec![1; rank];
    s[rank - 1] = n;
    s
}

/// Concatenate along `axis`; all other dims must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!parts.is_empty(), "concat of nothing");
    let graph = parts[0].graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    for v in &values {
        assert_eq!(v.rank(), base.len(), "concat rank mismatch");
        for (ax, (&a, &b)) in v.shape().iter().zip(&base).enumerate() {
            assert!(ax == axis || a == b, "concat dim mismatch on axis {ax}");
        }
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
    let total: usize = sizes.iter().sum();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in values.iter().zip(&sizes) {
            data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let out = Tensor::new(out_shape, data).expect("concat");
    graph.op(out, parts, move |g| {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (gv, &s) in grads.iter_mut().zip(&sizes) {
                gv.extend_from_slice(&g.data()[pos..pos + s * inner]);
                pos += s * inner;
            }
        }
        grads
            .into_iter()
            .zip(&sizes)
            .map(|(d, &s)| {
                let mut shape = base.clone();
                shape[axis] = s;
                Tensor::new(shape, d).expect("concat grad")
            })
            .collect()
    })
}

/// Largest `f64` strictly below one.
pub const GATE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len(), "permute rank");
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src = strides(shape);
    let permuted: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let n = x.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&permuted).map(|(i, s)| i * s).sum();
        data.push(x.data()[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute")
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], bs: usize, n: usize, k: usize, m: usize) {
    for s in 0..bs {
        for i in 0..n {
            let orow = &mut out[(s * n + i) * m..(s * n + i + 1) * m];
            for t in 0..k {
                let av = a[(s * n + i) * k + t];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[(s * k + t) * m..(s * k + t + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be 4-D");
        assert_eq!(w.len(), 4, "conv2d weight must be 4-D");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?} weight {w:?}");
        assert_eq!(w[2], w[3], "square kernels only");
        assert!(stride >= 1);
        let k = w[2];
        assert!(x[2] + 2 * pad >= k && x[3] + 2 * pad >= k, "kernel larger than input");
        let oh = (x[2] + 2 * pad - k) / stride + 1;
        let ow = (x[3] + 2 * pad - k) / stride + 1;
        Self {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    /// Input coordinate for output position `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Tensor {
        let g = *self;
        let mut out = Tensor::zeros(&[g.batch, g.cout, g.oh, g.ow]);
        let od = out.data_mut();
        for b in 0..g.batch {
            for co in 0..g.cout {
                let obase = (b * g.cout + co) * g.oh * g.ow;
                for ci in 0..g.cin {
                    let xbase = (b * g.cin + ci) * g.h * g.w;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..g.oh {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for ox in 0..g.ow {
                                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                    od[obase + oy * g.ow + ox] += wv * x[xbase + iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], w: &[f64], gout: &[f64]) -> (Tensor, Tensor) {
        let g = *self;
        let mut gx = Tensor::zeros(&[g.batch, g.cin, g.h, g.w]);
        let mut gw = Tensor::zeros(&[g.cout, g.cin, g.k, g.k]);
        let (gxd, gwd) = (gx.data_mut(), gw.data_mut());
        for b in 0..g.batch {
            for co in 0..g.cout {
                let obase = (b * g.cout + co) * g.oh * g.ow;
                for ci in 0..g.cin {
                    let xbase = (b * g.cin + ci) * g.h * g.w;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for oy in 0..g.oh {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for ox in 0..g.ow {
                                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                    let gv = gout[obase + oy * g.ow + ox];
                                    let xi = xbase + iy * g.w + ix;
                                    acc += gv * x[xi];
                                    gxd[xi] += gv * wv;
                                }
                            }
                            gwd[widx] += acc;
                        }
                    }
                }
            }
        }
        (gx, gw)
    }
}
