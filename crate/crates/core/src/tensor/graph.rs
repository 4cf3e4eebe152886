use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Square,
    Sqrt,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Softplus,
    LeakyRelu(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(usize, Unary),
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Upsample2x(usize),
    AvgPool2(usize),
    GridSample { x: usize, grid: usize },
    AffineGrid { theta: usize, h: usize, w: usize },
    SumAxes(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape recording one forward computation.
///
/// Nodes are created in topological order, so the backward sweep simply
/// walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward sweep, keyed by node.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf: gradients flow into it.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `output`; seeds d(output)/d(output) = 1.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let seed = {
            let v = self.value_of(output.id);
            assert_eq!(v.numel(), 1, "backward from non-scalar {:?}", v.shape());
            Tensor::ones(v.shape())
        };
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(grad);
                continue;
            }
            for (input, g) in input_grads(&nodes, node, &grad) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    None => grads[input] = Some(g),
                }
            }
        }
        Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .filter_map(|(i, g)| {
                    let g = g?;
                    matches!(nodes[i].op, Op::Leaf).then_some((i, g))
                })
                .collect(),
        }
    }
}

fn unary_forward(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => logistic(x),
        Unary::Tanh => x.tanh(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Softplus => {
            if x > 30.0 {
                x
            } else {
                x.exp().ln_1p()
            }
        }
        Unary::LeakyRelu(slope) => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
    }
}

/// Derivative given the input `x` and output `y`.
fn unary_derivative(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Softplus => logistic(x),
        Unary::LeakyRelu(slope) => {
            if x >= 0.0 {
                1.0
            } else {
                slope
            }
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn binary_grads(
    nodes: &[Node],
    a: usize,
    b: usize,
    out_shape: &[usize],
    grad: &Tensor,
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) -> Vec<(usize, Tensor)> {
    let (va, vb) = (&nodes[a].value, &nodes[b].value);
    let g = grad.data();
    let mut res = Vec::new();
    if nodes[a].requires_grad {
        let mut acc = vec![0.0; va.numel()];
        kernels::for_each_broadcast(out_shape, va.shape(), vb.shape(), |o, ia, ib| {
            acc[ia] += da(g[o], va.data()[ia], vb.data()[ib]);
        });
        res.push((a, Tensor::new(va.shape(), acc)));
    }
    if nodes[b].requires_grad {
        let mut acc = vec![0.0; vb.numel()];
        kernels::for_each_broadcast(out_shape, va.shape(), vb.shape(), |o, ia, ib| {
            acc[ib] += db(g[o], va.data()[ia], vb.data()[ib]);
        });
        res.push((b, Tensor::new(vb.shape(), acc)));
    }
    res
}

fn input_grads(nodes: &[Node], node: &Node, grad: &Tensor) -> Vec<(usize, Tensor)> {
    let out = &node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => binary_grads(nodes, *a, *b, out.shape(), grad, |g, _, _| g, |g, _, _| g),
        Op::Sub(a, b) => binary_grads(nodes, *a, *b, out.shape(), grad, |g, _, _| g, |g, _, _| -g),
        Op::Mul(a, b) => {
            binary_grads(nodes, *a, *b, out.shape(), grad, |g, _, y| g * y, |g, x, _| g * x)
        }
        Op::Div(a, b) => binary_grads(
            nodes,
            *a,
            *b,
            out.shape(),
            grad,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        ),
        Op::Scale(x, s) => vec![(*x, grad.map(|g| g * s))],
        Op::Shift(x) => vec![(*x, grad.clone())],
        Op::Unary(x, u) => {
            let xv = &nodes[*x].value;
            let data = grad
                .data()
                .iter()
                .zip(xv.data())
                .zip(out.data())
                .map(|((g, xi), yi)| g * unary_derivative(*u, *xi, *yi))
                .collect();
            vec![(*x, Tensor::new(xv.shape(), data))]
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            let mut res = Vec::new();
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, 1.0, grad.data(), (n, 1), vb.data(), (1, n), 0.0, &mut da);
                res.push((*a, Tensor::new(&[m, k], da)));
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, 1.0, va.data(), (1, k), grad.data(), (n, 1), 0.0, &mut db);
                res.push((*b, Tensor::new(&[k, n], db)));
            }
            res
        }
        Op::Conv2d { x, w, geom } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let (dx, dw) = kernels::conv2d_backward(
                vx.data(),
                vw.data(),
                grad.data(),
                geom,
                nodes[*x].requires_grad,
                nodes[*w].requires_grad,
            );
            let mut res = Vec::new();
            if let Some(dx) = dx {
                res.push((*x, Tensor::new(vx.shape(), dx)));
            }
            if let Some(dw) = dw {
                res.push((*w, Tensor::new(vw.shape(), dw)));
            }
            res
        }
        Op::Upsample2x(x) => {
            let s = nodes[*x].value.shape().to_vec();
            let dx = kernels::upsample2x_backward(grad.data(), s[0] * s[1], s[2], s[3]);
            vec![(*x, Tensor::new(&s, dx))]
        }
        Op::AvgPool2(x) => {
            let s = nodes[*x].value.shape().to_vec();
            let dx = kernels::avgpool2_backward(grad.data(), s[0] * s[1], s[2], s[3]);
            vec![(*x, Tensor::new(&s, dx))]
        }
        Op::GridSample { x, grid } => {
            let (vx, vg) = (&nodes[*x].value, &nodes[*grid].value);
            let s = vx.shape();
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            let (dx, dg) = kernels::grid_sample_backward(
                vx.data(),
                [s[0], s[1], s[2], s[3]],
                vg.data(),
                ho,
                wo,
                grad.data(),
                nodes[*x].requires_grad,
                nodes[*grid].requires_grad,
            );
            let mut res = Vec::new();
            if let Some(dx) = dx {
                res.push((*x, Tensor::new(s, dx)));
            }
            if let Some(dg) = dg {
                res.push((*grid, Tensor::new(vg.shape(), dg)));
            }
            res
        }
        Op::AffineGrid { theta, h, w } => {
            let n = nodes[*theta].value.shape()[0];
            let dt = kernels::affine_grid_backward(grad.data(), n, *h, *w);
            vec![(*theta, Tensor::new(&[n, 2, 3], dt))]
        }
        Op::SumAxes(x) => {
            let xs = nodes[*x].value.shape().to_vec();
            let mut dx = vec![0.0; xs.iter().product()];
            let g = grad.data();
            kernels::for_each_broadcast(&xs, &xs, grad.shape(), |o, _, ib| dx[o] = g[ib]);
            vec![(*x, Tensor::new(&xs, dx))]
        }
        Op::Reshape(x) => {
            let xs = nodes[*x].value.shape().to_vec();
            vec![(*x, grad.clone().reshape(&xs))]
        }
        Op::Concat { parts, axis } => {
            let os = out.shape();
            let outer: usize = os[..*axis].iter().product();
            let inner: usize = os[axis + 1..].iter().product();
            let total_axis = os[*axis];
            let mut offset = 0;
            let mut res = Vec::new();
            for &p in parts {
                let ps = nodes[p].value.shape().to_vec();
                let len = ps[*axis];
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total_axis + offset) * inner;
                        d.extend_from_slice(&grad.data()[start..start + len * inner]);
                    }
                    res.push((p, Tensor::new(&ps, d)));
                }
                offset += len;
            }
            res
        }
        Op::Narrow { x, axis, start } => {
            let xs = nodes[*x].value.shape().to_vec();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let len = out.shape()[*axis];
            let mut dx = vec![0.0; xs.iter().product()];
            for o in 0..outer {
                let dst = (o * xs[*axis] + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
            }
            vec![(*x, Tensor::new(&xs, dx))]
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary_op(self, u: Unary) -> Var<'g> {
        let v = self.value().map(|x| unary_forward(u, x));
        self.graph.push(v, Op::Unary(self.id, u), self.requires_grad())
    }

    fn binary_op(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(a.shape(), b.shape());
        let mut data = vec![0.0; shape.iter().product()];
        kernels::for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
            data[o] = f(a.data()[ia], b.data()[ib])
        });
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(Tensor::new(&shape, data), op, rg)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x * s);
        self.graph.push(v, Op::Scale(self.id, s), self.requires_grad())
    }

    pub fn shift(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.graph.push(v, Op::Shift(self.id), self.requires_grad())
    }

    pub fn neg(self) -> Var<'g> {
        self.unary_op(Unary::Neg)
    }

    pub fn square(self) -> Var<'g> {
        self.unary_op(Unary::Square)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary_op(Unary::Sqrt)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary_op(Unary::Exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary_op(Unary::Log)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary_op(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary_op(Unary::Tanh)
    }

    pub fn sin(self) -> Var<'g> {
        self.unary_op(Unary::Sin)
    }

    pub fn cos(self) -> Var<'g> {
        self.unary_op(Unary::Cos)
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary_op(Unary::Softplus)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary_op(Unary::LeakyRelu(slope))
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(
            a.shape().len() == 2 && b.shape().len() == 2 && a.shape()[1] == b.shape()[0],
            "matmul shapes {:?} × {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut c);
        let rg = self.requires_grad() || other.requires_grad();
        self.graph
            .push(Tensor::new(&[m, n], c), Op::MatMul(self.id, other.id), rg)
    }

    /// 2-D convolution of an NCHW input with an `[out, in, k, k]` kernel.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad);
        let out = kernels::conv2d_forward(x.data(), w.data(), &geom);
        let rg = self.requires_grad() || weight.requires_grad();
        self.graph.push(
            Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
            },
            rg,
        )
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2x(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let out = kernels::upsample2x_forward(x.data(), s[0] * s[1], s[2], s[3]);
        self.graph.push(
            Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out),
            Op::Upsample2x(self.id),
            self.requires_grad(),
        )
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        assert!(s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2 on odd size {s:?}");
        let out = kernels::avgpool2_forward(x.data(), s[0] * s[1], s[2], s[3]);
        self.graph.push(
            Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], out),
            Op::AvgPool2(self.id),
            self.requires_grad(),
        )
    }

    /// Bilinear sampling with border replication at normalized grid points.
    pub fn grid_sample(self, grid: Var<'g>) -> Var<'g> {
        let (x, g) = (self.value(), grid.value());
        let s = x.shape();
        let gs = g.shape();
        assert!(
            gs.len() == 4 && gs[0] == s[0] && gs[3] == 2,
            "grid {gs:?} incompatible with input {s:?}"
        );
        let (ho, wo) = (gs[1], gs[2]);
        let out = kernels::grid_sample_forward(x.data(), [s[0], s[1], s[2], s[3]], g.data(), ho, wo);
        let rg = self.requires_grad() || grid.requires_grad();
        self.graph.push(
            Tensor::new(&[s[0], s[1], ho, wo], out),
            Op::GridSample {
                x: self.id,
                grid: grid.id,
            },
            rg,
        )
    }

    /// Sampling grid `[n, h, w, 2]` from affine matrices `[n, 2, 3]`.
    pub fn affine_grid(self, h: usize, w: usize) -> Var<'g> {
        let t = self.value();
        assert!(
            t.shape().len() == 3 && t.shape()[1] == 2 && t.shape()[2] == 3,
            "theta must be [n, 2, 3], got {:?}",
            t.shape()
        );
        let n = t.shape()[0];
        let grid = kernels::affine_grid_forward(t.data(), n, h, w);
        self.graph.push(
            Tensor::new(&[n, h, w, 2], grid),
            Op::AffineGrid {
                theta: self.id,
                h,
                w,
            },
            self.requires_grad(),
        )
    }

    /// Bilinear (corner-aligned) resize of an NCHW tensor.
    pub fn resize_bilinear(self, h: usize, w: usize) -> Var<'g> {
        let n = self.shape()[0];
        let identity = Tensor::new(&[n, 2, 3], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(n));
        let grid = self.graph.constant(identity).affine_grid(h, w);
        self.grid_sample(grid)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        let mut acc = vec![0.0; shape.iter().product()];
        kernels::for_each_broadcast(x.shape(), x.shape(), &shape, |o, _, ib| {
            acc[ib] += x.data()[o]
        });
        self.graph.push(
            Tensor::new(&shape, acc),
            Op::SumAxes(self.id),
            self.requires_grad(),
        )
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'g> {
        let s = self.shape();
        let count: usize = axes.iter().map(|&a| s[a]).product();
        self.sum_axes(axes).scale(1.0 / count as f64)
    }

    pub fn sum_all(self) -> Var<'g> {
        let rank = self.shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum_axes(&axes).reshape(&[1])
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape);
        self.graph
            .push(v, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for d in 0..s.len() {
                assert!(d == axis || s[d] == first[d], "concat shape mismatch {first:?} vs {s:?}");
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        graph.push(
            Tensor::new(&shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let xs = x.shape();
        assert!(start + len <= xs[axis], "narrow out of range on {xs:?}");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * xs[axis] + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = xs.to_vec();
        shape[axis] = len;
        self.graph.push(
            Tensor::new(&shape, data),
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        )
    }
}
