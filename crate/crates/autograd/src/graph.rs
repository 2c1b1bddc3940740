use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::kernels::{self, ConvGeometry};
use crate::Tensor;

/// A recorded computation.
///
/// Every operation appends a node holding its value. [`Graph::grad`] walks
/// the nodes backwards and builds the vector-Jacobian products out of the
/// same operations, so when `create_graph` is set the gradients are
/// themselves differentiable and can be fed into a second backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Powf(usize, f64),
    MaskMul(usize, Rc<Tensor>),
    SumAll(usize),
    Expand(usize),
    Conv { x: usize, w: usize, geo: ConvGeometry },
    ConvInputGrad { g: usize, w: usize, geo: ConvGeometry },
    ConvWeightGrad { x: usize, g: usize, geo: ConvGeometry },
    AddBias(usize, usize),
    ChannelSum(usize),
    BroadcastChannel(usize),
    Gather { x: usize, idx: Rc<Vec<usize>> },
    Scatter { g: usize, idx: Rc<Vec<usize>> },
    Upsample(usize),
    UpsampleAdjoint(usize),
    Concat(usize, usize),
    Slice { x: usize, start: usize },
    Pad { x: usize, start: usize },
    LogSoftmax(usize),
    ChannelSumKeep(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | Concat(a, b) => vec![a, b],
            Conv { x, w, .. } => vec![x, w],
            ConvInputGrad { g, w, .. } => vec![g, w],
            ConvWeightGrad { x, g, .. } => vec![x, g],
            Scale(a, _) | Exp(a) | Powf(a, _) | MaskMul(a, _) | SumAll(a) | Expand(a)
            | ChannelSum(a) | BroadcastChannel(a) | Upsample(a) | UpsampleAdjoint(a)
            | LogSoftmax(a) | ChannelSumKeep(a) => vec![a],
            Gather { x, .. } | Slice { x, .. } | Pad { x, .. } => vec![x],
            Scatter { g, .. } => vec![g],
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` with recording switched off: every node it creates is a
    /// constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    fn push_leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
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

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are recorded and depend
    /// differentiably on the inputs; otherwise they are constants. Inputs
    /// that `output` does not depend on receive zero gradients.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Vec<Var<'g>> {
        assert!(std::ptr::eq(output.graph, self), "output belongs to another graph");
        assert_eq!(
            output.value().numel(),
            1,
            "grad() needs a scalar output, got shape {:?}",
            output.value().shape()
        );
        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'g>>> = vec![None; output.id + 1];
        grads[output.id] = Some(self.constant(Tensor::ones(output.value().shape())));
        let mut keep = vec![false; output.id + 1];
        for w in wrt {
            if w.id <= output.id {
                keep[w.id] = true;
            }
        }
        for id in (0..=output.id).rev() {
            let Some(gy) = (if keep[id] { grads[id] } else { grads[id].take() }) else {
                continue;
            };
            if !self.requires_grad(id) {
                continue;
            }
            for (parent, g) in self.vjp(id, gy) {
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc + g,
                    None => g,
                });
            }
        }
        let out = wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect();
        self.recording.set(prev);
        out
    }

    /// Vector-Jacobian products of node `id` for the incoming gradient `gy`,
    /// restricted to parents that require gradients.
    fn vjp<'g>(&'g self, id: usize, gy: Var<'g>) -> Vec<(usize, Var<'g>)> {
        use Op::*;
        let op = self.nodes.borrow()[id].op.clone();
        let v = |i: usize| self.var(i);
        let mut out = Vec::with_capacity(2);
        let mut emit = |parent: usize, f: &dyn Fn() -> Var<'g>| {
            if self.requires_grad(parent) {
                out.push((parent, f()));
            }
        };
        match op {
            Leaf => {}
            Add(a, b) => {
                emit(a, &|| gy);
                emit(b, &|| gy);
            }
            Sub(a, b) => {
                emit(a, &|| gy);
                emit(b, &|| gy.scale(-1.0));
            }
            Mul(a, b) => {
                emit(a, &|| gy * v(b));
                emit(b, &|| gy * v(a));
            }
            Scale(a, c) => emit(a, &|| gy.scale(c)),
            Exp(a) => emit(a, &|| gy * v(id)),
            Powf(a, p) => emit(a, &|| gy * v(a).powf(p - 1.0).scale(p)),
            MaskMul(a, ref mask) => emit(a, &|| gy.mask_mul(Rc::clone(mask))),
            SumAll(a) => emit(a, &|| gy.expand(v(a).value().shape())),
            Expand(a) => emit(a, &|| gy.sum()),
            Conv { x, w, geo } => {
                let (_, _, h, wd) = v(x).value().dims4();
                emit(x, &|| gy.conv2d_input_grad(v(w), geo, (h, wd)));
                emit(w, &|| v(x).conv2d_weight_grad(gy, geo));
            }
            ConvInputGrad { g, w, geo } => {
                emit(g, &|| gy.conv2d(v(w), geo));
                emit(w, &|| gy.conv2d_weight_grad(v(g), geo));
            }
            ConvWeightGrad { x, g, geo } => {
                let (_, _, h, wd) = v(x).value().dims4();
                emit(x, &|| v(g).conv2d_input_grad(gy, geo, (h, wd)));
                emit(g, &|| v(x).conv2d(gy, geo));
            }
            AddBias(x, b) => {
                emit(x, &|| gy);
                emit(b, &|| gy.channel_sum());
            }
            ChannelSum(a) => emit(a, &|| gy.broadcast_channel(v(a).value().shape())),
            BroadcastChannel(b) => emit(b, &|| gy.channel_sum()),
            Gather { x, ref idx } => {
                emit(x, &|| gy.scatter(Rc::clone(idx), v(x).value().shape()))
            }
            Scatter { g, ref idx } => emit(g, &|| gy.gather(Rc::clone(idx), v(g).value().shape())),
            Upsample(a) => emit(a, &|| gy.upsample2_adjoint()),
            UpsampleAdjoint(a) => emit(a, &|| gy.upsample2()),
            Concat(a, b) => {
                let ca = v(a).value().dims4().1;
                let cb = v(b).value().dims4().1;
                emit(a, &|| gy.slice_channels(0, ca));
                emit(b, &|| gy.slice_channels(ca, cb));
            }
            Slice { x, start, .. } => {
                let total = v(x).value().dims4().1;
                emit(x, &|| gy.pad_channels(start, total));
            }
            Pad { x, start, .. } => {
                let len = v(x).value().dims4().1;
                emit(x, &|| gy.slice_channels(start, len));
            }
            LogSoftmax(a) => emit(a, &|| gy - v(id).exp() * gy.channel_sum_keep()),
            ChannelSumKeep(a) => emit(a, &|| gy.channel_sum_keep()),
        }
        out
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
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// A constant sharing this node's value.
    pub fn detach(&self) -> Var<'g> {
        self.graph.push_leaf(self.value(), false)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(self.value().scale(c), Op::Scale(self.id, c))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(self.value().map(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(self, mask: Rc<Tensor>) -> Var<'g> {
        let value = self.value().mul(&mask);
        self.unary(value, Op::MaskMul(self.id, mask))
    }

    /// Rectifier, expressed as a product with the constant mask `x > 0`.
    pub fn relu(self) -> Var<'g> {
        let mask = self.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.mask_mul(Rc::new(mask))
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(Tensor::scalar(self.value().sum()), Op::SumAll(self.id))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'g> {
        let x = self.value().item();
        self.unary(Tensor::full(shape, x), Op::Expand(self.id))
    }

    pub fn conv2d(self, w: Var<'g>, geo: ConvGeometry) -> Var<'g> {
        self.same_graph(&w);
        let value = kernels::conv2d(&self.value(), &w.value(), geo);
        self.unary(value, Op::Conv { x: self.id, w: w.id, geo })
    }

    pub fn conv2d_input_grad(self, w: Var<'g>, geo: ConvGeometry, input_hw: (usize, usize)) -> Var<'g> {
        self.same_graph(&w);
        let value = kernels::conv2d_input_grad(&self.value(), &w.value(), geo, input_hw);
        self.unary(value, Op::ConvInputGrad { g: self.id, w: w.id, geo })
    }

    /// Weight gradient of a convolution whose input is `self` and whose
    /// output gradient is `g`.
    pub fn conv2d_weight_grad(self, g: Var<'g>, geo: ConvGeometry) -> Var<'g> {
        self.same_graph(&g);
        let value = kernels::conv2d_weight_grad(&self.value(), &g.value(), geo);
        self.unary(value, Op::ConvWeightGrad { x: self.id, g: g.id, geo })
    }

    pub fn add_bias(self, b: Var<'g>) -> Var<'g> {
        self.same_graph(&b);
        let value = kernels::add_channel_bias(&self.value(), &b.value());
        self.unary(value, Op::AddBias(self.id, b.id))
    }

    pub fn channel_sum(self) -> Var<'g> {
        self.unary(kernels::channel_sum(&self.value()), Op::ChannelSum(self.id))
    }

    pub fn broadcast_channel(self, shape: &[usize]) -> Var<'g> {
        let value = kernels::broadcast_channel(&self.value(), shape);
        self.unary(value, Op::BroadcastChannel(self.id))
    }

    pub fn max_pool2(self) -> Var<'g> {
        let (value, idx) = kernels::max_pool2(&self.value());
        self.unary(value, Op::Gather { x: self.id, idx: Rc::new(idx) })
    }

    fn gather(self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var<'g> {
        let value = kernels::gather(&self.value(), &idx, out_shape);
        self.unary(value, Op::Gather { x: self.id, idx })
    }

    fn scatter(self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var<'g> {
        let value = kernels::scatter(&self.value(), &idx, out_shape);
        self.unary(value, Op::Scatter { g: self.id, idx })
    }

    pub fn upsample2(self) -> Var<'g> {
        self.unary(kernels::upsample2(&self.value()), Op::Upsample(self.id))
    }

    pub fn upsample2_adjoint(self) -> Var<'g> {
        self.unary(kernels::upsample2_adjoint(&self.value()), Op::UpsampleAdjoint(self.id))
    }

    pub fn concat_channels(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        let value = kernels::concat_channels(&self.value(), &other.value());
        self.unary(value, Op::Concat(self.id, other.id))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g> {
        let value = kernels::slice_channels(&self.value(), start, len);
        self.unary(value, Op::Slice { x: self.id, start })
    }

    pub fn pad_channels(self, start: usize, total: usize) -> Var<'g> {
        let value = kernels::pad_channels(&self.value(), start, total);
        self.unary(value, Op::Pad { x: self.id, start })
    }

    pub fn log_softmax_channels(self) -> Var<'g> {
        self.unary(kernels::log_softmax_channels(&self.value()), Op::LogSoftmax(self.id))
    }

    pub fn channel_sum_keep(self) -> Var<'g> {
        self.unary(kernels::channel_sum_keep(&self.value()), Op::ChannelSumKeep(self.id))
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        let value = self.value().add(&rhs.value());
        self.graph.push(value, Op::Add(self.id, rhs.id))
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        let value = self.value().sub(&rhs.value());
        self.graph.push(value, Op::Sub(self.id, rhs.id))
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        let value = self.value().mul(&rhs.value());
        self.graph.push(value, Op::Mul(self.id, rhs.id))
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_rule() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        // y = x^2 * exp(x)
        let y = (x * x) * x.exp();
        let [dx] = g.grad(y, &[x], false)[..] else { panic!() };
        let expected = (2.0 * 3.0 + 9.0) * 3f64.exp();
        assert!((dx.value().item() - expected).abs() < 1e-9);
        assert!(!dx.requires_grad());
    }

    #[test]
    fn second_derivative_of_cubic() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = x * x * x;
        let dx = g.grad(y, &[x], true)[0];
        assert!(dx.requires_grad());
        assert_eq!(dx.value().item(), 12.0);
        let ddx = g.grad(dx, &[x], false)[0];
        assert_eq!(ddx.value().item(), 12.0);
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let z = g.param(Tensor::new(&[2], vec![1.0, 2.0]));
        let y = x.scale(4.0);
        let grads = g.grad(y, &[x, z], false);
        assert_eq!(grads[0].value().item(), 4.0);
        assert_eq!(grads[1].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_do_not_record_ops() {
        let g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = a.exp() + a;
        assert!(!b.requires_grad());
        let p = g.param(Tensor::scalar(1.0));
        let inside = g.no_grad(|| (p * p).requires_grad());
        assert!(!inside);
    }

    #[test]
    fn gradient_accumulates_over_fan_out() {
        let g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let y = (x + x.scale(2.0) + x * x).sum();
        let dx = g.grad(y, &[x], false)[0].value();
        assert_eq!(dx.data(), &[5.0, -1.0, 4.0]);
    }
}
