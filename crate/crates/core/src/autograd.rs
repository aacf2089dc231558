//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation on a [`Var`] computes its value
//! eagerly and appends a node holding the value plus a closure that maps the
//! output gradient to input gradients. [`Graph::backward`] walks the tape in
//! reverse creation order, which is a valid topological order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// What a backward closure sees for one node.
pub(crate) struct Ctx<'a> {
    pub grad: &'a Tensor,
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&Ctx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape for inference only: values are kept, adjoints are dropped.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        leaf_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && (leaf_grad || parents.iter().any(|&p| nodes[p].requires_grad));
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Vec::new(), None, false)
    }

    /// A trainable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Vec::new(), None, true)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let ctx = Ctx {
                grad: g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect(),
                needs,
            };
            let parent_grads = bw(&ctx);
            for (k, pg) in parent_grads.into_iter().enumerate() {
                let Some(pg) = pg else { continue };
                let p = node.parents[k];
                if !nodes[p].requires_grad {
                    continue;
                }
                grads[p] = Some(match grads[p].take() {
                    None => pg,
                    Some(acc) => acc.zip_map(&pg, |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

fn unary<'g>(
    x: Var<'g>,
    value: Tensor,
    backward: impl Fn(&Ctx) -> Tensor + 'static,
) -> Var<'g> {
    x.graph.push(
        value,
        vec![x.id],
        Some(Box::new(move |ctx: &Ctx| vec![Some(backward(ctx))])),
        false,
    )
}

fn binary<'g>(
    a: Var<'g>,
    b: Var<'g>,
    value: Tensor,
    backward: impl Fn(&Ctx) -> Vec<Option<Tensor>> + 'static,
) -> Var<'g> {
    debug_assert!(std::ptr::eq(a.graph, b.graph));
    a.graph
        .push(value, vec![a.id, b.id], Some(Box::new(backward)), false)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    // -- elementwise, with broadcasting ------------------------------------

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        let out = tensor::broadcast_zip(&av, &bv, |a, b| a + b)?;
        Ok(binary(self, other, out, |ctx| {
            vec![
                ctx.needs[0].then(|| tensor::sum_to(ctx.grad, ctx.inputs[0].shape()).unwrap()),
                ctx.needs[1].then(|| tensor::sum_to(ctx.grad, ctx.inputs[1].shape()).unwrap()),
            ]
        }))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        let out = tensor::broadcast_zip(&av, &bv, |a, b| a - b)?;
        Ok(binary(self, other, out, |ctx| {
            vec![
                ctx.needs[0].then(|| tensor::sum_to(ctx.grad, ctx.inputs[0].shape()).unwrap()),
                ctx.needs[1].then(|| {
                    tensor::sum_to(&ctx.grad.map(|g| -g), ctx.inputs[1].shape()).unwrap()
                }),
            ]
        }))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        let out = tensor::broadcast_zip(&av, &bv, |a, b| a * b)?;
        Ok(binary(self, other, out, |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| {
                    let t = tensor::broadcast_zip(ctx.grad, b, |g, y| g * y).unwrap();
                    tensor::sum_to(&t, a.shape()).unwrap()
                }),
                ctx.needs[1].then(|| {
                    let t = tensor::broadcast_zip(ctx.grad, a, |g, x| g * x).unwrap();
                    tensor::sum_to(&t, b.shape()).unwrap()
                }),
            ]
        }))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        let out = tensor::broadcast_zip(&av, &bv, |a, b| a / b)?;
        Ok(binary(self, other, out, |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| {
                    let t = tensor::broadcast_zip(ctx.grad, b, |g, y| g / y).unwrap();
                    tensor::sum_to(&t, a.shape()).unwrap()
                }),
                ctx.needs[1].then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let gq = ctx.grad.zip_map(ctx.out, |g, q| -g * q).unwrap();
                    let t = tensor::broadcast_zip(&gq, b, |v, y| v / y).unwrap();
                    tensor::sum_to(&t, b.shape()).unwrap()
                }),
            ]
        }))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        unary(self, out, move |ctx| ctx.grad.map(|g| g * s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        unary(self, out, |ctx| ctx.grad.clone())
    }

    pub fn square(self) -> Var<'g> {
        let out = self.value().map(|v| v * v);
        unary(self, out, |ctx| ctx.grad.zip_map(ctx.inputs[0], |g, x| 2.0 * g * x).unwrap())
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(self) -> Var<'g> {
        let out = self.value().map(f64::abs);
        unary(self, out, |ctx| {
            ctx.grad
                .zip_map(ctx.inputs[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .unwrap()
        })
    }

    pub fn gelu(self) -> Var<'g> {
        let out = tensor::gelu(&self.value());
        unary(self, out, |ctx| {
            ctx.grad
                .zip_map(ctx.inputs[0], |g, x| g * tensor::gelu_grad_scalar(x))
                .unwrap()
        })
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        unary(self, out, |ctx| {
            let g = ctx.grad.data()[0];
            Tensor::full(ctx.inputs[0].shape(), g)
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), other.value());
        let out = tensor::matmul(&av, &bv)?;
        Ok(binary(self, other, out, matmul_backward))
    }

    /// `x @ weight + bias` over the last axis.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.matmul(weight)?.add(bias)
    }

    // -- shape -------------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(unary(self, out, |ctx| {
            ctx.grad.clone().with_shape(ctx.inputs[0].shape())
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let out = self.value().permute(axes)?;
        let inv = tensor::invert_axes(axes);
        Ok(unary(self, out, move |ctx| ctx.grad.permute(&inv).unwrap()))
    }

    /// Swap two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g>> {
        let mut axes: Vec<usize> = (0..self.value().rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::invalid("transpose", format!("axes {a},{b} of rank {}", axes.len())));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let out = tensor::narrow(&self.value(), axis, start, len)?;
        Ok(unary(self, out, move |ctx| {
            tensor::narrow_backward(ctx.grad, ctx.inputs[0].shape(), axis, start)
        }))
    }

    /// Rows of a 2-D table; see [`tensor::gather_rows`].
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Result<Var<'g>> {
        let out = tensor::gather_rows(&self.value(), &index)?;
        Ok(unary(self, out, move |ctx| {
            tensor::scatter_rows(ctx.grad, &index, ctx.inputs[0].shape()[0])
        }))
    }

    // -- neural-network primitives ------------------------------------------

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let out = tensor::softmax(&self.value(), axis)?;
        Ok(unary(self, out, move |ctx| {
            tensor::softmax_backward(ctx.out, ctx.grad, axis)
        }))
    }

    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (out, cache) =
            tensor::layer_norm_cached(&self.value(), &gamma.value(), &beta.value(), eps)?;
        let g = self.graph;
        Ok(g.push(
            out,
            vec![self.id, gamma.id, beta.id],
            Some(Box::new(move |ctx: &Ctx| {
                let (dx, dg, db) = tensor::layer_norm_backward(&cache, ctx.inputs[1], ctx.grad);
                vec![Some(dx), Some(dg), Some(db)]
            })),
            false,
        ))
    }

    pub fn roll2d(self, dy: isize, dx: isize) -> Result<Var<'g>> {
        let out = tensor::roll2d(&self.value(), dy, dx)?;
        Ok(unary(self, out, move |ctx| tensor::roll2d(ctx.grad, -dy, -dx).unwrap()))
    }

    pub fn im2col3x3(self) -> Result<Var<'g>> {
        let out = tensor::im2col3x3(&self.value())?;
        Ok(unary(self, out, |ctx| {
            tensor::col2im3x3(ctx.grad, ctx.inputs[0].shape()[3])
        }))
    }

    /// 3x3 same-padded convolution on `[b, h, w, c_in]` with weight
    /// `[9 * c_in, c_out]` and bias `[c_out]`.
    pub fn conv3x3(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.im2col3x3()?.linear(weight, bias)
    }

    pub fn blur_valid(self, kernel: Rc<Vec<f64>>) -> Result<Var<'g>> {
        let out = tensor::blur_valid(&self.value(), &kernel)?;
        Ok(unary(self, out, move |ctx| {
            let s = ctx.inputs[0].shape();
            tensor::blur_valid_adjoint(ctx.grad, &kernel, s[1], s[2])
        }))
    }
}

fn matmul_backward(ctx: &Ctx) -> Vec<Option<Tensor>> {
    let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let p = bsh[bsh.len() - 1];
    if bsh.len() == 2 {
        let rows = a.len() / k;
        let ga = ctx.needs[0].then(|| {
            let d = tensor::bmm(g.data(), b.data(), 1, rows, p, k, false, true);
            Tensor::new(ash, d).unwrap()
        });
        let gb = ctx.needs[1].then(|| {
            let d = tensor::bmm(a.data(), g.data(), 1, k, rows, p, true, false);
            Tensor::new(bsh, d).unwrap()
        });
        return vec![ga, gb];
    }
    let batch = &g.shape()[..g.rank() - 2];
    let nb: usize = batch.iter().product();
    let ga = ctx.needs[0].then(|| {
        let bf = tensor::broadcast_to(b, &[batch, &[k, p]].concat()).unwrap();
        let d = tensor::bmm(g.data(), bf.data(), nb, m, p, k, false, true);
        let full = Tensor::new(&[batch, &[m, k]].concat(), d).unwrap();
        tensor::sum_to(&full, ash).unwrap()
    });
    let gb = ctx.needs[1].then(|| {
        let af = tensor::broadcast_to(a, &[batch, &[m, k]].concat()).unwrap();
        let d = tensor::bmm(af.data(), g.data(), nb, k, m, p, true, false);
        let full = Tensor::new(&[batch, &[k, p]].concat(), d).unwrap();
        tensor::sum_to(&full, bsh).unwrap()
    });
    vec![ga, gb]
}
