//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op records its inputs and a backward rule. Backward rules are
//! written in terms of other recorded ops, so calling [`Graph::grad`] with
//! `create_graph = true` yields gradients that can be differentiated again
//! (the R1 penalty needs this through the discriminator). Instance
//! normalisation only provides a first-order rule; differentiating through
//! it twice panics.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::tensor::{self, cst, Element, ResamplePlan, Tensor};

type BackFn<E> = Rc<dyn for<'g> Fn(&[Var<'g, E>], Var<'g, E>, Var<'g, E>, &[bool]) -> Vec<Option<Var<'g, E>>>>;

struct Node<E> {
    value: Arc<Tensor<E>>,
    inputs: Vec<usize>,
    backward: Option<BackFn<E>>,
    requires_grad: bool,
    name: &'static str,
}

/// An append-only computation tape. Drop it to release every activation.
pub struct Graph<E> {
    nodes: RefCell<Vec<Node<E>>>,
    recording: Cell<bool>,
    /// Signs of the inputs of kinked ops (leaky ReLU, abs), when tracked.
    pattern: RefCell<Option<Vec<bool>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Graph`].
pub struct Var<'g, E> {
    graph: &'g Graph<E>,
    id: usize,
}

impl<E> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<E> Copy for Var<'_, E> {}

impl<E: Element> fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, n.name, n.value.shape())
    }
}

fn back<E, F>(f: F) -> BackFn<E>
where
    F: for<'g> Fn(&[Var<'g, E>], Var<'g, E>, Var<'g, E>, &[bool]) -> Vec<Option<Var<'g, E>>> + 'static,
{
    Rc::new(f)
}

fn first_order_only<E: Element>(name: &'static str) -> BackFn<E> {
    back(move |_, _, _, _| panic!("second-order gradient through `{name}` is not supported"))
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            pattern: RefCell::new(None),
        }
    }

    /// Starts recording which side of its kink every leaky ReLU / abs input
    /// falls on. Finite-difference checks use this to detect perturbations
    /// that cross a non-differentiable point.
    pub fn track_activation_pattern(&self) {
        *self.pattern.borrow_mut() = Some(Vec::new());
    }

    pub fn activation_pattern(&self) -> Option<Vec<bool>> {
        self.pattern.borrow().clone()
    }

    fn note_kinks(&self, x: &Tensor<E>) {
        if let Some(p) = self.pattern.borrow_mut().as_mut() {
            p.extend(x.data().iter().map(|&a| a > E::zero()));
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf holding `value`; gradients are tracked when `requires_grad`.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<E>>, requires_grad: bool) -> Var<'_, E> {
        self.push_node(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            name: "leaf",
        })
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, E> {
        self.constant(Tensor::scalar(cst(v)))
    }

    fn record<'g>(
        &'g self,
        name: &'static str,
        value: Tensor<E>,
        inputs: &[Var<'g, E>],
        backward: impl FnOnce() -> BackFn<E>,
    ) -> Var<'g, E> {
        let requires = self.recording.get() && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        if requires {
            self.push_node(Node {
                value: Arc::new(value),
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Some(backward()),
                requires_grad: true,
                name,
            })
        } else {
            self.push_node(Node {
                value: Arc::new(value),
                inputs: Vec::new(),
                backward: None,
                requires_grad: false,
                name,
            })
        }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves recorded and
    /// differentiable; otherwise they are constants. Entries are `None` when
    /// `output` does not depend on that input.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g, E>,
        wrt: &[Var<'g, E>],
        create_graph: bool,
    ) -> Vec<Option<Var<'g, E>>> {
        assert_eq!(output.value().numel(), 1, "grad() needs a scalar output");
        let n = output.id + 1;
        // Nodes that depend on at least one `wrt` input.
        let mut reach = vec![false; n];
        let mut wrt_slot = vec![usize::MAX; n];
        for (k, v) in wrt.iter().enumerate() {
            if v.id < n {
                reach[v.id] = true;
                wrt_slot[v.id] = k;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !reach[id] && nodes[id].requires_grad {
                    reach[id] = nodes[id].inputs.iter().any(|&i| reach[i]);
                }
            }
        }
        let mut result: Vec<Option<Var<'g, E>>> = vec![None; wrt.len()];
        if !reach[output.id] {
            return result;
        }
        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'g, E>>> = vec![None; n];
        let shape = output.shape();
        grads[output.id] = Some(self.constant(Tensor::full(&shape, E::one())));
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if wrt_slot[id] != usize::MAX {
                result[wrt_slot[id]] = Some(g);
            }
            let (inputs, bw, name) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                (node.inputs.clone(), node.backward.clone(), node.name)
            };
            let Some(bw) = bw else { continue };
            let needs: Vec<bool> = inputs.iter().map(|&i| reach[i]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let in_vars: Vec<Var<'g, E>> = inputs.iter().map(|&i| Var { graph: self, id: i }).collect();
            let out = Var { graph: self, id };
            let in_grads = bw(&in_vars, out, g, &needs);
            debug_assert_eq!(in_grads.len(), inputs.len(), "backward arity of {name}");
            for ((&i, gi), &need) in inputs.iter().zip(in_grads).zip(&needs) {
                let Some(gi) = gi else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    gi.shape(),
                    self.nodes.borrow()[i].value.shape(),
                    "gradient shape from {name}"
                );
                grads[i] = Some(match grads[i] {
                    Some(acc) => acc.add(gi),
                    None => gi,
                });
            }
        }
        self.recording.set(prev);
        result
    }

    /// Convenience: first-order gradients as plain tensors.
    pub fn grad_tensors<'g>(&'g self, output: Var<'g, E>, wrt: &[Var<'g, E>]) -> Vec<Option<Arc<Tensor<E>>>> {
        self.grad(output, wrt, false)
            .into_iter()
            .map(|g| g.map(|g| g.value()))
            .collect()
    }

    /// Runs `f` with recording disabled: every op yields a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let r = f();
        self.recording.set(prev);
        r
    }
}

// Graph ops take `self` by value and are chained, so they are methods rather than operator impls.
#[allow(clippy::should_implement_trait)]
impl<'g, E: Element> Var<'g, E> {
    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<E>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> E {
        self.value().item()
    }

    pub fn to_f64(&self) -> f64 {
        self.item().to_f64().unwrap()
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Self {
        let v = self.value();
        self.graph.leaf_arc(v, false)
    }

    fn constant_like(self, t: Tensor<E>) -> Self {
        self.graph.constant(t)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(self, o: Self) -> Self {
        let v = self.value().zip_map(&o.value(), |a, b| a + b);
        self.graph.record("add", v, &[self, o], || back(|_, _, g, _| vec![Some(g), Some(g)]))
    }

    pub fn sub(self, o: Self) -> Self {
        let v = self.value().zip_map(&o.value(), |a, b| a - b);
        self.graph
            .record("sub", v, &[self, o], || back(|_, _, g, _| vec![Some(g), Some(g.neg())]))
    }

    pub fn mul(self, o: Self) -> Self {
        let v = self.value().zip_map(&o.value(), |a, b| a * b);
        self.graph.record("mul", v, &[self, o], || {
            back(|i, _, g, n| vec![n[0].then(|| g.mul(i[1])), n[1].then(|| g.mul(i[0]))])
        })
    }

    pub fn neg(self) -> Self {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Self {
        let k = cst::<E>(c);
        let v = self.value().map(|a| a * k);
        self.graph
            .record("mul_scalar", v, &[self], || back(move |_, _, g, _| vec![Some(g.mul_scalar(c))]))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let k = cst::<E>(c);
        let v = self.value().map(|a| a + k);
        self.graph.record("add_scalar", v, &[self], || back(|_, _, g, _| vec![Some(g)]))
    }

    pub fn square(self) -> Self {
        self.mul(self)
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(|a| a.exp());
        self.graph
            .record("exp", v, &[self], || back(|_, o, g, _| vec![Some(g.mul(o))]))
    }

    pub fn ln(self) -> Self {
        let v = self.value().map(|a| a.ln());
        self.graph
            .record("ln", v, &[self], || back(|i, _, g, _| vec![Some(g.mul(i[0].recip()))]))
    }

    pub fn recip(self) -> Self {
        let v = self.value().map(|a| a.recip());
        self.graph.record("recip", v, &[self], || {
            back(|_, o, g, _| vec![Some(g.mul(o.square()).neg())])
        })
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(|a| a.sqrt());
        self.graph.record("sqrt", v, &[self], || {
            back(|_, o, g, _| vec![Some(g.mul(o.recip()).mul_scalar(0.5))])
        })
    }

    pub fn tanh(self) -> Self {
        let v = self.value().map(|a| a.tanh());
        self.graph.record("tanh", v, &[self], || {
            back(|_, o, g, _| {
                let one_minus = o.square().neg().add_scalar(1.0);
                vec![Some(g.mul(one_minus))]
            })
        })
    }

    pub fn sigmoid(self) -> Self {
        let v = self.value().map(sigmoid);
        self.graph.record("sigmoid", v, &[self], || {
            back(|_, o, g, _| vec![Some(g.mul(o).mul(o.neg().add_scalar(1.0)))])
        })
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Self {
        let v = self.value().map(softplus);
        self.graph
            .record("softplus", v, &[self], || back(|i, _, g, _| vec![Some(g.mul(i[0].sigmoid()))]))
    }

    pub fn abs(self) -> Self {
        let x = self.value();
        self.graph.note_kinks(&x);
        let v = x.map(|a| a.abs());
        self.graph.record("abs", v, &[self], || {
            back(|i, _, g, _| {
                let sign = i[0].value().map(|a| {
                    if a > E::zero() {
                        E::one()
                    } else if a < E::zero() {
                        -E::one()
                    } else {
                        E::zero()
                    }
                });
                vec![Some(g.mul_const(Arc::new(sign)))]
            })
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = cst::<E>(slope);
        let x = self.value();
        self.graph.note_kinks(&x);
        let v = x.map(|a| if a > E::zero() { a } else { a * s });
        self.graph.record("leaky_relu", v, &[self], || {
            back(move |i, _, g, _| {
                let s = cst::<E>(slope);
                let mask = i[0].value().map(|a| if a > E::zero() { E::one() } else { s });
                vec![Some(g.mul_const(Arc::new(mask)))]
            })
        })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: Arc<Tensor<E>>) -> Self {
        let v = self.value().zip_map(&c, |a, b| a * b);
        self.graph.record("mul_const", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.mul_const(c.clone()))])
        })
    }

    // ---- reductions and reshapes --------------------------------------

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        let shape = self.shape();
        self.graph.record("sum", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.expand_scalar(&shape))])
        })
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand_scalar(self, shape: &[usize]) -> Self {
        let v = Tensor::full(shape, self.item());
        self.graph
            .record("expand_scalar", v, &[self], || back(|_, _, g, _| vec![Some(g.sum())]))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let old = self.shape();
        if old == shape {
            return self;
        }
        let v = (*self.value()).clone().reshape(shape);
        self.graph.record("reshape", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.reshape(&old))])
        })
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap();
        let data: Vec<E> = x.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let v = Tensor::from_vec(&out_shape, data);
        self.graph.record("sum_last", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.expand_last(&shape))])
        })
    }

    /// Repeats each element along a new trailing axis to reach `shape`.
    pub fn expand_last(self, shape: &[usize]) -> Self {
        let d = *shape.last().unwrap();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &a in self.value().data() {
            data.extend(std::iter::repeat_n(a, d));
        }
        let v = Tensor::from_vec(shape, data);
        self.graph
            .record("expand_last", v, &[self], || back(|_, _, g, _| vec![Some(g.sum_last())]))
    }

    /// `op(a) * op(b)` for 2-D operands.
    pub fn matmul_t(self, o: Self, ta: bool, tb: bool) -> Self {
        let v = tensor::matmul(&self.value(), &o.value(), ta, tb);
        self.graph.record("matmul", v, &[self, o], move || {
            back(move |i, _, g, n| {
                let (a, b) = (i[0], i[1]);
                let da = n[0].then(|| if ta { b.matmul_t(g, tb, true) } else { g.matmul_t(b, false, !tb) });
                let db = n[1].then(|| if tb { g.matmul_t(a, true, ta) } else { a.matmul_t(g, !ta, false) });
                vec![da, db]
            })
        })
    }

    pub fn matmul(self, o: Self) -> Self {
        self.matmul_t(o, false, false)
    }

    /// Adds `b[C]` along axis 1 of `x[B, C, ...]`.
    pub fn add_bias(self, b: Self) -> Self {
        let x = self.value();
        let bv = b.value();
        let shape = x.shape().to_vec();
        let c = shape[1];
        assert_eq!(bv.numel(), c, "bias length {} for input {:?}", bv.numel(), shape);
        let inner: usize = shape[2..].iter().product();
        let mut v = (*x).clone();
        for (k, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let bb = bv.data()[k % c];
            for a in chunk {
                *a += bb;
            }
        }
        self.graph.record("add_bias", v, &[self, b], || {
            back(|_, _, g, n| vec![n[0].then_some(g), n[1].then(|| g.sum_bias())])
        })
    }

    /// Sums `x[B, C, ...]` down to `[C]`.
    pub fn sum_bias(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = vec![E::zero(); c];
        for (k, chunk) in x.data().chunks(inner).enumerate() {
            data[k % c] += chunk.iter().copied().sum::<E>();
        }
        let v = Tensor::from_vec(&[c], data);
        self.graph.record("sum_bias", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.expand_bias(&shape))])
        })
    }

    /// Broadcasts `[C]` to `shape = [B, C, ...]`.
    pub fn expand_bias(self, shape: &[usize]) -> Self {
        let bv = self.value();
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for k in 0..n / inner {
            data.extend(std::iter::repeat_n(bv.data()[k % c], inner));
        }
        let v = Tensor::from_vec(shape, data);
        self.graph
            .record("expand_bias", v, &[self], || back(|_, _, g, _| vec![Some(g.sum_bias())]))
    }

    // ---- convolution ----------------------------------------------------

    pub fn conv2d(self, w: Self, pad: (usize, usize)) -> Self {
        let v = tensor::conv2d(&self.value(), &w.value(), pad);
        self.graph.record("conv2d", v, &[self, w], move || {
            back(move |i, _, g, n| {
                let (x, w) = (i[0], i[1]);
                vec![
                    n[0].then(|| g.conv2d_input_grad(w, &x.shape(), pad)),
                    n[1].then(|| x.conv2d_weight_grad(g, &w.shape(), pad)),
                ]
            })
        })
    }

    /// `self` is an output gradient; returns the matching input gradient.
    pub fn conv2d_input_grad(self, w: Self, x_shape: &[usize], pad: (usize, usize)) -> Self {
        let v = tensor::conv2d_input_grad(&self.value(), &w.value(), x_shape, pad);
        self.graph.record("conv2d_input_grad", v, &[self, w], move || {
            back(move |i, _, g, n| {
                let (gy, w) = (i[0], i[1]);
                vec![
                    n[0].then(|| g.conv2d(w, pad)),
                    n[1].then(|| g.conv2d_weight_grad(gy, &w.shape(), pad)),
                ]
            })
        })
    }

    /// `self` is the conv input, `gy` the output gradient; returns the weight gradient.
    pub fn conv2d_weight_grad(self, gy: Self, w_shape: &[usize], pad: (usize, usize)) -> Self {
        let v = tensor::conv2d_weight_grad(&self.value(), &gy.value(), w_shape, pad);
        self.graph.record("conv2d_weight_grad", v, &[self, gy], move || {
            back(move |i, _, g, n| {
                let (x, gy) = (i[0], i[1]);
                vec![
                    n[0].then(|| gy.conv2d_input_grad(g, &x.shape(), pad)),
                    n[1].then(|| x.conv2d(g, pad)),
                ]
            })
        })
    }

    // ---- resampling -----------------------------------------------------

    pub fn avg_pool2(self) -> Self {
        let shape = self.shape();
        let v = tensor::avg_pool2(&self.value());
        self.graph.record("avg_pool2", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.upsample2_to(shape[2], shape[3]).mul_scalar(0.25))])
        })
    }

    pub fn upsample2(self) -> Self {
        let s = self.shape();
        self.upsample2_to(2 * s[2], 2 * s[3])
    }

    pub fn upsample2_to(self, out_h: usize, out_w: usize) -> Self {
        let s = self.shape();
        let v = tensor::upsample2(&self.value(), out_h, out_w);
        self.graph.record("upsample2", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.sum_pool2(s[2], s[3]))])
        })
    }

    fn sum_pool2(self, h: usize, w: usize) -> Self {
        let s = self.shape();
        let v = tensor::sum_pool2(&self.value(), h, w);
        self.graph.record("sum_pool2", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.upsample2_to(s[2], s[3]))])
        })
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn spatial_mean(self) -> Self {
        let s = self.shape();
        let v = tensor::spatial_mean(&self.value());
        self.graph.record("spatial_mean", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.spatial_expand(s[2], s[3]).mul_scalar(1.0 / (s[2] * s[3]) as f64))])
        })
    }

    pub fn spatial_expand(self, h: usize, w: usize) -> Self {
        let v = tensor::spatial_expand(&self.value(), h, w);
        self.graph.record("spatial_expand", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.spatial_mean().mul_scalar((h * w) as f64))])
        })
    }

    // ---- normalisation --------------------------------------------------

    pub fn instance_norm(self, eps: f64) -> Self {
        let (xhat, inv_std) = tensor::instance_norm(&self.value(), eps);
        let inv_std = Rc::new(inv_std);
        self.graph.record("instance_norm", xhat, &[self], move || {
            back(move |_, o, g, _| {
                let gx = tensor::instance_norm_backward(&o.value(), &inv_std, &g.value());
                let graph = g.graph;
                vec![Some(graph.record("instance_norm_backward", gx, &[g, o], || {
                    first_order_only("instance_norm")
                }))]
            })
        })
    }

    /// Per-(sample, channel) affine modulation: `x * scale[b,c] + shift[b,c]`.
    pub fn modulate(self, scale: Self, shift: Self) -> Self {
        let x = self.value();
        let (sc, sh) = (scale.value(), shift.value());
        let s = x.shape().to_vec();
        let hw = s[2] * s[3];
        assert_eq!(sc.shape(), &s[..2], "modulation scale shape");
        assert_eq!(sh.shape(), &s[..2], "modulation shift shape");
        let mut v = (*x).clone();
        for (k, p) in v.data_mut().chunks_mut(hw).enumerate() {
            let (a, b) = (sc.data()[k], sh.data()[k]);
            for e in p {
                *e = *e * a + b;
            }
        }
        self.graph.record("modulate", v, &[self, scale, shift], move || {
            back(move |i, _, g, n| {
                let hw = (s[2] * s[3]) as f64;
                vec![
                    n[0].then(|| g.mul(i[1].spatial_expand(s[2], s[3]))),
                    n[1].then(|| g.mul(i[0]).spatial_mean().mul_scalar(hw)),
                    n[2].then(|| g.spatial_mean().mul_scalar(hw)),
                ]
            })
        })
    }

    // ---- indexing -------------------------------------------------------

    /// Concatenates 2-D tensors along the last axis.
    pub fn concat_last(parts: &[Self]) -> Self {
        let graph = parts[0].graph;
        let rows = parts[0].shape()[0];
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::from_vec(&[rows, total], data);
        graph.record("concat_last", v, parts, move || {
            back(move |_, _, g, n| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(n)
                    .map(|(&w, &need)| {
                        let r = need.then(|| g.narrow_last(off, w));
                        off += w;
                        r
                    })
                    .collect()
            })
        })
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn narrow_last(self, start: usize, len: usize) -> Self {
        let s = self.shape();
        let (rows, total) = (s[0], s[1]);
        let x = self.value();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * total + start..r * total + start + len]);
        }
        let v = Tensor::from_vec(&[rows, len], data);
        self.graph.record("narrow_last", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.pad_last(start, total))])
        })
    }

    fn pad_last(self, start: usize, total: usize) -> Self {
        let s = self.shape();
        let (rows, len) = (s[0], s[1]);
        let x = self.value();
        let mut v = Tensor::zeros(&[rows, total]);
        for r in 0..rows {
            v.data_mut()[r * total + start..r * total + start + len]
                .copy_from_slice(&x.data()[r * len..(r + 1) * len]);
        }
        self.graph.record("pad_last", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.narrow_last(start, len))])
        })
    }

    /// Gathers rows (axis 0) by index; rows may repeat.
    pub fn index_rows(self, idx: &[usize]) -> Self {
        let s = self.shape();
        let inner: usize = s[1..].iter().product();
        let x = self.value();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut os = s.clone();
        os[0] = idx.len();
        let v = Tensor::from_vec(&os, data);
        let idx = Rc::new(idx.to_vec());
        let n = s[0];
        self.graph.record("index_rows", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.scatter_rows(idx.clone(), n))])
        })
    }

    fn scatter_rows(self, idx: Rc<Vec<usize>>, n: usize) -> Self {
        let s = self.shape();
        let inner: usize = s[1..].iter().product();
        let x = self.value();
        let mut os = s.clone();
        os[0] = n;
        let mut v = Tensor::zeros(&os);
        for (r, &i) in idx.iter().enumerate() {
            for (d, &a) in v.data_mut()[i * inner..(i + 1) * inner]
                .iter_mut()
                .zip(&x.data()[r * inner..(r + 1) * inner])
            {
                *d += a;
            }
        }
        self.graph.record("scatter_rows", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.index_rows(&idx))])
        })
    }

    /// Stacks tensors along axis 0.
    pub fn concat_rows(parts: &[Self]) -> Self {
        let graph = parts[0].graph;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let mut os = shapes[0].clone();
        os[0] = shapes.iter().map(|s| s[0]).sum();
        let mut data = Vec::with_capacity(os.iter().product());
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let v = Tensor::from_vec(&os, data);
        let counts: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
        graph.record("concat_rows", v, parts, move || {
            back(move |_, _, g, n| {
                let mut off = 0;
                counts
                    .iter()
                    .zip(n)
                    .map(|(&c, &need)| {
                        let idx: Vec<usize> = (off..off + c).collect();
                        off += c;
                        need.then(|| g.index_rows(&idx))
                    })
                    .collect()
            })
        })
    }

    /// For `q[n, d]`, rows `q_i - q_j` for every pair `i < j` in row-major pair order.
    pub fn pairwise_diff(self) -> Self {
        let s = self.shape();
        let (n, d) = (s[0], s[1]);
        let q = self.value();
        let mut data = Vec::with_capacity(n * (n - 1) / 2 * d);
        for i in 0..n {
            for j in i + 1..n {
                for k in 0..d {
                    data.push(q.data()[i * d + k] - q.data()[j * d + k]);
                }
            }
        }
        let v = Tensor::from_vec(&[n * (n - 1) / 2, d], data);
        self.graph.record("pairwise_diff", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.pairwise_diff_adjoint(n))])
        })
    }

    fn pairwise_diff_adjoint(self, n: usize) -> Self {
        let s = self.shape();
        let d = s[1];
        let gv = self.value();
        let mut v = Tensor::zeros(&[n, d]);
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                for k in 0..d {
                    let a = gv.data()[p * d + k];
                    v.data_mut()[i * d + k] += a;
                    v.data_mut()[j * d + k] -= a;
                }
                p += 1;
            }
        }
        self.graph.record("pairwise_diff_adjoint", v, &[self], || {
            back(|_, _, g, _| vec![Some(g.pairwise_diff())])
        })
    }

    /// Places pair values (order of [`Var::pairwise_diff`]) into a symmetric
    /// `[n, n]` matrix with a zero diagonal.
    pub fn symmetric_fill(self, n: usize) -> Self {
        let vals = self.value();
        assert_eq!(vals.numel(), n * (n - 1) / 2, "pair count for n = {n}");
        let mut v = Tensor::zeros(&[n, n]);
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                let a = vals.data()[p];
                v.data_mut()[i * n + j] = a;
                v.data_mut()[j * n + i] = a;
                p += 1;
            }
        }
        let in_shape = vals.shape().to_vec();
        self.graph.record("symmetric_fill", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.symmetric_gather(&in_shape))])
        })
    }

    fn symmetric_gather(self, out_shape: &[usize]) -> Self {
        let n = self.shape()[0];
        let gv = self.value();
        let mut data = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                data.push(gv.data()[i * n + j] + gv.data()[j * n + i]);
            }
        }
        let v = Tensor::from_vec(out_shape, data);
        self.graph.record("symmetric_gather", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.reshape(&[n * (n - 1) / 2]).symmetric_fill(n))])
        })
    }

    /// Row-wise softmax over the last axis of a 2-D tensor.
    pub fn softmax_last(self) -> Self {
        let x = self.value();
        let d = x.dim(x.shape().len() - 1);
        let shift = {
            let mut t = Tensor::zeros(x.shape());
            for (row, out) in x.data().chunks(d).zip(t.data_mut().chunks_mut(d)) {
                let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                out.fill(m);
            }
            t
        };
        // The shift is a constant: softmax is invariant to it, so gradients stay exact.
        let e = self.sub(self.constant_like(shift)).exp();
        let s = e.sum_last().recip();
        e.mul(s.expand_last(x.shape()))
    }

    /// Scales each row of a 2-D tensor to unit L2 norm (`eps` guards zero rows).
    pub fn l2_normalize_rows(self, eps: f64) -> Self {
        let shape = self.shape();
        let norm = self.square().sum_last().add_scalar(eps).sqrt();
        self.mul(norm.recip().expand_last(&shape))
    }

    // ---- resampling plans -------------------------------------------------

    pub fn resample(self, plan: Arc<ResamplePlan>) -> Self {
        let v = tensor::resample(&self.value(), &plan);
        self.graph.record("resample", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.resample_adjoint(plan.clone()))])
        })
    }

    fn resample_adjoint(self, plan: Arc<ResamplePlan>) -> Self {
        let v = tensor::resample_transpose(&self.value(), &plan);
        self.graph.record("resample_adjoint", v, &[self], move || {
            back(move |_, _, g, _| vec![Some(g.resample(plan.clone()))])
        })
    }
}

pub(crate) fn sigmoid<E: Element>(a: E) -> E {
    if a >= E::zero() {
        E::one() / (E::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn softplus<E: Element>(a: E) -> E {
    a.max(E::zero()) + (-a.abs()).exp().ln_1p()
}

/// Central-difference gradient verification.
pub mod gradcheck {
    use super::*;

    /// Norm-wise relative error `|a - n| / max(|a|, |n|)` with a tiny floor.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom < 1e-12 {
            diff
        } else {
            diff / denom
        }
    }

    /// Outcome of a finite-difference comparison for one input.
    #[derive(Clone, Copy, Debug, PartialEq)]
    pub struct Comparison {
        /// Norm-wise relative error over the compared coordinates.
        pub error: f64,
        pub compared: usize,
        /// Coordinates whose `±h` evaluations fell on different sides of a
        /// leaky-ReLU / abs kink; finite differences are meaningless there.
        pub skipped: usize,
    }

    /// Evaluates `f` on a fresh graph that tracks kink crossings.
    pub fn eval_tracked<F>(inputs: &[Tensor<f64>], f: &F) -> (f64, Vec<bool>)
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        let g = Graph::new();
        g.track_activation_pattern();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let v = f(&g, &vars).to_f64();
        (v, g.activation_pattern().unwrap_or_default())
    }

    /// Compares the analytic gradient of the scalar function `f` against
    /// central differences with step `h` for every input coordinate.
    pub fn compare<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Vec<Comparison>
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        let analytic: Vec<Vec<f64>> = {
            let g = Graph::new();
            let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = f(&g, &vars);
            g.grad(out, &vars, false)
                .into_iter()
                .zip(inputs)
                .map(|(gr, t)| match gr {
                    Some(v) => v.value().to_f64_vec(),
                    None => vec![0.0; t.numel()],
                })
                .collect()
        };
        let mut out = Vec::with_capacity(inputs.len());
        for (k, a) in analytic.iter().enumerate() {
            let (mut an, mut nu) = (Vec::new(), Vec::new());
            let mut skipped = 0;
            let mut ins = inputs.to_vec();
            #[allow(clippy::needless_range_loop)]
            for e in 0..inputs[k].numel() {
                let orig = ins[k].data()[e];
                ins[k].data_mut()[e] = orig + h;
                let (fp, pp) = eval_tracked(&ins, &f);
                ins[k].data_mut()[e] = orig - h;
                let (fm, pm) = eval_tracked(&ins, &f);
                ins[k].data_mut()[e] = orig;
                if pp != pm {
                    skipped += 1;
                    continue;
                }
                an.push(a[e]);
                nu.push((fp - fm) / (2.0 * h));
            }
            out.push(Comparison {
                error: relative_error(&an, &nu),
                compared: an.len(),
                skipped,
            });
        }
        out
    }

    /// Relative error per input (see [`compare`]).
    pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Vec<f64>
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        compare(inputs, h, f).into_iter().map(|c| c.error).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[3, 4]).map(|v| v.abs() + 0.5);
        let errs = check(&[a, b], H, |_, v| {
            let (x, y) = (v[0], v[1]);
            x.mul(y)
                .add(x.tanh())
                .sub(y.ln())
                .add(x.sigmoid().mul(y.sqrt()))
                .add(x.softplus())
                .add(x.leaky_relu(0.2).mul(y.recip()))
                .add(x.exp().mul_scalar(0.3))
                .sum()
        });
        for e in errs {
            assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn conv_pool_upsample_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[2, 2, 4, 4]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3]);
        let b = rand_t(&mut rng, &[3]);
        let errs = check(&[x, w, b], H, |_, v| {
            let y = v[0].conv2d(v[1], (1, 1)).add_bias(v[2]).leaky_relu(0.2);
            let p = y.avg_pool2().upsample2().spatial_mean();
            p.square().sum().add(y.instance_norm(1e-5).mul(y).sum())
        });
        for e in errs {
            assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn modulate_and_indexing_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[2, 3, 2, 2]);
        let s = rand_t(&mut rng, &[2, 3]);
        let t = rand_t(&mut rng, &[2, 3]);
        let errs = check(&[x, s, t], H, |_, v| {
            let y = v[0].modulate(v[1], v[2]);
            let flat = y.reshape(&[2, 12]);
            let c = Var::concat_last(&[flat, v[1]]);
            let r = Var::concat_rows(&[c.index_rows(&[1, 0, 1]), c]);
            r.narrow_last(2, 9).softmax_last().square().sum().add(r.l2_normalize_rows(1e-12).sum())
        });
        for e in errs {
            assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn graph_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_t(&mut rng, &[4, 3]);
        let w = rand_t(&mut rng, &[3, 1]);
        let errs = check(&[q, w], H, |_, v| {
            let d = v[0].pairwise_diff().abs();
            let a = d.matmul(v[1]).sigmoid().reshape(&[6]).symmetric_fill(4);
            a.matmul(v[0]).matmul_t(v[0], false, true).square().sum()
        });
        for e in errs {
            assert!(e < TOL, "{e}");
        }
    }

    #[test]
    fn second_order_through_conv_matches_finite_differences() {
        // R(w) = |d/dx sum(lrelu(conv(x, w)) * c)|^2; its gradient in w needs double backprop.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[1, 2, 4, 4]);
        let w = rand_t(&mut rng, &[2, 2, 3, 3]);
        let c = rand_t(&mut rng, &[1, 2, 2, 2]);
        let errs = check(&[x, w, c], H, |g, v| {
            let x = g.leaf(v[0].value().as_ref().clone(), true);
            let y = x.conv2d(v[1], (1, 1)).leaky_relu(0.2).avg_pool2().mul(v[2]).sum();
            let gx = g.grad(y, &[x], true)[0].unwrap();
            gx.square().sum()
        });
        // Only the weight and the probe matter; x is re-leafed inside.
        assert!(errs[1] < TOL, "{:?}", errs);
        assert!(errs[2] < TOL, "{:?}", errs);
    }

    #[test]
    fn no_grad_records_constants() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let y = g.no_grad(|| x.mul_scalar(2.0));
        assert!(!y.requires_grad());
        assert!(g.grad(y.sum(), &[x], false)[0].is_none());
    }

    #[test]
    fn softplus_is_stable_for_large_logits() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
