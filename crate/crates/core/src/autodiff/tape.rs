use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rustfft::num_complex::Complex64;

use super::conv;
use super::fft::{fft_last_axis, ifft_last_axis};
use super::tensor::{ComplexTensor, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
enum Value {
    Real(Tensor),
    Complex(ComplexTensor),
}

impl Value {
    fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(t) => t.shape(),
        }
    }

    fn real(&self) -> &Tensor {
        match self {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("expected a real tensor, found a complex one"),
        }
    }

    fn complex(&self) -> &ComplexTensor {
        match self {
            Value::Complex(t) => t,
            Value::Real(_) => panic!("expected a complex tensor, found a real one"),
        }
    }

    fn accumulate(&mut self, other: Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            (Value::Complex(a), Value::Complex(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            _ => panic!("gradient kind mismatch"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sigmoid,
    Relu,
    Tanh,
    Sin,
    Cos,
    Sqrt,
    Square,
    Abs,
}

type CustomBackward = Rc<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine(usize, f64),
    Unary(usize, Unary),
    MatMul(usize, usize),
    MixChannels(usize, usize),
    Conv1d { x: usize, w: usize, pad_left: usize },
    MaxPool1d { x: usize, argmax: Rc<Vec<usize>> },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    Softmax(usize),
    LogSoftmax(usize),
    Reshape(usize),
    Broadcast(usize),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    IndexSelect { x: usize, indices: Rc<Vec<usize>> },
    GatherChannels { x: usize, index: Rc<Vec<usize>> },
    ReverseLast(usize),
    StraightThrough(usize),
    Custom { inputs: Vec<usize>, backward: CustomBackward },
    ToComplex(usize),
    Complex(usize, usize),
    Re(usize),
    Im(usize),
    CAbs(usize),
    CMul(usize, usize),
    Fft(usize),
    Ifft(usize),
}

struct Node {
    value: Rc<Value>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of one forward evaluation.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("len", &self.len())
            .finish()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("tape", &self.tape.id)
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    tape_id: u64,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient for a leaf of the tape that produced these gradients.
    pub fn get(&self, leaf: Var<'_>) -> Result<Tensor> {
        if leaf.tape.id != self.tape_id {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        self.leaves
            .iter()
            .find(|(id, _)| *id == leaf.id)
            .map(|(_, g)| g.clone())
            .ok_or_else(|| Error::contract("variable is not a gradient-bearing leaf"))
    }

    /// Panicking form of [`Gradients::get`].
    pub fn wrt(&self, leaf: Var<'_>) -> Tensor {
        self.get(leaf).expect("gradient lookup")
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) {
    assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
}

/// Split `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("operation needs at least one axis")
}

/// Maps each output element to its source element under right-aligned broadcasting.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    assert!(src.len() <= dst.len(), "cannot broadcast {src:?} to {dst:?}");
    let offset = dst.len() - src.len();
    let mut src_strides = vec![0usize; dst.len()];
    let mut stride = 1;
    for d in (0..src.len()).rev() {
        let s = src[d];
        let t = dst[d + offset];
        assert!(s == t || s == 1, "cannot broadcast {src:?} to {dst:?}");
        src_strides[d + offset] = if s == 1 { 0 } else { stride };
        stride *= s;
    }
    let n: usize = dst.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            pos += src_strides[d];
            if idx[d] < dst[d] {
                break;
            }
            pos -= src_strides[d] * dst[d];
            idx[d] = 0;
        }
    }
    map
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Unary::Relu => x.max(0.0),
        Unary::Tanh => x.tanh(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
    }
}

fn unary_backward(kind: Unary, x: f64, y: f64, g: f64) -> f64 {
    match kind {
        Unary::Neg => -g,
        Unary::Exp => g * y,
        Unary::Ln => g / x,
        Unary::Sigmoid => g * y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                g
            } else {
                0.0
            }
        }
        Unary::Tanh => g * (1.0 - y * y),
        Unary::Sin => g * x.cos(),
        Unary::Cos => -g * x.sin(),
        Unary::Sqrt => g / (2.0 * y),
        Unary::Square => 2.0 * x * g,
        Unary::Abs => g * x.signum() * if x == 0.0 { 0.0 } else { 1.0 },
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Value, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Value> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A gradient-bearing leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(Value::Real(t), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(Value::Real(t), Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn complex_constant(&self, t: ComplexTensor) -> Var<'_> {
        self.push(Value::Complex(t), Op::Leaf, false)
    }

    fn check(&self, v: Var<'_>) {
        assert_eq!(v.tape.id, self.id, "variable used on a foreign tape");
    }

    fn derived(&self, value: Value, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = inputs.iter().any(|&i| self.needs(i));
        self.push(value, op, rg)
    }

    /// Registers an externally computed real node with a caller-supplied adjoint.
    ///
    /// `backward(upstream, input_values)` must return one gradient per input,
    /// each with its input's shape.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        for v in inputs {
            self.check(*v);
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.derived(
            Value::Real(output),
            Op::Custom {
                inputs: ids.clone(),
                backward: Rc::new(backward),
            },
            &ids,
        )
    }

    /// Applies `f` elementwise with derivative `df(x, y)`.
    pub fn elementwise<'t>(
        &'t self,
        x: Var<'t>,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let xv = x.tensor();
        let y = xv.map(f);
        let y_saved = y.clone();
        self.custom(&[x], y, move |g, ins| {
            let xs = ins[0].data();
            let data = g
                .data()
                .iter()
                .zip(xs)
                .zip(y_saved.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Tensor::from_parts(g.shape().to_vec(), data)]
        })
    }

    /// Reverse pass from a scalar root with unit seed.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.backward_with_seed(root, 1.0)
    }

    /// Reverse pass from a scalar root, seeding its adjoint with `seed`.
    pub fn backward_with_seed(&self, root: Var<'_>, seed: f64) -> Result<Gradients> {
        if root.tape.id != self.id {
            return Err(Error::contract("root was produced by a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        let root_val = match &*root_node.value {
            Value::Real(t) => t,
            Value::Complex(_) => return Err(Error::contract("backward root must be real")),
        };
        if root_val.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Value>> = vec![None; root.id + 1];
        if root_node.requires_grad {
            grads[root.id] = Some(Value::Real(Tensor::full(root_val.shape(), seed)));
        }
        let mut leaves = Vec::new();
        for i in (0..=root.id).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    let g = match grads[i].take() {
                        Some(Value::Real(t)) => t,
                        Some(Value::Complex(_)) => unreachable!("real leaf with complex gradient"),
                        None => Tensor::zeros(node.value.shape()),
                    };
                    leaves.push((i, g));
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in backward_node(&nodes, i, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.accumulate(gin),
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        // Leaves appended after the root are never reached.
        for (i, node) in nodes.iter().enumerate().skip(root.id + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves.push((i, Tensor::zeros(node.value.shape())));
            }
        }
        leaves.sort_by_key(|(i, _)| *i);
        Ok(Gradients {
            tape_id: self.id,
            leaves,
        })
    }
}

fn backward_node(nodes: &[Node], i: usize, g: &Value) -> Vec<(usize, Value)> {
    let node = &nodes[i];
    let val = |id: usize| -> &Value { &nodes[id].value };
    let needs = |id: usize| nodes[id].requires_grad;
    let real = |t: Tensor| Value::Real(t);
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let g = g.real();
            out.push((*a, real(g.clone())));
            out.push((*b, real(g.clone())));
        }
        Op::Sub(a, b) => {
            let g = g.real();
            out.push((*a, real(g.clone())));
            if needs(*b) {
                out.push((*b, real(g.map(|v| -v))));
            }
        }
        Op::Mul(a, b) => {
            let g = g.real();
            let (av, bv) = (val(*a).real(), val(*b).real());
            if needs(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                out.push((*a, real(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            if needs(*b) {
                let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                out.push((*b, real(Tensor::from_parts(g.shape().to_vec(), d))));
            }
        }
        Op::Div(a, b) => {
            let g = g.real();
            let (av, bv) = (val(*a).real(), val(*b).real());
            if needs(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(x, y)| x / y).collect();
                out.push((*a, real(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            if needs(*b) {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                    .collect();
                out.push((*b, real(Tensor::from_parts(g.shape().to_vec(), d))));
            }
        }
        Op::Affine(a, scale) => {
            out.push((*a, real(g.real().map(|v| v * scale))));
        }
        Op::Unary(a, kind) => {
            let g = g.real();
            let x = val(*a).real();
            let y = node.value.real();
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| unary_backward(*kind, xi, yi, gi))
                .collect();
            out.push((*a, real(Tensor::from_parts(g.shape().to_vec(), d))));
        }
        Op::MatMul(a, b) => {
            let g = g.real();
            let (av, bv) = (val(*a).real(), val(*b).real());
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let (gd, ad, bd) = (g.data(), av.data(), bv.data());
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                for r in 0..m {
                    for c in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gd[r * n + j] * bd[c * n + j];
                        }
                        ga[r * k + c] = s;
                    }
                }
                out.push((*a, real(Tensor::from_parts(vec![m, k], ga))));
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                for r in 0..m {
                    for c in 0..k {
                        let av = ad[r * k + c];
                        let row = &gd[r * n..(r + 1) * n];
                        for (dst, &gv) in gb[c * n..(c + 1) * n].iter_mut().zip(row) {
                            *dst += av * gv;
                        }
                    }
                }
                out.push((*b, real(Tensor::from_parts(vec![k, n], gb))));
            }
        }
        Op::MixChannels(w, x) => {
            let g = g.real();
            let (wv, xv) = (val(*w).real(), val(*x).real());
            let (b, c_in, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let c_out = g.shape()[1];
            let per_example = wv.ndim() == 3;
            let (gd, wd, xd) = (g.data(), wv.data(), xv.data());
            let w_off = |bi: usize| if per_example { bi * c_out * c_in } else { 0 };
            if needs(*x) {
                let mut gx = vec![0.0; xv.numel()];
                for bi in 0..b {
                    for i in 0..c_out {
                        let grow = &gd[(bi * c_out + i) * t..(bi * c_out + i + 1) * t];
                        for j in 0..c_in {
                            let wij = wd[w_off(bi) + i * c_in + j];
                            let dst = &mut gx[(bi * c_in + j) * t..(bi * c_in + j + 1) * t];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += wij * gv;
                            }
                        }
                    }
                }
                out.push((*x, real(Tensor::from_parts(xv.shape().to_vec(), gx))));
            }
            if needs(*w) {
                let mut gw = vec![0.0; wv.numel()];
                for bi in 0..b {
                    for i in 0..c_out {
                        let grow = &gd[(bi * c_out + i) * t..(bi * c_out + i + 1) * t];
                        for j in 0..c_in {
                            let xrow = &xd[(bi * c_in + j) * t..(bi * c_in + j + 1) * t];
                            let s: f64 = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                            gw[w_off(bi) + i * c_in + j] += s;
                        }
                    }
                }
                out.push((*w, real(Tensor::from_parts(wv.shape().to_vec(), gw))));
            }
        }
        Op::Conv1d { x, w, pad_left } => {
            let g = g.real();
            let (xv, wv) = (val(*x).real(), val(*w).real());
            let (n, c_in, t_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
            let t_out = g.shape()[2];
            let shape = conv::ConvShape {
                n,
                c_in,
                t_in,
                c_out,
                k,
                pad_left: *pad_left,
                t_out,
            };
            let (gx, gw) = conv::backward(&shape, g.data(), xv.data(), wv.data(), needs(*x), needs(*w));
            if let Some(gx) = gx {
                out.push((*x, real(Tensor::from_parts(xv.shape().to_vec(), gx))));
            }
            if let Some(gw) = gw {
                out.push((*w, real(Tensor::from_parts(wv.shape().to_vec(), gw))));
            }
        }
        Op::MaxPool1d { x, argmax } => {
            let g = g.real();
            let xv = val(*x).real();
            let mut gx = vec![0.0; xv.numel()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gx[src] += gv;
            }
            out.push((*x, real(Tensor::from_parts(xv.shape().to_vec(), gx))));
        }
        Op::Sum(a) => {
            let gv = g.real().item();
            out.push((*a, real(Tensor::full(val(*a).shape(), gv))));
        }
        Op::SumAxis { x, axis } => {
            let g = g.real();
            let shape = val(*x).shape().to_vec();
            let (outer, n, inner) = split_axis(&shape, *axis);
            let gd = g.data();
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            out.push((*x, real(Tensor::from_parts(shape, gx))));
        }
        Op::Softmax(a) => {
            let g = g.real();
            let y = node.value.real();
            let n = last_dim(y.shape());
            let mut gx = vec![0.0; y.numel()];
            for ((gr, yr), dst) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            out.push((*a, real(Tensor::from_parts(y.shape().to_vec(), gx))));
        }
        Op::LogSoftmax(a) => {
            let g = g.real();
            let y = node.value.real();
            let n = last_dim(y.shape());
            let mut gx = vec![0.0; y.numel()];
            for ((gr, yr), dst) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let s: f64 = gr.iter().sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gi - yi.exp() * s;
                }
            }
            out.push((*a, real(Tensor::from_parts(y.shape().to_vec(), gx))));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            let gv = match g {
                Value::Real(t) => Value::Real(t.clone().reshape(&shape).expect("reshape adjoint")),
                Value::Complex(t) => {
                    Value::Complex(ComplexTensor::from_parts(shape, t.data().to_vec()))
                }
            };
            out.push((*a, gv));
        }
        Op::Broadcast(a) => {
            let g = g.real();
            let src = val(*a).shape().to_vec();
            let map = broadcast_index_map(&src, g.shape());
            let mut gx = vec![0.0; src.iter().product()];
            for (&s, &gv) in map.iter().zip(g.data()) {
                gx[s] += gv;
            }
            out.push((*a, real(Tensor::from_parts(src, gx))));
        }
        Op::Slice { x, axis, start } => {
            let g = g.real();
            let shape = val(*x).shape().to_vec();
            let (outer, n, inner) = split_axis(&shape, *axis);
            let len = g.shape()[*axis];
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * n + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(src);
            }
            out.push((*x, real(Tensor::from_parts(shape, gx))));
        }
        Op::Concat { xs, axis } => {
            let g = g.real();
            let total = g.shape()[*axis];
            let (outer, _, inner) = split_axis(g.shape(), *axis);
            let mut off = 0;
            for &x in xs {
                let shape = val(x).shape().to_vec();
                let len = shape[*axis];
                if needs(x) {
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let s = (o * total + off) * inner;
                        gx.extend_from_slice(&g.data()[s..s + len * inner]);
                    }
                    out.push((x, real(Tensor::from_parts(shape, gx))));
                }
                off += len;
            }
        }
        Op::IndexSelect { x, indices } => {
            let g = g.real();
            let shape = val(*x).shape().to_vec();
            let row: usize = shape[1..].iter().product();
            let mut gx = vec![0.0; shape.iter().product()];
            for (r, &src) in indices.iter().enumerate() {
                for (d, &gv) in gx[src * row..(src + 1) * row]
                    .iter_mut()
                    .zip(&g.data()[r * row..(r + 1) * row])
                {
                    *d += gv;
                }
            }
            out.push((*x, real(Tensor::from_parts(shape, gx))));
        }
        Op::GatherChannels { x, index } => {
            let g = g.real();
            let shape = val(*x).shape().to_vec();
            let (b, c_in, t) = (shape[0], shape[1], shape[2]);
            let c_out = g.shape()[1];
            let mut gx = vec![0.0; b * c_in * t];
            for bi in 0..b {
                for i in 0..c_out {
                    let src = index[bi * c_out + i];
                    let dst = &mut gx[(bi * c_in + src) * t..(bi * c_in + src + 1) * t];
                    for (d, &gv) in dst.iter_mut().zip(&g.data()[(bi * c_out + i) * t..(bi * c_out + i + 1) * t]) {
                        *d += gv;
                    }
                }
            }
            out.push((*x, real(Tensor::from_parts(shape, gx))));
        }
        Op::ReverseLast(a) => {
            let g = g.real();
            let n = last_dim(g.shape());
            let mut gx = g.data().to_vec();
            for row in gx.chunks_mut(n) {
                row.reverse();
            }
            out.push((*a, real(Tensor::from_parts(g.shape().to_vec(), gx))));
        }
        Op::StraightThrough(soft) => {
            out.push((*soft, g.clone()));
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i).real()).collect();
            let grads = backward(g.real(), &ins);
            assert_eq!(grads.len(), inputs.len(), "custom adjoint returned wrong arity");
            for (&i, gi) in inputs.iter().zip(grads) {
                assert_eq!(gi.shape(), val(i).shape(), "custom adjoint shape mismatch");
                out.push((i, real(gi)));
            }
        }
        Op::ToComplex(a) => {
            out.push((*a, real(g.complex().re())));
        }
        Op::Complex(re, im) => {
            let g = g.complex();
            out.push((*re, real(g.re())));
            out.push((*im, real(g.im())));
        }
        Op::Re(a) => {
            let g = g.real();
            out.push((*a, Value::Complex(g.to_complex())));
        }
        Op::Im(a) => {
            let g = g.real();
            let d = g.data().iter().map(|&v| Complex64::new(0.0, v)).collect();
            out.push((*a, Value::Complex(ComplexTensor::from_parts(g.shape().to_vec(), d))));
        }
        Op::CAbs(a) => {
            let g = g.real();
            let z = val(*a).complex();
            let d = g
                .data()
                .iter()
                .zip(z.data())
                .map(|(&gi, zi)| {
                    let r = zi.norm();
                    if r == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        zi * (gi / r)
                    }
                })
                .collect();
            out.push((*a, Value::Complex(ComplexTensor::from_parts(g.shape().to_vec(), d))));
        }
        Op::CMul(a, b) => {
            let g = g.complex();
            let (av, bv) = (val(*a).complex(), val(*b).complex());
            if needs(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(gi, bi)| gi * bi.conj()).collect();
                out.push((*a, Value::Complex(ComplexTensor::from_parts(g.shape().to_vec(), d))));
            }
            if needs(*b) {
                let d = g.data().iter().zip(av.data()).map(|(gi, ai)| gi * ai.conj()).collect();
                out.push((*b, Value::Complex(ComplexTensor::from_parts(g.shape().to_vec(), d))));
            }
        }
        Op::Fft(a) => {
            // Adjoint of the unnormalised DFT is n times the normalised inverse.
            let g = g.complex();
            let n = last_dim(g.shape());
            let mut d = ifft_last_axis(g.data(), n);
            for z in &mut d {
                *z *= n as f64;
            }
            out.push((*a, Value::Complex(ComplexTensor::from_parts(g.shape().to_vec(), d))));
        }
        Op::Ifft(a) => {
            let g = g.complex();
            let n = last_dim(g.shape());
            let mut d = fft_last_axis(g.data(), n);
            for z in &mut d {
                *z /= n as f64;
            }
            out.push((*a, Value::Complex(ComplexTensor::from_parts(g.shape().to_vec(), d))));
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn is_complex(&self) -> bool {
        matches!(&*self.tape.value(self.id), Value::Complex(_))
    }

    /// Copy of the real forward value.
    pub fn tensor(&self) -> Tensor {
        self.tape.value(self.id).real().clone()
    }

    /// Copy of the complex forward value.
    pub fn complex_tensor(&self) -> ComplexTensor {
        self.tape.value(self.id).complex().clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).real().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        match &*self.tape.value(self.id) {
            Value::Real(t) => self.tape.constant(t.clone()),
            Value::Complex(t) => self.tape.complex_constant(t.clone()),
        }
    }

    fn with_real<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(self.tape.value(self.id).real())
    }

    fn binary(self, other: Var<'t>, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        self.tape.check(other);
        let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
        let (a, b) = (a.real(), b.real());
        same_shape(name, a.shape(), b.shape());
        let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.derived(
            Value::Real(Tensor::from_parts(a.shape().to_vec(), d)),
            op,
            &[self.id, other.id],
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// `scale * self`.
    pub fn scale(self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn add_scalar(self, shift: f64) -> Var<'t> {
        self.affine(1.0, shift)
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let y = self.with_real(|t| t.map(|v| scale * v + shift));
        self.tape.derived(Value::Real(y), Op::Affine(self.id, scale), &[self.id])
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let y = self.with_real(|t| t.map(|v| unary_forward(kind, v)));
        self.tape.derived(Value::Real(y), Op::Unary(self.id, kind), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape.check(other);
        let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
        let (a, b) = (a.real(), b.real());
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul needs 2-D operands");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dimension mismatch");
        let n = b.shape()[1];
        let mut y = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..k {
                let av = a.data()[r * k + c];
                for (d, &bv) in y[r * n..(r + 1) * n].iter_mut().zip(&b.data()[c * n..(c + 1) * n]) {
                    *d += av * bv;
                }
            }
        }
        self.tape.derived(
            Value::Real(Tensor::from_parts(vec![m, n], y)),
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Channel mixing of `self` `[B,C,T]` by `w` of shape `[C',C]` (shared) or
    /// `[B,C',C]` (per example). Returns `[B,C',T]`.
    pub fn mix_channels(self, w: Var<'t>) -> Var<'t> {
        self.tape.check(w);
        let (xv, wv) = (self.tape.value(self.id), self.tape.value(w.id));
        let (xv, wv) = (xv.real(), wv.real());
        assert_eq!(xv.ndim(), 3, "mix_channels input must be [B,C,T]");
        let (b, c_in, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let per_example = wv.ndim() == 3;
        let c_out = if per_example {
            assert_eq!(wv.shape()[0], b, "per-example mixing batch mismatch");
            assert_eq!(wv.shape()[2], c_in, "mixing width mismatch");
            wv.shape()[1]
        } else {
            assert_eq!(wv.ndim(), 2, "mixing matrix must be 2-D or 3-D");
            assert_eq!(wv.shape()[1], c_in, "mixing width mismatch");
            wv.shape()[0]
        };
        let (xd, wd) = (xv.data(), wv.data());
        let mut y = vec![0.0; b * c_out * t];
        for bi in 0..b {
            let off = if per_example { bi * c_out * c_in } else { 0 };
            for i in 0..c_out {
                let dst = &mut y[(bi * c_out + i) * t..(bi * c_out + i + 1) * t];
                for j in 0..c_in {
                    let wij = wd[off + i * c_in + j];
                    if wij == 0.0 {
                        continue;
                    }
                    for (d, &xv) in dst.iter_mut().zip(&xd[(bi * c_in + j) * t..(bi * c_in + j + 1) * t]) {
                        *d += wij * xv;
                    }
                }
            }
        }
        self.tape.derived(
            Value::Real(Tensor::from_parts(vec![b, c_out, t], y)),
            Op::MixChannels(w.id, self.id),
            &[w.id, self.id],
        )
    }

    /// Cross-correlation of `[N,Cin,T]` with `[Cout,Cin,K]` after zero padding.
    pub fn conv1d(self, w: Var<'t>, pad_left: usize, pad_right: usize) -> Var<'t> {
        self.tape.check(w);
        let (xv, wv) = (self.tape.value(self.id), self.tape.value(w.id));
        let (xv, wv) = (xv.real(), wv.real());
        assert_eq!(xv.ndim(), 3, "conv1d input must be [N,C,T]");
        assert_eq!(wv.ndim(), 3, "conv1d kernel must be [O,C,K]");
        let (n, c_in, t_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape()[1], c_in, "conv1d channel mismatch");
        assert!(t_in + pad_left + pad_right >= k, "conv1d kernel longer than padded input");
        let t_out = t_in + pad_left + pad_right - k + 1;
        let shape = conv::ConvShape {
            n,
            c_in,
            t_in,
            c_out,
            k,
            pad_left,
            t_out,
        };
        let y = conv::forward(&shape, xv.data(), wv.data());
        self.tape.derived(
            Value::Real(Tensor::from_parts(vec![n, c_out, t_out], y)),
            Op::Conv1d {
                x: self.id,
                w: w.id,
                pad_left,
            },
            &[self.id, w.id],
        )
    }

    /// Non-overlapping max pooling along the last axis; trailing samples that
    /// do not fill a window are dropped. Ties go to the lowest index.
    pub fn max_pool1d(self, k: usize) -> Var<'t> {
        assert!(k >= 1);
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        let t = last_dim(xv.shape());
        let t_out = t / k;
        let rows = xv.numel() / t;
        let mut y = Vec::with_capacity(rows * t_out);
        let mut arg = Vec::with_capacity(rows * t_out);
        for r in 0..rows {
            let row = &xv.data()[r * t..(r + 1) * t];
            for j in 0..t_out {
                let mut best = j * k;
                for i in j * k + 1..(j + 1) * k {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                y.push(row[best]);
                arg.push(r * t + best);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = t_out;
        self.tape.derived(
            Value::Real(Tensor::from_parts(shape, y)),
            Op::MaxPool1d {
                x: self.id,
                argmax: Rc::new(arg),
            },
            &[self.id],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.with_real(|t| t.sum());
        self.tape.derived(Value::Real(Tensor::scalar(s)), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_real(|t| t.numel());
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xv.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        self.tape.derived(
            Value::Real(Tensor::from_parts(shape, y)),
            Op::SumAxis { x: self.id, axis },
            &[self.id],
        )
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis];
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        let y = softmax_rows(xv.data(), last_dim(xv.shape()));
        self.tape.derived(
            Value::Real(Tensor::from_parts(xv.shape().to_vec(), y)),
            Op::Softmax(self.id),
            &[self.id],
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        let n = last_dim(xv.shape());
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.tape.derived(
            Value::Real(Tensor::from_parts(xv.shape().to_vec(), y)),
            Op::LogSoftmax(self.id),
            &[self.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.tape.value(self.id);
        let value = match &*v {
            Value::Real(t) => Value::Real(t.clone().reshape(shape).expect("reshape")),
            Value::Complex(t) => {
                assert_eq!(shape.iter().product::<usize>(), t.numel(), "reshape size mismatch");
                Value::Complex(ComplexTensor::from_parts(shape.to_vec(), t.data().to_vec()))
            }
        };
        self.tape.derived(value, Op::Reshape(self.id), &[self.id])
    }

    /// Right-aligned broadcast to `shape`; size-1 and missing leading axes are
    /// repeated.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        if xv.shape() == shape {
            return self;
        }
        let map = broadcast_index_map(xv.shape(), shape);
        let y = map.iter().map(|&i| xv.data()[i]).collect();
        self.tape.derived(
            Value::Real(Tensor::from_parts(shape.to_vec(), y)),
            Op::Broadcast(self.id),
            &[self.id],
        )
    }

    /// Elementwise product with `other` broadcast to this shape.
    pub fn mul_bcast(self, other: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        self.mul(other.broadcast_to(&shape))
    }

    /// Elementwise sum with `other` broadcast to this shape.
    pub fn add_bcast(self, other: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        self.add(other.broadcast_to(&shape))
    }

    /// `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        assert!(start <= end && end <= n, "slice {start}..{end} out of range {n}");
        let len = end - start;
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            y.extend_from_slice(&xv.data()[s..s + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.tape.derived(
            Value::Real(Tensor::from_parts(shape, y)),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Value>> = parts
            .iter()
            .map(|p| {
                tape.check(*p);
                tape.value(p.id)
            })
            .collect();
        let first = values[0].real().shape().to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for v in &values {
            let s = v.real().shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for d in 0..s.len() {
                if d != axis {
                    assert_eq!(s[d], first[d], "concat shape mismatch");
                }
            }
            total += s[axis];
        }
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let t = v.real();
                let len = t.shape()[axis];
                y.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.derived(
            Value::Real(Tensor::from_parts(shape, y)),
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Rows of the leading axis picked by `indices` (repeats allowed).
    pub fn index_select(self, indices: &[usize]) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        let rows = xv.shape()[0];
        let row: usize = xv.shape()[1..].iter().product();
        let mut y = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < rows, "index {i} out of range {rows}");
            y.extend_from_slice(&xv.data()[i * row..(i + 1) * row]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = indices.len();
        self.tape.derived(
            Value::Real(Tensor::from_parts(shape, y)),
            Op::IndexSelect {
                x: self.id,
                indices: Rc::new(indices.to_vec()),
            },
            &[self.id],
        )
    }

    /// Per-example channel gather on `[B,C,T]`: output channel `i` of example
    /// `b` is input channel `index[b*C' + i]`.
    pub fn gather_channels(self, index: &[usize], c_out: usize) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        assert_eq!(xv.ndim(), 3, "gather_channels input must be [B,C,T]");
        let (b, c_in, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(index.len(), b * c_out, "gather index length mismatch");
        let mut y = Vec::with_capacity(b * c_out * t);
        for bi in 0..b {
            for i in 0..c_out {
                let src = index[bi * c_out + i];
                assert!(src < c_in, "channel index {src} out of range");
                y.extend_from_slice(&xv.data()[(bi * c_in + src) * t..(bi * c_in + src + 1) * t]);
            }
        }
        self.tape.derived(
            Value::Real(Tensor::from_parts(vec![b, c_out, t], y)),
            Op::GatherChannels {
                x: self.id,
                index: Rc::new(index.to_vec()),
            },
            &[self.id],
        )
    }

    /// Reverses the last axis.
    pub fn reverse_last(self) -> Var<'t> {
        let xv = self.tape.value(self.id);
        let xv = xv.real();
        let n = last_dim(xv.shape());
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(n) {
            row.reverse();
        }
        self.tape.derived(
            Value::Real(Tensor::from_parts(xv.shape().to_vec(), y)),
            Op::ReverseLast(self.id),
            &[self.id],
        )
    }

    /// Forward value `hard`, gradient passed to `self` unchanged.
    pub fn straight_through(self, hard: Tensor) -> Var<'t> {
        same_shape("straight_through", &self.shape(), hard.shape());
        self.tape
            .derived(Value::Real(hard), Op::StraightThrough(self.id), &[self.id])
    }

    pub fn to_complex(self) -> Var<'t> {
        let t = self.with_real(|t| t.to_complex());
        self.tape
            .derived(Value::Complex(t), Op::ToComplex(self.id), &[self.id])
    }

    /// `re + i im`.
    pub fn complex(re: Var<'t>, im: Var<'t>) -> Var<'t> {
        let tape = re.tape;
        tape.check(im);
        let (a, b) = (tape.value(re.id), tape.value(im.id));
        let (a, b) = (a.real(), b.real());
        same_shape("complex", a.shape(), b.shape());
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| Complex64::new(x, y))
            .collect();
        tape.derived(
            Value::Complex(ComplexTensor::from_parts(a.shape().to_vec(), d)),
            Op::Complex(re.id, im.id),
            &[re.id, im.id],
        )
    }

    pub fn re(self) -> Var<'t> {
        let t = self.tape.value(self.id).complex().re();
        self.tape.derived(Value::Real(t), Op::Re(self.id), &[self.id])
    }

    pub fn im(self) -> Var<'t> {
        let t = self.tape.value(self.id).complex().im();
        self.tape.derived(Value::Real(t), Op::Im(self.id), &[self.id])
    }

    /// Complex modulus.
    pub fn cabs(self) -> Var<'t> {
        let t = self.tape.value(self.id).complex().abs();
        self.tape.derived(Value::Real(t), Op::CAbs(self.id), &[self.id])
    }

    /// Elementwise complex product.
    pub fn cmul(self, other: Var<'t>) -> Var<'t> {
        self.tape.check(other);
        let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
        let (a, b) = (a.complex(), b.complex());
        same_shape("cmul", a.shape(), b.shape());
        let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.tape.derived(
            Value::Complex(ComplexTensor::from_parts(a.shape().to_vec(), d)),
            Op::CMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    fn spectral(self, inverse: bool) -> Result<Var<'t>> {
        let src = if self.is_complex() { self } else { self.to_complex() };
        let v = self.tape.value(src.id);
        let z = v.complex();
        let n = z.shape().last().copied().unwrap_or(0);
        if n < 2 {
            return Err(Error::contract(format!(
                "FFT axis length must be at least 2, got {n}"
            )));
        }
        let d = if inverse {
            ifft_last_axis(z.data(), n)
        } else {
            fft_last_axis(z.data(), n)
        };
        let op = if inverse { Op::Ifft(src.id) } else { Op::Fft(src.id) };
        Ok(self.tape.derived(
            Value::Complex(ComplexTensor::from_parts(z.shape().to_vec(), d)),
            op,
            &[src.id],
        ))
    }

    /// Unnormalised DFT along the last axis; real input is promoted.
    pub fn fft(self) -> Result<Var<'t>> {
        self.spectral(false)
    }

    /// Inverse DFT along the last axis, normalised by `1/n`.
    pub fn ifft(self) -> Result<Var<'t>> {
        self.spectral(true)
    }
}
