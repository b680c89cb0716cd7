use super::conv::{self, ConvDims};
use super::{numel, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Softplus,
    Log,
    Square,
    Abs,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(Unary, Var),
    Reduce {
        input: Var,
        out_index: Vec<usize>,
        divisor: f64,
    },
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    SliceLast {
        input: Var,
        start: usize,
        len: usize,
        last: usize,
    },
    Stack(Vec<Var>),
    Select0 {
        input: Var,
        index: usize,
    },
    Reshape(Var),
    SoftmaxLast(Var),
    LogSumExpLast(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in insertion order, so every node's parents precede it
/// and the reverse sweep is a plain reverse iteration.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it is differentiable iff the tensor is.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                got: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar() on a tensor of {} elements", n.value.len());
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        let (na, nb) = (numel(sa), numel(sb));
        let shape = if sa == sb || nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(TensorError::Broadcast {
                op: name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        };
        let n = numel(&shape);
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let ia = |i: usize| if na == 1 { va[0] } else { va[i] };
        let ib = |i: usize| if nb == 1 { vb[0] } else { vb[i] };
        if kind == Binary::Div {
            if let Some(&z) = vb.iter().find(|&&x| x == 0.0) {
                return Err(TensorError::Domain { op: "div", value: z });
            }
        }
        let value: Vec<f64> = (0..n)
            .map(|i| match kind {
                Binary::Add => ia(i) + ib(i),
                Binary::Sub => ia(i) - ib(i),
                Binary::Mul => ia(i) * ib(i),
                Binary::Div => ia(i) / ib(i),
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::AddConst(a), rg)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let n = self.node(a);
        if kind == Unary::Log {
            if let Some(&bad) = n.value.iter().find(|&&x| x <= 0.0) {
                return Err(TensorError::Domain { op: "log", value: bad });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Softplus => softplus,
            Unary::Log => f64::ln,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
            Unary::Neg => |x| -x,
        };
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::Unary(kind, a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a).expect("softplus is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a).expect("abs is total")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a).expect("neg is total")
    }

    // ---- reductions --------------------------------------------------------

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(TensorError::Invalid(format!(
                    "reduce axis {ax} out of range for rank {}",
                    shape.len()
                )));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        // Output flat index for each input element, walking a row-major odometer.
        let n = numel(&shape);
        let mut out_index = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            let mut o = 0;
            for (ax, &i) in idx.iter().enumerate() {
                if !reduced[ax] {
                    o = o * shape[ax] + i;
                }
            }
            out_index.push(o);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut value = vec![0.0; numel(&out_shape)];
        for (x, &o) in self.node(a).value.iter().zip(&out_index) {
            value[o] += x;
        }
        let divisor = if mean { count.max(1) as f64 } else { 1.0 };
        if mean {
            value.iter_mut().for_each(|v| *v /= divisor);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            out_shape,
            value,
            Op::Reduce {
                input: a,
                out_index,
                divisor,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.node(a).shape.len()).collect();
        self.reduce(a, &axes, false).expect("all axes valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.node(a).shape.len()).collect();
        self.reduce(a, &axes, true).expect("all axes valid")
    }

    // ---- structure ---------------------------------------------------------

    /// `input` [H, W, Cin], `kernel` [k, k, Cin, Cout], `bias` [Cout] -> [H, W, Cout].
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d_same";
        let dim_err = |axis: &str, expected: usize, got: usize| TensorError::Dimension {
            op: OP,
            axis: axis.to_string(),
            expected,
            got,
        };
        let (si, sk, sb) = (
            self.shape(input).to_vec(),
            self.shape(kernel).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 3 {
            return Err(dim_err("input rank", 3, si.len()));
        }
        if sk.len() != 4 {
            return Err(dim_err("kernel rank", 4, sk.len()));
        }
        if sk[0] != sk[1] {
            return Err(dim_err("kernel width", sk[0], sk[1]));
        }
        if sk[0] % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "{OP}: kernel size must be odd, got {}",
                sk[0]
            )));
        }
        if sk[2] != si[2] {
            return Err(dim_err("Cin", si[2], sk[2]));
        }
        if sb.len() != 1 || sb[0] != sk[3] {
            return Err(dim_err("Cout", sk[3], sb.iter().product()));
        }
        let dims = ConvDims {
            height: si[0],
            width: si[1],
            c_in: si[2],
            c_out: sk[3],
            k: sk[0],
        };
        let value = conv::forward(
            dims,
            self.value(input),
            self.value(kernel),
            self.value(bias),
        );
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            vec![dims.height, dims.width, dims.c_out],
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                dims,
            },
            rg,
        ))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| TensorError::Invalid("slice_last on a scalar".into()))?;
        if start + len > last {
            return Err(TensorError::Dimension {
                op: "slice_last",
                axis: "last".into(),
                expected: last,
                got: start + len,
            });
        }
        let value: Vec<f64> = self
            .value(a)
            .chunks_exact(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            out_shape,
            value,
            Op::SliceLast {
                input: a,
                start,
                len,
                last,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("stack of zero tensors".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut value = Vec::with_capacity(numel(&inner) * parts.len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(TensorError::Broadcast {
                    op: "stack",
                    lhs: inner,
                    rhs: self.shape(p).to_vec(),
                });
            }
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let rg = self.rg(parts);
        Ok(self.push(shape, value, Op::Stack(parts.to_vec()), rg))
    }

    /// Element `index` along axis 0, dropping that axis.
    pub fn select0(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(TensorError::Dimension {
                op: "select0",
                axis: "0".into(),
                expected: shape.first().copied().unwrap_or(0),
                got: index,
            });
        }
        let inner: Vec<usize> = shape[1..].to_vec();
        let n = numel(&inner);
        let value = self.value(a)[index * n..(index + 1) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(inner, value, Op::Select0 { input: a, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                got: self.value(a).len(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| TensorError::Invalid("softmax_last on a scalar".into()))?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_exact_mut(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::SoftmaxLast(a), rg))
    }

    /// log Σ exp over the last axis, which is removed.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| TensorError::Invalid("logsumexp_last on a scalar".into()))?;
        let value: Vec<f64> = self
            .value(a)
            .chunks_exact(last)
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape[..shape.len() - 1].to_vec(),
            value,
            Op::LogSumExpLast(a),
            rg,
        ))
    }

    /// Per-channel normalization over every position of a channels-last tensor,
    /// followed by a learnable scale and shift.
    ///
    /// With `running = None` the batch statistics are used (and returned);
    /// otherwise the supplied mean/variance are treated as constants.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let shape = self.shape(input).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| TensorError::Invalid("batch_norm on a scalar".into()))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(TensorError::Dimension {
                    op: "batch_norm",
                    axis: name.into(),
                    expected: c,
                    got: self.value(v).len(),
                });
            }
        }
        let x = self.value(input);
        let n = (x.len() / c).max(1) as f64;
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                for row in x.chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; c];
                for row in x.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = x.to_vec();
        for row in xhat.chunks_exact_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = xhat.clone();
        for row in value.chunks_exact_mut(c) {
            for ((v, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        let out = self.push(
            shape,
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            rg,
        );
        Ok((out, stats))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Propagates d(root)/d(node) to every node that depends on a
    /// differentiable leaf. May only run once per graph.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let n_root = self.node(root).value.len();
        if n_root != 1 {
            return Err(TensorError::NonScalarRoot(n_root));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.node(root).requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (na, nb) = (va.len(), vb.len());
                let xa = |k: usize| if na == 1 { va[0] } else { va[k] };
                let xb = |k: usize| if nb == 1 { vb[0] } else { vb[k] };
                let fold = |full: Vec<f64>, target_len: usize| {
                    if target_len == 1 && full.len() != 1 {
                        vec![full.iter().sum()]
                    } else {
                        full
                    }
                };
                if wants(*a) {
                    let d: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(k, gk)| gk * xb(k)).collect(),
                        Binary::Div => g.iter().enumerate().map(|(k, gk)| gk / xb(k)).collect(),
                    };
                    acc(grads, *a, fold(d, na));
                }
                if wants(*b) {
                    let d: Vec<f64> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|gk| -gk).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(k, gk)| gk * xa(k)).collect(),
                        Binary::Div => g
                            .iter()
                            .enumerate()
                            .map(|(k, gk)| -gk * xa(k) / (xb(k) * xb(k)))
                            .collect(),
                    };
                    acc(grads, *b, fold(d, nb));
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddConst(a) => acc(grads, *a, g.to_vec()),
            Op::Unary(kind, a) => {
                let x = &nodes[a.0].value;
                let y = &node.value;
                let d: Vec<f64> = (0..g.len())
                    .map(|k| {
                        let local = match kind {
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => y[k],
                            Unary::Softplus => sigmoid(x[k]),
                            Unary::Log => 1.0 / x[k],
                            Unary::Square => 2.0 * x[k],
                            Unary::Abs => {
                                if x[k] > 0.0 {
                                    1.0
                                } else if x[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Neg => -1.0,
                        };
                        g[k] * local
                    })
                    .collect();
                acc(grads, *a, d);
            }
            Op::Reduce {
                input,
                out_index,
                divisor,
            } => {
                let d = out_index.iter().map(|&o| g[o] / divisor).collect();
                acc(grads, *input, d);
            }
            Op::Conv {
                input,
                kernel,
                bias,
                dims,
            } => {
                let want = [wants(*input), wants(*kernel), wants(*bias)];
                let (gi, gk, gb) = conv::backward(
                    *dims,
                    &nodes[input.0].value,
                    &nodes[kernel.0].value,
                    g,
                    want,
                );
                if let Some(d) = gi {
                    acc(grads, *input, d);
                }
                if let Some(d) = gk {
                    acc(grads, *kernel, d);
                }
                if let Some(d) = gb {
                    acc(grads, *bias, d);
                }
            }
            Op::SliceLast {
                input,
                start,
                len,
                last,
            } => {
                let mut d = vec![0.0; nodes[input.0].value.len()];
                for (dst, src) in d.chunks_exact_mut(*last).zip(g.chunks_exact(*len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                acc(grads, *input, d);
            }
            Op::Stack(parts) => {
                let n = g.len() / parts.len();
                for (p, chunk) in parts.iter().zip(g.chunks_exact(n)) {
                    acc(grads, *p, chunk.to_vec());
                }
            }
            Op::Select0 { input, index } => {
                let mut d = vec![0.0; nodes[input.0].value.len()];
                let n = g.len();
                d[index * n..(index + 1) * n].copy_from_slice(g);
                acc(grads, *input, d);
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::SoftmaxLast(a) => {
                let last = *node.shape.last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((drow, yrow), grow) in d
                    .chunks_exact_mut(last)
                    .zip(node.value.chunks_exact(last))
                    .zip(g.chunks_exact(last))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((dv, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (gv - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LogSumExpLast(a) => {
                let x = &nodes[a.0].value;
                let last = x.len() / node.value.len();
                let mut d = vec![0.0; x.len()];
                for (k, (drow, xrow)) in d
                    .chunks_exact_mut(last)
                    .zip(x.chunks_exact(last))
                    .enumerate()
                {
                    let lse = node.value[k];
                    for (dv, xv) in drow.iter_mut().zip(xrow) {
                        *dv = g[k] * (xv - lse).exp();
                    }
                }
                acc(grads, *a, d);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gam = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let mut d = vec![0.0; c];
                    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((dv, gv), xv) in d.iter_mut().zip(grow).zip(xrow) {
                            *dv += gv * xv;
                        }
                    }
                    acc(grads, *gamma, d);
                }
                if wants(*beta) {
                    let mut d = vec![0.0; c];
                    for grow in g.chunks_exact(c) {
                        d.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                    acc(grads, *beta, d);
                }
                if wants(*input) {
                    let mut d = vec![0.0; g.len()];
                    if *batch_stats {
                        let n = (g.len() / c) as f64;
                        let mut sum_dx = vec![0.0; c];
                        let mut sum_dx_xhat = vec![0.0; c];
                        for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                let dxhat = grow[ch] * gam[ch];
                                sum_dx[ch] += dxhat;
                                sum_dx_xhat[ch] += dxhat * xrow[ch];
                            }
                        }
                        for ((drow, grow), xrow) in d
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(xhat.chunks_exact(c))
                        {
                            for ch in 0..c {
                                let dxhat = grow[ch] * gam[ch];
                                drow[ch] = inv_std[ch] / n
                                    * (n * dxhat - sum_dx[ch] - xrow[ch] * sum_dx_xhat[ch]);
                            }
                        }
                    } else {
                        for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for ch in 0..c {
                                drow[ch] = grow[ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    acc(grads, *input, d);
                }
            }
        }
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this graph's gradient for `v` into `target`'s gradient buffer.
    pub fn accumulate_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if !self.backward_done {
            return Err(TensorError::Invalid(
                "accumulate_grad called before backward".into(),
            ));
        }
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}
