use super::{Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        src: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    L2Normalize {
        src: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single-use gradient tape. Every op evaluates eagerly and records
/// enough to replay its vector-Jacobian product in [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Split `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

fn gelu_value(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + tanh(C * (x + 0.044715 * x * x * x)))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = tanh(u);
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`, with explicit row/col strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover the strided views:
    // `a` holds m*k elements, `b` holds k*n elements, `c` holds m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    /// Drop every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(shape, value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("recorded nodes are well-formed")
    }

    /// Record a tensor as a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            k as isize,
            1,
            &self.nodes[b.0].value,
            n as isize,
            1,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.checked("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.iter().product::<usize>() == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1] {
            Ok(Bcast::Row)
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        // Commutative ops accept the broadcast operand on either side.
        let (a, b) = if matches!(name, "add" | "mul")
            && self.bcast(name, a, b).is_err()
            && self.bcast(name, b, a).is_ok()
        {
            (b, a)
        } else {
            (a, b)
        };
        let kind = self.bcast(name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<f64> = match kind {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => {
                let n = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % n]))
                    .collect()
            }
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.checked(name, shape, out, make(a, b, kind), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        self.elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a, s), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Contract(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.nodes[p.0].value[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::Contract(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let w = end - start;
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = w;
        let rg = self.rg(a);
        Ok(self.push(
            oshape,
            out,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract(format!("transpose needs 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(w) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Normalize each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let mut out = self.data(a).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(shape, out, Op::LayerNorm { src: a, inv_std }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// `|a|`, composed as `relu(a) + relu(-a)`.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a);
        let na = self.scale(a, -1.0);
        let neg = self.relu(na);
        self.add(pos, neg)
    }

    /// Elementwise maximum, composed as `a + relu(b - a)`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(b, a)?;
        let r = self.relu(d);
        self.add(a, r)
    }

    /// Elementwise minimum, composed as `a - relu(a - b)`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d);
        self.sub(a, r)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Sum along `axis`, keeping it as extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "sum axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(oshape, out, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or_else(|| {
            TensorError::Contract(format!("mean axis {axis} out of range"))
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Scale each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let mut out = self.data(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(shape, out, Op::L2Normalize { src: a, norms }, rg)
    }

    /// Gradient of the last `backward` w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &gout);
            if gout.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, gout: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let bv = &nodes[b.0].value;
                if let Some(ga) = acc(nodes, grads, a) {
                    // dA = dC * B^T
                    gemm_acc(m, n, k, gout, n as isize, 1, bv, 1, n as isize, ga);
                }
                let av = &nodes[a.0].value;
                if let Some(gb) = acc(nodes, grads, b) {
                    // dB = A^T * dC
                    gemm_acc(k, m, n, av, 1, k as isize, gout, n as isize, 1, gb);
                }
            }
            &Op::Add(a, b, kind) => {
                acc_bcast(nodes, grads, a, Bcast::Same, gout.iter().copied());
                acc_bcast(nodes, grads, b, kind, gout.iter().copied());
            }
            &Op::Mul(a, b, kind) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let nb = bv.len();
                let bat = |i: usize| match kind {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Row => bv[i % nb],
                };
                acc_bcast(nodes, grads, a, Bcast::Same, gout.iter().enumerate().map(|(i, g)| g * bat(i)));
                acc_bcast(nodes, grads, b, kind, gout.iter().zip(av).map(|(g, x)| g * x));
            }
            &Op::Div(a, b, kind) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let nb = bv.len();
                let bat = |i: usize| match kind {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Row => bv[i % nb],
                };
                acc_bcast(nodes, grads, a, Bcast::Same, gout.iter().enumerate().map(|(i, g)| g / bat(i)));
                acc_bcast(
                    nodes,
                    grads,
                    b,
                    kind,
                    gout.iter().enumerate().map(|(i, g)| {
                        let y = bat(i);
                        -g * av[i] / (y * y)
                    }),
                );
            }
            &Op::Scale(a, s) => acc_bcast(nodes, grads, a, Bcast::Same, gout.iter().map(|g| g * s)),
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let (outer, _, inner) = axis_split(&node.shape, axis);
                let mut off = 0;
                for o in 0..outer {
                    for &p in parts {
                        let len = nodes[p.0].shape[axis] * inner;
                        if let Some(buf) = acc(nodes, grads, p) {
                            for (b, g) in buf[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(&gout[off..off + len])
                            {
                                *b += g;
                            }
                        }
                        off += len;
                    }
                }
            }
            &Op::Slice { src, axis, start } => {
                let w = node.shape[axis];
                let (outer, len, inner) = axis_split(&nodes[src.0].shape, axis);
                if let Some(buf) = acc(nodes, grads, src) {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        for (b, g) in buf[base..base + w * inner]
                            .iter_mut()
                            .zip(&gout[o * w * inner..(o + 1) * w * inner])
                        {
                            *b += g;
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                if let Some(buf) = acc(nodes, grads, a) {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let w = *node.shape.last().unwrap();
                if let Some(buf) = acc(nodes, grads, a) {
                    for ((yr, gr), br) in y.chunks(w).zip(gout.chunks(w)).zip(buf.chunks_mut(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((b, y), g) in br.iter_mut().zip(yr).zip(gr) {
                            *b += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let y = &node.value;
                let w = *node.shape.last().unwrap();
                if let Some(buf) = acc(nodes, grads, *src) {
                    for (r, ((yr, gr), br)) in y
                        .chunks(w)
                        .zip(gout.chunks(w))
                        .zip(buf.chunks_mut(w))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / w as f64;
                        let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                        for ((b, y), g) in br.iter_mut().zip(yr).zip(gr) {
                            *b += inv_std[r] * (g - mg - y * mgy);
                        }
                    }
                }
            }
            &Op::Relu(a) => {
                let x = &nodes[a.0].value;
                acc_bcast(
                    nodes,
                    grads,
                    a,
                    Bcast::Same,
                    gout.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                );
            }
            &Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                acc_bcast(nodes, grads, a, Bcast::Same, gout.iter().zip(x).map(|(g, &x)| g * gelu_parts(x).1));
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                acc_bcast(nodes, grads, a, Bcast::Same, gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)));
            }
            &Op::Log(a) => {
                let x = &nodes[a.0].value;
                acc_bcast(nodes, grads, a, Bcast::Same, gout.iter().zip(x).map(|(g, x)| g / x));
            }
            &Op::Sum(a) => {
                let n = nodes[a.0].value.len();
                acc_bcast(nodes, grads, a, Bcast::Same, std::iter::repeat_n(gout[0], n));
            }
            &Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                acc_bcast(nodes, grads, a, Bcast::Same, std::iter::repeat_n(gout[0] / n as f64, n));
            }
            &Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(&nodes[a.0].shape, axis);
                if let Some(buf) = acc(nodes, grads, a) {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                buf[base + i] += gout[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { src, norms } => {
                let y = &node.value;
                let w = *node.shape.last().unwrap();
                if let Some(buf) = acc(nodes, grads, *src) {
                    for (r, ((yr, gr), br)) in y
                        .chunks(w)
                        .zip(gout.chunks(w))
                        .zip(buf.chunks_mut(w))
                        .enumerate()
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((b, y), g) in br.iter_mut().zip(yr).zip(gr) {
                            *b += (g - y * dot) / norms[r];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, created zeroed on first use; `None` when `v` is not tracked.
fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn acc_bcast(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    kind: Bcast,
    g: impl Iterator<Item = f64>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    if let (Bcast::Same, None) = (kind, &grads[v.0]) {
        grads[v.0] = Some(g.collect());
        return;
    }
    let Some(buf) = acc(nodes, grads, v) else { return };
    match kind {
        Bcast::Same => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        Bcast::Scalar => buf[0] += g.sum::<f64>(),
        Bcast::Row => {
            let n = buf.len();
            for (i, x) in g.enumerate() {
                buf[i % n] += x;
            }
        }
    }
}
