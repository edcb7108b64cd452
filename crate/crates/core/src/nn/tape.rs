//! Define-by-run reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the nodes in reverse, accumulating gradients into per-node buffers and
//! finally into per-parameter slots. Graph sizes vary per query (K+1 nodes),
//! which is why the tape is rebuilt per forward pass instead of being a
//! static graph.

use crate::error::{Error, Result};
use crate::nn::params::{Grads, Params};
use crate::nn::tensor::Tensor;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Value, Value),
    Transpose(Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    AddRowBias(Value, Value),
    Scale(Value, f64),
    AddConst(Value),
    Square(Value),
    Ln(Value),
    Sum(Value),
    Mean(Value),
    Elu(Value),
    LeakyRelu(Value, f64),
    SoftmaxRows(Value),
    L2Norm(Value),
    Concat { axis: usize, parts: Vec<Value> },
    Slice { input: Value, axis: usize, start: usize },
    Reshape(Value),
    OuterSum(Value, Value),
    FillDiag(Value),
    Conv2d { input: Value, weight: Value, bias: Value, stride: usize, pad: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Index into the `Params` this leaf was loaded from, if any.
    param: Option<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Value {
        self.nodes.push(Node { op, value, param: None });
        Value(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, t)
    }

    /// Parameter leaf; gradients accumulate into the parameter's slot, also
    /// when the same parameter is pushed several times.
    pub fn param(&mut self, params: &Params, name: &str) -> Result<Value> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        let value = params.at(idx).value.clone();
        self.nodes.push(Node { op: Op::Leaf, value, param: Some(idx) });
        Ok(Value(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape, self.value(b).shape),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(
            &self.value(a).data,
            &self.value(b).data,
            m,
            k,
            n,
            &mut out.data,
        );
        Ok(self.push(Op::Matmul(a, b), out))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.value(a).dims2();
        let src = &self.value(a).data;
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose(a), out))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Value, b: Value) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(shape_err(
                op_name,
                format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(&shape, data)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Op::Sub(a, b), Tensor::from_vec(&shape, data)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Op::Mul(a, b), Tensor::from_vec(&shape, data)))
    }

    /// (rows x cols) + bias(cols), broadcast over rows.
    pub fn add_row_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let (_, n) = self.value(x).dims2();
        if self.value(bias).len() != n {
            return Err(shape_err(
                "add_row_bias",
                format!("{:?} + bias {:?}", self.value(x).shape, self.value(bias).shape),
            ));
        }
        let bias_data = self.value(bias).data.clone();
        let mut out = self.value(x).clone();
        for row in out.data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&bias_data) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRowBias(x, bias), out))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_const(&mut self, a: Value, c: f64) -> Value {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v += c;
        }
        self.push(Op::AddConst(a), out)
    }

    pub fn square(&mut self, a: Value) -> Value {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v *= *v;
        }
        self.push(Op::Square(a), out)
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v = v.ln();
        }
        self.push(Op::Ln(a), out)
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let t = self.value(a);
        let s: f64 = t.data.iter().sum();
        let n = t.len().max(1) as f64;
        self.push(Op::Mean(a), Tensor::scalar(s / n))
    }

    /// ELU with alpha = 1: x for x >= 0, exp(x) - 1 otherwise.
    pub fn elu(&mut self, a: Value) -> Value {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = v.exp() - 1.0;
            }
        }
        self.push(Op::Elu(a), out)
    }

    pub fn leaky_relu(&mut self, a: Value, slope: f64) -> Value {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(Op::LeakyRelu(a, slope), out)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.leaky_relu(a, 0.0)
    }

    /// Numerically stable softmax along the last axis of a rank-2 tensor.
    /// Rows may contain -inf entries (masked positions get probability 0).
    pub fn softmax_rows(&mut self, a: Value) -> Result<Value> {
        let (rows, cols) = self.value(a).dims2();
        if cols == 0 {
            return Err(shape_err("softmax", "zero-width rows".into()));
        }
        let mut out = self.value(a).clone();
        for r in 0..rows {
            let row = &mut out.data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Value) -> Value {
        let n = self.value(a).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Op::L2Norm(a), Tensor::scalar(n))
    }

    /// Concatenate rank-2 tensors along axis 0 or 1.
    pub fn concat(&mut self, axis: usize, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() || axis > 1 {
            return Err(shape_err("concat", format!("axis {axis}, {} parts", parts.len())));
        }
        let (r0, c0) = self.value(parts[0]).dims2();
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.value(p).dims2();
            if axis == 0 {
                if c != c0 {
                    return Err(shape_err("concat", format!("cols {c} vs {c0}")));
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(shape_err("concat", format!("rows {r} vs {r0}")));
                }
                cols += c;
            }
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        match axis {
            0 => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    out.data[offset..offset + t.len()].copy_from_slice(&t.data);
                    offset += t.len();
                }
            }
            _ => {
                let mut col_off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2();
                    for i in 0..r {
                        out.data[i * cols + col_off..i * cols + col_off + c]
                            .copy_from_slice(&t.data[i * c..(i + 1) * c]);
                    }
                    col_off += c;
                }
            }
        }
        Ok(self.push(Op::Concat { axis, parts: parts.to_vec() }, out))
    }

    /// Contiguous slice of a rank-2 tensor along axis 0 (rows) or 1 (cols).
    pub fn slice(&mut self, input: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let (r, c) = self.value(input).dims2();
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start + len > bound || len == 0 {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{} of {:?}", start + len, self.value(input).shape),
            ));
        }
        let t = self.value(input);
        let out = if axis == 0 {
            Tensor::from_vec(&[len, c], t.data[start * c..(start + len) * c].to_vec())
        } else {
            let mut o = Tensor::zeros(&[r, len]);
            for i in 0..r {
                o.data[i * len..(i + 1) * len]
                    .copy_from_slice(&t.data[i * c + start..i * c + start + len]);
            }
            o
        };
        Ok(self.push(Op::Slice { input, axis, start }, out))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let len: usize = shape.iter().product();
        if len != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.value(a).shape, shape),
            ));
        }
        let out = Tensor::from_vec(shape, self.value(a).data.clone());
        Ok(self.push(Op::Reshape(a), out))
    }

    /// out[i][j] = u[i] + v[j] for column vectors u (n x 1) and v (n x 1).
    pub fn outer_sum(&mut self, u: Value, v: Value) -> Result<Value> {
        let (nu, cu) = self.value(u).dims2();
        let (nv, cv) = self.value(v).dims2();
        if cu != 1 || cv != 1 {
            return Err(shape_err(
                "outer_sum",
                format!("{:?} and {:?} must be column vectors", self.value(u).shape, self.value(v).shape),
            ));
        }
        let mut out = Tensor::zeros(&[nu, nv]);
        for i in 0..nu {
            let ui = self.value(u).data[i];
            for j in 0..nv {
                out.data[i * nv + j] = ui + self.value(v).data[j];
            }
        }
        Ok(self.push(Op::OuterSum(u, v), out))
    }

    /// Copy of a square matrix with the diagonal overwritten by a constant
    /// (no gradient flows through the diagonal).
    pub fn fill_diag(&mut self, a: Value, c: f64) -> Result<Value> {
        let (r, cdim) = self.value(a).dims2();
        if r != cdim {
            return Err(shape_err("fill_diag", format!("{:?} not square", self.value(a).shape)));
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            out.data[i * r + i] = c;
        }
        Ok(self.push(Op::FillDiag(a), out))
    }

    /// 2D convolution: input (C, H, W), weight (O, C, KH, KW), bias (O).
    pub fn conv2d(
        &mut self,
        input: Value,
        weight: Value,
        bias: Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let ishape = self.value(input).shape.clone();
        let wshape = self.value(weight).shape.clone();
        if ishape.len() != 3 || wshape.len() != 4 || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {ishape:?}, weight {wshape:?}, stride {stride}"),
            ));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, c_in2, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if c_in != c_in2 || self.value(bias).len() != c_out {
            return Err(shape_err(
                "conv2d",
                format!("input {ishape:?}, weight {wshape:?}, bias {:?}", self.value(bias).shape),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel ({kh}, {kw}) larger than padded input ({h}+2*{pad}, {w}+2*{pad})"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        conv2d_forward(
            &self.value(input).data,
            &self.value(weight).data,
            &self.value(bias).data,
            (c_in, h, w),
            (c_out, kh, kw),
            stride,
            pad,
            (oh, ow),
            &mut out.data,
        );
        Ok(self.push(Op::Conv2d { input, weight, bias, stride, pad }, out))
    }

    /// Reverse pass from a scalar loss node. Returns one gradient slot per
    /// parameter in the `Params` the leaves were loaded from.
    pub fn backward(&self, loss: Value, n_params: usize) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(
            &self.value(loss).shape.clone(),
            vec![1.0],
        ));
        let mut out = Grads::empty(n_params);

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(pidx) = node.param {
                out.accumulate(pidx, &g);
            }
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).dims2().1;
                    {
                        let ga = grad_slot(&mut grads, a.0, &self.value(*a).shape);
                        matmul_bt_acc(&g.data, &self.value(*b).data, m, k, n, &mut ga.data);
                    }
                    let gb = grad_slot(&mut grads, b.0, &self.value(*b).shape);
                    matmul_at_acc(&self.value(*a).data, &g.data, m, k, n, &mut gb.data);
                }
                Op::Transpose(a) => {
                    let (m, n) = self.value(*a).dims2();
                    let ga = grad_slot(&mut grads, a.0, &self.value(*a).shape);
                    for i in 0..m {
                        for j in 0..n {
                            ga.data[i * n + j] += g.data[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc_into(&mut grads, a.0, &self.nodes[a.0].value.shape, &g.data, 1.0);
                    acc_into(&mut grads, b.0, &self.nodes[b.0].value.shape, &g.data, 1.0);
                }
                Op::Sub(a, b) => {
                    acc_into(&mut grads, a.0, &self.nodes[a.0].value.shape, &g.data, 1.0);
                    acc_into(&mut grads, b.0, &self.nodes[b.0].value.shape, &g.data, -1.0);
                }
                Op::Mul(a, b) => {
                    {
                        let bv = &self.nodes[b.0].value.data;
                        let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                        for ((o, gi), bi) in ga.data.iter_mut().zip(&g.data).zip(bv) {
                            *o += gi * bi;
                        }
                    }
                    let av = &self.nodes[a.0].value.data;
                    let gb = grad_slot(&mut grads, b.0, &self.nodes[b.0].value.shape);
                    for ((o, gi), ai) in gb.data.iter_mut().zip(&g.data).zip(av) {
                        *o += gi * ai;
                    }
                }
                Op::AddRowBias(x, bias) => {
                    acc_into(&mut grads, x.0, &self.nodes[x.0].value.shape, &g.data, 1.0);
                    let n = self.value(*bias).len();
                    let gb = grad_slot(&mut grads, bias.0, &self.nodes[bias.0].value.shape);
                    for row in g.data.chunks(n) {
                        for (o, gi) in gb.data.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    acc_into(&mut grads, a.0, &self.nodes[a.0].value.shape, &g.data, *c);
                }
                Op::AddConst(a) => {
                    acc_into(&mut grads, a.0, &self.nodes[a.0].value.shape, &g.data, 1.0);
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value.data;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for ((o, gi), ai) in ga.data.iter_mut().zip(&g.data).zip(av) {
                        *o += 2.0 * ai * gi;
                    }
                }
                Op::Ln(a) => {
                    let av = &self.nodes[a.0].value.data;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for ((o, gi), ai) in ga.data.iter_mut().zip(&g.data).zip(av) {
                        *o += gi / ai;
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data[0];
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for o in ga.data.iter_mut() {
                        *o += gv;
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len().max(1) as f64;
                    let gv = g.data[0] / n;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for o in ga.data.iter_mut() {
                        *o += gv;
                    }
                }
                Op::Elu(a) => {
                    let yv = &node.value.data;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for ((o, gi), yi) in ga.data.iter_mut().zip(&g.data).zip(yv) {
                        let d = if *yi >= 0.0 { 1.0 } else { yi + 1.0 };
                        *o += gi * d;
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let xv = &self.nodes[a.0].value.data;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for ((o, gi), xi) in ga.data.iter_mut().zip(&g.data).zip(xv) {
                        let d = if *xi > 0.0 { 1.0 } else { *slope };
                        *o += gi * d;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (rows, cols) = node.value.dims2();
                    let y = &node.value.data;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = &mut ga.data[r * cols..(r + 1) * cols];
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
                Op::L2Norm(a) => {
                    let norm = node.value.data[0].max(1e-12);
                    let gv = g.data[0];
                    let xv = &self.nodes[a.0].value.data;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for (o, xi) in ga.data.iter_mut().zip(xv) {
                        *o += gv * xi / norm;
                    }
                }
                Op::Concat { axis, parts } => match axis {
                    0 => {
                        let mut offset = 0;
                        for &p in parts {
                            let len = self.value(p).len();
                            let shape = self.nodes[p.0].value.shape.clone();
                            let gp = grad_slot(&mut grads, p.0, &shape);
                            for (o, gi) in gp.data.iter_mut().zip(&g.data[offset..offset + len]) {
                                *o += gi;
                            }
                            offset += len;
                        }
                    }
                    _ => {
                        let cols = node.value.dims2().1;
                        let mut col_off = 0;
                        for &p in parts {
                            let (r, c) = self.value(p).dims2();
                            let shape = self.nodes[p.0].value.shape.clone();
                            let gp = grad_slot(&mut grads, p.0, &shape);
                            for i in 0..r {
                                for j in 0..c {
                                    gp.data[i * c + j] += g.data[i * cols + col_off + j];
                                }
                            }
                            col_off += c;
                        }
                    }
                },
                Op::Slice { input, axis, start } => {
                    let (rows, cols) = self.value(*input).dims2();
                    let shape = self.nodes[input.0].value.shape.clone();
                    let (gr, gc) = node.value.dims2();
                    let gi = grad_slot(&mut grads, input.0, &shape);
                    match axis {
                        0 => {
                            for (o, v) in gi.data[start * cols..start * cols + gr * gc]
                                .iter_mut()
                                .zip(&g.data)
                            {
                                *o += v;
                            }
                        }
                        _ => {
                            for i in 0..rows.min(gr) {
                                for j in 0..gc {
                                    gi.data[i * cols + start + j] += g.data[i * gc + j];
                                }
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    acc_into(&mut grads, a.0, &self.nodes[a.0].value.shape, &g.data, 1.0);
                }
                Op::OuterSum(u, v) => {
                    let (nu, nv) = node.value.dims2();
                    {
                        let gu = grad_slot(&mut grads, u.0, &self.nodes[u.0].value.shape);
                        for i in 0..nu {
                            gu.data[i] += g.data[i * nv..(i + 1) * nv].iter().sum::<f64>();
                        }
                    }
                    let gv = grad_slot(&mut grads, v.0, &self.nodes[v.0].value.shape);
                    for j in 0..nv {
                        let mut s = 0.0;
                        for i in 0..nu {
                            s += g.data[i * nv + j];
                        }
                        gv.data[j] += s;
                    }
                }
                Op::FillDiag(a) => {
                    let n = node.value.dims2().0;
                    let ga = grad_slot(&mut grads, a.0, &self.nodes[a.0].value.shape);
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                ga.data[i * n + j] += g.data[i * n + j];
                            }
                        }
                    }
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let ishape = self.value(*input).shape.clone();
                    let wshape = self.value(*weight).shape.clone();
                    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (c_out, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                    let (oh, ow) = (node.value.shape[1], node.value.shape[2]);
                    {
                        let gi = grad_slot(&mut grads, input.0, &ishape);
                        conv2d_backward_input(
                            &g.data, &self.nodes[weight.0].value.data,
                            (c_in, h, w), (c_out, kh, kw), *stride, *pad, (oh, ow),
                            &mut gi.data,
                        );
                    }
                    {
                        let gw = grad_slot(&mut grads, weight.0, &wshape);
                        conv2d_backward_weight(
                            &g.data, &self.nodes[input.0].value.data,
                            (c_in, h, w), (c_out, kh, kw), *stride, *pad, (oh, ow),
                            &mut gw.data,
                        );
                    }
                    let shape = self.nodes[bias.0].value.shape.clone();
                    let gb = grad_slot(&mut grads, bias.0, &shape);
                    for o in 0..c_out {
                        gb.data[o] += g.data[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape))
}

fn acc_into(grads: &mut [Option<Tensor>], idx: usize, shape: &[usize], g: &[f64], factor: f64) {
    let slot = grad_slot(grads, idx, shape);
    for (o, v) in slot.data.iter_mut().zip(g) {
        *o += factor * v;
    }
}

/// out(m x n) += a(m x k) * b(k x n)
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m x k) += g(m x n) * b(k x n)^T
fn matmul_bt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            orow[kk] += s;
        }
    }
}

/// out(k x n) += a(m x k)^T * g(m x n)
fn matmul_at_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (c_in, h, width): (usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    for o in 0..c_out {
        for yo in 0..oh {
            for xo in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..kh {
                        let iy = (yo * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            acc += w[((o * c_in + c) * kh + ky) * kw + kx]
                                * x[(c * h + iy as usize) * width + ix as usize];
                        }
                    }
                }
                out[(o * oh + yo) * ow + xo] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &[f64],
    w: &[f64],
    (c_in, h, width): (usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    gx: &mut [f64],
) {
    for o in 0..c_out {
        for yo in 0..oh {
            for xo in 0..ow {
                let gv = g[(o * oh + yo) * ow + xo];
                if gv == 0.0 {
                    continue;
                }
                for c in 0..c_in {
                    for ky in 0..kh {
                        let iy = (yo * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            gx[(c * h + iy as usize) * width + ix as usize] +=
                                gv * w[((o * c_in + c) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    g: &[f64],
    x: &[f64],
    (c_in, h, width): (usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    gw: &mut [f64],
) {
    for o in 0..c_out {
        for yo in 0..oh {
            for xo in 0..ow {
                let gv = g[(o * oh + yo) * ow + xo];
                if gv == 0.0 {
                    continue;
                }
                for c in 0..c_in {
                    for ky in 0..kh {
                        let iy = (yo * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            gw[((o * c_in + c) * kh + ky) * kw + kx] +=
                                gv * x[(c * h + iy as usize) * width + ix as usize];
                        }
                    }
                }
            }
        }
    }
}
