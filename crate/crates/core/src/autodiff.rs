//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! execution order, so every node's inputs precede it and a single reverse
//! sweep over the tape is a valid topological order for backpropagation.
//!
//! Shapes are explicit: there is no broadcasting apart from the scalar
//! `scale`/`shift` helpers. Vectors have shape `[n]`, matrices `[rows, cols]`
//! and scalars `[1]`.

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    MeanOver(Var, usize),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Slice(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution tape for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    swept: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are reported for it after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// `[m, k] x [k] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::Dimension(format!("matvec {sw:?} x {sx:?}")));
        }
        let out = matvec(self.value(w), self.value(x).data());
        Ok(self.binary(w, x, Tensor::vector(out), Op::MatVec(w, x)))
    }

    /// `[k] x [k, n] -> [n]`.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.len() != 1 || sw[0] != sx[0] {
            return Err(Error::Dimension(format!("vecmat {sx:?} x {sw:?}")));
        }
        let out = vecmat(self.value(x).data(), self.value(w));
        Ok(self.binary(x, w, Tensor::vector(out), Op::VecMat(x, w)))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.binary(a, b, value, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        self.unary(a, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        Ok(self.zip(a, b, Op::Hadamard(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Shift(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.unary(a, Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean along `axis`; a vector reduces to a scalar.
    pub fn mean_over(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let value = match (t.shape.len(), axis) {
            (1, 0) => Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64),
            (2, 0) => {
                let (m, n) = (t.shape[0], t.shape[1]);
                let mut out = vec![0.0; n];
                for row in t.data.chunks(n) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::vector(out)
            }
            (2, 1) => {
                let n = t.shape[1];
                Tensor::vector(
                    t.data
                        .chunks(n)
                        .map(|r| r.iter().sum::<f64>() / n as f64)
                        .collect(),
                )
            }
            _ => {
                return Err(Error::Dimension(format!(
                    "mean_over axis {axis} of shape {:?}",
                    t.shape
                )))
            }
        };
        Ok(self.unary(a, value, Op::MeanOver(a, axis)))
    }

    /// Concatenates vectors (axis 0) or matrices along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let rank = self.shape(first).len();
        if axis >= rank || rank > 2 {
            return Err(Error::Dimension(format!(
                "concat axis {axis} of rank {rank}"
            )));
        }
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == rank
                && (rank == 1 || (axis == 0 && s[1] == self.shape(first)[1])
                    || (axis == 1 && s[0] == self.shape(first)[0]));
            if !ok {
                return Err(Error::Dimension(format!(
                    "concat {:?} with {:?} on axis {axis}",
                    self.shape(first),
                    s
                )));
            }
        }
        let value = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut lead = 0;
            for &p in parts {
                data.extend_from_slice(&self.value(p).data);
                lead += self.shape(p)[0];
            }
            let mut shape = self.shape(first).to_vec();
            shape[0] = lead;
            Tensor { shape, data }
        } else {
            let rows = self.shape(first)[0];
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    let t = self.value(p);
                    let c = t.shape[1];
                    data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
                }
            }
            Tensor {
                shape: vec![rows, cols],
                data,
            }
        };
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Selects rows of a matrix, or elements of a vector, by index.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.shape[0];
        let width = t.len() / rows;
        if indices.is_empty() {
            return Err(Error::Dimension("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&t.data[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape.clone();
        shape[0] = indices.len();
        let value = Tensor { shape, data };
        Ok(self.unary(a, value, Op::Gather(a, indices.to_vec())))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 1 || len == 0 || start + len > t.len() {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) of shape {:?}",
                start + len,
                t.shape
            )));
        }
        let value = Tensor::vector(t.data[start..start + len].to_vec());
        Ok(self.unary(a, value, Op::Slice(a, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(shape.to_vec(), t.data.clone())?;
        Ok(self.unary(a, value, Op::Reshape(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 1 {
            return Err(Error::Dimension(format!("softmax of shape {:?}", t.shape)));
        }
        let value = Tensor::vector(softmax(&t.data));
        Ok(self.unary(a, value, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "log_softmax of shape {:?}",
                t.shape
            )));
        }
        let value = Tensor::vector(log_softmax(&t.data));
        Ok(self.unary(a, value, Op::LogSoftmax(a)))
    }

    /// Single element (flat row-major index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::Dimension(format!(
                "pick {index} from {} elements",
                t.len()
            )));
        }
        let value = Tensor::scalar(t.data[index]);
        Ok(self.unary(a, value, Op::Pick(a, index)))
    }

    /// Reverse sweep from a scalar `loss`. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.swept {
            return Err(Error::Contract(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.swept = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(a, &|s| {
                    // dA = G B^T
                    for r in 0..m {
                        for c in 0..k {
                            let mut sum = 0.0;
                            for j in 0..n {
                                sum += g[r * n + j] * tb.data[c * n + j];
                            }
                            s[r * k + c] += sum;
                        }
                    }
                });
                acc(b, &|s| {
                    // dB = A^T G
                    for r in 0..m {
                        for c in 0..k {
                            let av = ta.data[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &g[r * n..(r + 1) * n];
                            for (o, gv) in s[c * n..(c + 1) * n].iter_mut().zip(row) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            &Op::MatVec(w, x) => {
                let (tw, tx) = (val(w), val(x));
                let k = tw.shape[1];
                acc(w, &|s| {
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        for (o, xv) in s[r * k..(r + 1) * k].iter_mut().zip(&tx.data) {
                            *o += gr * xv;
                        }
                    }
                });
                acc(x, &|s| {
                    for (r, &gr) in g.iter().enumerate() {
                        for (o, wv) in s.iter_mut().zip(&tw.data[r * k..(r + 1) * k]) {
                            *o += gr * wv;
                        }
                    }
                });
            }
            &Op::VecMat(x, w) => {
                let (tx, tw) = (val(x), val(w));
                let n = tw.shape[1];
                acc(x, &|s| {
                    for (r, o) in s.iter_mut().enumerate() {
                        *o += tw.data[r * n..(r + 1) * n]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
                acc(w, &|s| {
                    for (r, &xv) in tx.data.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, gv) in s[r * n..(r + 1) * n].iter_mut().zip(g) {
                            *o += xv * gv;
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &|s| add_into(s, g));
                acc(b, &|s| add_into(s, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &|s| add_into(s, g));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            &Op::Hadamard(a, b) => {
                let (ta, tb) = (val(a), val(b));
                acc(a, &|s| {
                    for ((o, gv), bv) in s.iter_mut().zip(g).zip(&tb.data) {
                        *o += gv * bv;
                    }
                });
                acc(b, &|s| {
                    for ((o, gv), av) in s.iter_mut().zip(g).zip(&ta.data) {
                        *o += gv * av;
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            &Op::Shift(a) => acc(a, &|s| add_into(s, g)),
            &Op::Sigmoid(a) => acc(a, &|s| {
                for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                    *o += gv * yv * (1.0 - yv);
                }
            }),
            &Op::Tanh(a) => acc(a, &|s| {
                for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                    *o += gv * (1.0 - yv * yv);
                }
            }),
            &Op::Exp(a) => acc(a, &|s| {
                for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                    *o += gv * yv;
                }
            }),
            &Op::Log(a) => {
                let ta = val(a);
                acc(a, &|s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(&ta.data) {
                        *o += gv / xv;
                    }
                })
            }
            &Op::Square(a) => {
                let ta = val(a);
                acc(a, &|s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(&ta.data) {
                        *o += 2.0 * gv * xv;
                    }
                })
            }
            &Op::Sum(a) => acc(a, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            &Op::MeanOver(a, axis) => {
                let ta = val(a);
                acc(a, &|s| match (ta.shape.len(), axis) {
                    (1, _) => {
                        let d = g[0] / ta.len() as f64;
                        s.iter_mut().for_each(|o| *o += d);
                    }
                    (_, 0) => {
                        let (m, n) = (ta.shape[0], ta.shape[1]);
                        for row in s.chunks_mut(n) {
                            for (o, gv) in row.iter_mut().zip(g) {
                                *o += gv / m as f64;
                            }
                        }
                    }
                    _ => {
                        let n = ta.shape[1];
                        for (row, gv) in s.chunks_mut(n).zip(g) {
                            row.iter_mut().for_each(|o| *o += gv / n as f64);
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let rank = node.value.shape.len();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        let seg = &g[offset..offset + len];
                        acc(p, &|s| add_into(s, seg));
                        offset += len;
                    }
                } else {
                    let rows = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let c = val(p).shape[1];
                        acc(p, &|s| {
                            for r in 0..rows {
                                let src = &g[r * total + col..r * total + col + c];
                                add_into(&mut s[r * c..(r + 1) * c], src);
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::Gather(a, indices) => {
                let ta = val(*a);
                let width = ta.len() / ta.shape[0];
                acc(*a, &|s| {
                    for (k, &row) in indices.iter().enumerate() {
                        add_into(
                            &mut s[row * width..(row + 1) * width],
                            &g[k * width..(k + 1) * width],
                        );
                    }
                });
            }
            &Op::Slice(a, start) => acc(a, &|s| add_into(&mut s[start..start + g.len()], g)),
            &Op::Reshape(a) => acc(a, &|s| add_into(s, g)),
            &Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(a, &|s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o += yv * (gv - dot);
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                acc(a, &|s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv - yv.exp() * total;
                    }
                });
            }
            &Op::Pick(a, index) => acc(a, &|s| s[index] += g[0]),
        }
    }
}

/// Result of a reverse sweep: one gradient buffer per tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; all zeros when `v` is not on
    /// a path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `W x` for `W: [m, k]`.
pub(crate) fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let k = w.shape[1];
    w.data
        .chunks(k)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `x^T W` for `W: [k, n]`.
pub(crate) fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.shape[1];
    let mut out = vec![0.0; n];
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w.data[r * n..(r + 1) * n]) {
            *o += xv * wv;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Central finite differences, used as an independent check on [`Graph::backward`].
pub mod gradcheck {
    use super::Tensor;

    pub const STEP: f64 = 1e-5;

    /// Numerical gradient of `f` with respect to `inputs[which]`.
    pub fn numeric_grad(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        which: usize,
    ) -> Vec<f64> {
        let mut work = inputs.to_vec();
        (0..inputs[which].len())
            .map(|i| {
                let orig = work[which].data()[i];
                work[which].data_mut()[i] = orig + STEP;
                let up = f(&work);
                work[which].data_mut()[i] = orig - STEP;
                let down = f(&work);
                work[which].data_mut()[i] = orig;
                (up - down) / (2.0 * STEP)
            })
            .collect()
    }

    /// Elementwise relative error with an absolute floor for near-zero entries.
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{max_rel_err, numeric_grad};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks a scalar-valued graph function against finite differences for every input.
    fn check(build: impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor], tol: f64) {
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<_> = ts.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v);
            let numeric = numeric_grad(&eval, inputs, i);
            let err = max_rel_err(analytic.data(), &numeric);
            assert!(err < tol, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(Tensor::matrix(1, 2, vec![1., 2.]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3., 4.]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.]);
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        check(
            |g, v| {
                let p = g.matmul(v[0], v[1]).unwrap();
                let h = g.hadamard(p, v[2]).unwrap();
                g.sum(h)
            },
            &[a, b, w],
            1e-6,
        );
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1., 2., 3.]));
        let m = g.constant(Tensor::vector(vec![0., 1., 0.]));
        let h = g.hadamard(a, m).unwrap();
        assert_eq!(g.value(h).data(), &[0., 2., 0.]);

        let x = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let mean = g.mean_over(x, 0).unwrap();
        assert_eq!(g.value(mean).data(), &[2., 3.]);
        let mean1 = g.mean_over(x, 1).unwrap();
        assert_eq!(g.value(mean1).data(), &[1.5, 3.5]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain(_))));
        let b = g.constant(Tensor::vector(vec![-2.0]));
        assert!(matches!(g.log(b), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 1000.0, 1000.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let empty = Tensor::new(vec![0], vec![]);
        assert!(matches!(empty, Err(Error::Dimension(_))));
        let m = g.constant(Tensor::matrix(1, 2, vec![0., 0.]).unwrap());
        assert!(g.softmax(m).is_err());
    }

    #[test]
    fn softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[7]);
        let w = rand_tensor(&mut rng, &[7]);
        check(
            |g, v| {
                let s = g.softmax(v[0]).unwrap();
                let h = g.hadamard(s, v[1]).unwrap();
                g.sum(h)
            },
            &[x.clone(), w.clone()],
            1e-6,
        );
        check(
            |g, v| {
                let s = g.log_softmax(v[0]).unwrap();
                let h = g.hadamard(s, v[1]).unwrap();
                g.sum(h)
            },
            &[x, w],
            1e-6,
        );
    }

    #[test]
    fn every_op_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        let x = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        check(
            |g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                let d = g.sub(s, v[1]).unwrap();
                let t = g.tanh(d);
                let sg = g.sigmoid(v[1]);
                let c = g.concat(&[t, sg], 0).unwrap();
                let c1 = g.concat(&[t, sg], 1).unwrap();
                let m0 = g.mean_over(c, 0).unwrap();
                let m1 = g.mean_over(c1, 1).unwrap();
                let e = g.exp(m0);
                let l = g.log(e).unwrap();
                let rows = g.gather(c, &[3, 0, 3]).unwrap();
                let r = g.reshape(rows, &[9]).unwrap();
                let sl = g.slice(r, 2, 5).unwrap();
                let q = g.square(sl);
                let mv = g.matvec(v[0], v[2]).unwrap();
                let vm = g.vecmat(v[2], v[3]).unwrap();
                let sh = g.shift(vm, 0.5);
                let p = g.pick(sh, 2).unwrap();
                let terms = [g.sum(l), g.sum(q), g.sum(m1), g.sum(mv), p];
                let all = g.concat(&terms, 0).unwrap();
                let sc = g.scale(all, 0.7);
                g.sum(sc)
            },
            &[a, b, x, w],
            1e-6,
        );
    }

    #[test]
    fn backward_scalar_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert!((grads.get(x).item() - 6.0).abs() < 1e-12);

        // two branches sharing x accumulate
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0);
        let b = g.square(x);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert!((grads.get(x).item() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get(x).shape(), &[2]);
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::zeros(&[2, 3]).len(), 6);
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_simplex(xs in proptest::collection::vec(-500.0f64..500.0, 1..20)) {
            let p = softmax(&xs);
            let s: f64 = p.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn gradients_are_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[3, 3]);
            let run = || {
                let mut g = Graph::new();
                let v = g.param(a.clone());
                let t = g.tanh(v);
                let m = g.matmul(t, v).unwrap();
                let s = g.sum(m);
                let grads = g.backward(s).unwrap();
                (g.value(s).item().to_bits(), grads.get(v))
            };
            let (l1, g1) = run();
            let (l2, g2) = run();
            proptest::prop_assert_eq!(l1, l2);
            proptest::prop_assert_eq!(g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
