//! Eager tape: every op computes its value when recorded, and `backward`
//! replays the tape in reverse, visiting each node once.

use super::{ParamGrads, ParamSet, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Abs(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId),
    LayerNorm(NodeId),
    L2Normalize(NodeId),
    Gather(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    ColMean(NodeId),
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(usize),
}

struct Node<T> {
    op: Op,
    value: Value<T>,
    /// Per-row statistics kept for backward (layernorm 1/σ, l2 norms).
    aux: Vec<T>,
}

/// A recorded computation over an optional borrowed parameter set.
pub struct Graph<'p, T: Real = f32> {
    params: Option<&'p ParamSet<T>>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: gradients for every leaf (input or parameter
/// node) and every parameter that was reached.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }

    pub fn param(&self, idx: usize) -> Option<&Tensor<T>> {
        self.params.get(idx).and_then(Option::as_ref)
    }

    /// Adds the parameter gradients into a dense accumulator.
    pub fn accumulate_into(&self, acc: &mut ParamGrads<T>) {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                acc.at_mut(i).add_assign(g);
            }
        }
    }

    /// Dense per-parameter gradients; unreached parameters get zeros.
    pub fn into_param_grads(self, params: &ParamSet<T>) -> ParamGrads<T> {
        let mut acc = ParamGrads::zeros_like(params);
        self.accumulate_into(&mut acc);
        acc
    }
}

fn mismatch(op: &'static str, node: usize, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, node, detail }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> Option<&'p ParamSet<T>> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self.params.expect("param node without params").at(*i),
        }
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> NodeId {
        self.push_aux(op, value, Vec::new())
    }

    fn push_aux(&mut self, op: Op, value: Tensor<T>, aux: Vec<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(id.0))
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let params = self.params.ok_or(TensorError::NoParams)?;
        let idx = params.index_of(name)?;
        Ok(self.param_at(idx))
    }

    pub fn param_at(&mut self, idx: usize) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(idx),
            value: Value::Param(idx),
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(mismatch("matmul", self.next_id(), format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor { shape: vec![m, n], data: out }))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(mismatch("matmul_t", self.next_id(), format!("[{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(ar, &bd[j * k..(j + 1) * k]));
            }
        }
        Ok(self.push(Op::MatMulT(a, b), Tensor { shape: vec![m, n], data: out }))
    }

    // ------------------------------------------------------------ elementwise

    fn binary_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            return Err(mismatch(name, self.next_id(), format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor { shape: va.shape().to_vec(), data })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: NodeId,
        r: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(r)?;
        let (va, vr) = (self.value(a), self.value(r));
        let (m, n) = va.dims2();
        if vr.dims2() != (1, n) {
            return Err(mismatch(name, self.next_id(), format!("[{m},{n}] with row {:?}", vr.shape())));
        }
        let rd = vr.data();
        let mut data = Vec::with_capacity(m * n);
        for row in va.data().chunks_exact(n.max(1)) {
            data.extend(row.iter().zip(rd).map(|(x, y)| f(*x, *y)));
        }
        Ok(Tensor { shape: vec![m, n], data })
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let t = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(Op::AddRow(a, row), t))
    }

    /// Multiplies every row of `a` elementwise by a `[1, n]` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let t = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(Op::MulRow(a, row), t))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(T) -> T) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| f(*x)).collect(),
        };
        Ok(self.push(op, t))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let c = T::of(s);
        self.unary(a, Op::Scale(a, s), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let c = T::of(s);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    /// Clamps into `[lo, hi]`; gradient flows only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(l).min(h))
    }

    // ------------------------------------------------------------- row-wise

    /// Softmax over each row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let (m, n) = va.dims2();
        let mut data = Vec::with_capacity(m * n);
        for row in va.data().chunks_exact(n.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - mx).exp();
                z = z + e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / z;
            }
        }
        Ok(self.push(Op::Softmax(a), Tensor { shape: vec![m, n], data }))
    }

    /// Per-row standardization without affine terms. A constant row maps to
    /// zeros because the variance is offset by a small epsilon.
    pub fn layernorm(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let (m, n) = va.dims2();
        let eps = T::of(LAYERNORM_EPS);
        let nf = T::of(n as f64);
        let mut data = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for row in va.data().chunks_exact(n.max(1)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|&x| (x - mean) * r));
        }
        Ok(self.push_aux(Op::LayerNorm(a), Tensor { shape: vec![m, n], data }, rstd))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let (m, n) = va.dims2();
        let floor = T::of(NORM_FLOOR);
        let mut data = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for row in va.data().chunks_exact(n.max(1)) {
            let norm = dot(row, row).sqrt().max(floor);
            norms.push(norm);
            data.extend(row.iter().map(|&x| x / norm));
        }
        Ok(self.push_aux(Op::L2Normalize(a), Tensor { shape: vec![m, n], data }, norms))
    }

    // ------------------------------------------------------------ structural

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check(table)?;
        let vt = self.value(table);
        let (rows, n) = vt.dims2();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    node: self.next_id(),
                    index: id,
                    rows,
                });
            }
            data.extend_from_slice(vt.row_slice(id));
        }
        Ok(self.push(
            Op::Gather(table, ids.to_vec()),
            Tensor { shape: vec![ids.len(), n], data },
        ))
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(mismatch("concat", self.next_id(), format!("{} parts on axis {axis}", parts.len())));
        }
        for &p in parts {
            self.check(p)?;
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let t = if axis == 0 {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(mismatch("concat", self.next_id(), format!("row concat of {dims:?}")));
            }
            let m = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(m * n);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor { shape: vec![m, n], data }
        } else {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(mismatch("concat", self.next_id(), format!("column concat of {dims:?}")));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor { shape: vec![m, n], data }
        };
        Ok(self.push(Op::Concat(parts.to_vec(), axis), t))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let (m, n) = va.dims2();
        let limit = if axis == 0 { m } else { n };
        if axis > 1 || start > end || end > limit {
            return Err(mismatch(
                "slice",
                self.next_id(),
                format!("[{start},{end}) on axis {axis} of [{m},{n}]"),
            ));
        }
        let t = if axis == 0 {
            Tensor {
                shape: vec![end - start, n],
                data: va.data()[start * n..end * n].to_vec(),
            }
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for i in 0..m {
                data.extend_from_slice(&va.row_slice(i)[start..end]);
            }
            Tensor { shape: vec![m, w], data }
        };
        Ok(self.push(Op::Slice(a, axis, start, end), t))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.value(a).sum();
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let s = va.sum() / T::of(va.len().max(1) as f64);
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s)))
    }

    /// `[m, n] -> [m, 1]`: sum of each row.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let (m, n) = va.dims2();
        let data = va.data().chunks_exact(n.max(1)).map(|r| r.iter().copied().sum()).collect();
        Ok(self.push(Op::RowSum(a), Tensor { shape: vec![m, 1], data }))
    }

    /// `[m, n] -> [1, n]`: mean over rows.
    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let (m, n) = va.dims2();
        if m == 0 {
            return Err(mismatch("col_mean", self.next_id(), "mean of zero rows".into()));
        }
        let mut data = vec![T::zero(); n];
        for row in va.data().chunks_exact(n.max(1)) {
            for (d, x) in data.iter_mut().zip(row) {
                *d = *d + *x;
            }
        }
        let inv = T::one() / T::of(m as f64);
        for d in &mut data {
            *d = *d * inv;
        }
        Ok(self.push(Op::ColMean(a), Tensor { shape: vec![1, n], data }))
    }

    // -------------------------------------------------------------- backward

    /// Backward from a `[1, 1]` output with unit seed.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients<T>> {
        self.check(output).map_err(|_| {
            if self.nodes.is_empty() {
                TensorError::NoForward
            } else {
                TensorError::UnknownNode(output.0)
            }
        })?;
        let shape = self.value(output).shape().to_vec();
        if self.value(output).len() != 1 {
            return Err(TensorError::NonScalarOutput(shape));
        }
        self.backward(output, &Tensor::full(&shape, T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to every node and parameter. Linear in `seed`.
    pub fn backward(&self, output: NodeId, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::NoForward);
        }
        self.check(output)?;
        let out_shape = self.value(output).dims2();
        if seed.dims2() != out_shape {
            return Err(TensorError::SeedShape {
                seed: seed.shape().to_vec(),
                output: self.value(output).shape().to_vec(),
            });
        }
        let nparams = self.params.map_or(0, ParamSet::len);
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<T>>> = (0..nparams).map(|_| None).collect();
        grads[output.0] = Some(Tensor {
            shape: self.value(output).shape().to_vec(),
            data: seed.data().to_vec(),
        });

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let out = self.value(NodeId(id));
            match &node.op {
                Op::Input => grads[id] = Some(g),
                Op::Param(p) => {
                    accumulate(&mut pgrads[*p], g.clone());
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.dims2();
                    let n = vb.cols();
                    // dA = G Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        let gr = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(gr, &vb.data()[p * n..(p + 1) * n]);
                        }
                    }
                    // dB = Aᵀ G
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        let gr = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va.data()[i * k + p];
                            axpy(av, gr, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    add_grad(&mut grads, *a, Tensor { shape: va.shape().to_vec(), data: da });
                    add_grad(&mut grads, *b, Tensor { shape: vb.shape().to_vec(), data: db });
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.dims2();
                    let n = vb.rows();
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let mut da = vec![T::zero(); m * k];
                    matmul_acc(&g.data, vb.data(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); n * k];
                    for i in 0..m {
                        let ar = &va.data()[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(g.data[i * n + j], ar, &mut db[j * k..(j + 1) * k]);
                        }
                    }
                    add_grad(&mut grads, *a, Tensor { shape: va.shape().to_vec(), data: da });
                    add_grad(&mut grads, *b, Tensor { shape: vb.shape().to_vec(), data: db });
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *b, g.clone());
                    add_grad(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let neg = map(&g, |x| -x);
                    add_grad(&mut grads, *b, neg);
                    add_grad(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip(&g, self.value(*b), |gx, y| gx * y);
                    let db = zip(&g, self.value(*a), |gx, x| gx * x);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::AddRow(a, r) => {
                    let n = g.cols();
                    let mut dr = vec![T::zero(); n];
                    for row in g.data.chunks_exact(n.max(1)) {
                        axpy(T::one(), row, &mut dr);
                    }
                    add_grad(&mut grads, *r, Tensor { shape: self.value(*r).shape().to_vec(), data: dr });
                    add_grad(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (self.value(*a), self.value(*r));
                    let n = g.cols();
                    let mut dr = vec![T::zero(); n];
                    let mut da = Vec::with_capacity(g.len());
                    for (grow, arow) in g.data.chunks_exact(n.max(1)).zip(va.data().chunks_exact(n.max(1))) {
                        for j in 0..n {
                            dr[j] = dr[j] + grow[j] * arow[j];
                            da.push(grow[j] * vr.data()[j]);
                        }
                    }
                    add_grad(&mut grads, *a, Tensor { shape: va.shape().to_vec(), data: da });
                    add_grad(&mut grads, *r, Tensor { shape: vr.shape().to_vec(), data: dr });
                }
                Op::Scale(a, s) => {
                    let c = T::of(*s);
                    add_grad(&mut grads, *a, map(&g, |x| x * c));
                }
                Op::AddScalar(a) => add_grad(&mut grads, *a, g),
                Op::Tanh(a) => {
                    add_grad(&mut grads, *a, zip(&g, out, |gx, y| gx * (T::one() - y * y)));
                }
                Op::Relu(a) => {
                    let d = zip(&g, self.value(*a), |gx, x| if x > T::zero() { gx } else { T::zero() });
                    add_grad(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    add_grad(&mut grads, *a, zip(&g, self.value(*a), |gx, x| gx * gelu_grad(x)));
                }
                Op::Abs(a) => {
                    let d = zip(&g, self.value(*a), |gx, x| {
                        if x > T::zero() {
                            gx
                        } else if x < T::zero() {
                            -gx
                        } else {
                            T::zero()
                        }
                    });
                    add_grad(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    add_grad(&mut grads, *a, zip(&g, self.value(*a), |gx, x| gx / x));
                }
                Op::Sqrt(a) => {
                    let d = zip(&g, out, |gx, y| {
                        if y > T::zero() {
                            gx / (T::of(2.0) * y)
                        } else {
                            T::zero()
                        }
                    });
                    add_grad(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (l, h) = (T::of(*lo), T::of(*hi));
                    let d = zip(&g, self.value(*a), |gx, x| if x > l && x < h { gx } else { T::zero() });
                    add_grad(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let n = g.cols();
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.data.chunks_exact(n.max(1)).zip(out.data().chunks_exact(n.max(1))) {
                        let s = dot(gr, yr);
                        d.extend(gr.iter().zip(yr).map(|(gx, y)| *y * (*gx - s)));
                    }
                    add_grad(&mut grads, *a, Tensor { shape: g.shape.clone(), data: d });
                }
                Op::LayerNorm(a) => {
                    let n = g.cols();
                    let nf = T::of(n as f64);
                    let mut d = Vec::with_capacity(g.len());
                    for ((gr, yr), &r) in g
                        .data
                        .chunks_exact(n.max(1))
                        .zip(out.data().chunks_exact(n.max(1)))
                        .zip(&node.aux)
                    {
                        let gm = gr.iter().copied().sum::<T>() / nf;
                        let gy = dot(gr, yr) / nf;
                        d.extend(gr.iter().zip(yr).map(|(gx, y)| r * (*gx - gm - *y * gy)));
                    }
                    add_grad(&mut grads, *a, Tensor { shape: g.shape.clone(), data: d });
                }
                Op::L2Normalize(a) => {
                    let n = g.cols();
                    let mut d = Vec::with_capacity(g.len());
                    for ((gr, yr), &norm) in g
                        .data
                        .chunks_exact(n.max(1))
                        .zip(out.data().chunks_exact(n.max(1)))
                        .zip(&node.aux)
                    {
                        let s = dot(gr, yr);
                        d.extend(gr.iter().zip(yr).map(|(gx, y)| (*gx - *y * s) / norm));
                    }
                    add_grad(&mut grads, *a, Tensor { shape: g.shape.clone(), data: d });
                }
                Op::Gather(table, ids) => {
                    let vt = self.value(*table);
                    let n = vt.cols();
                    let mut dt = Tensor::zeros(vt.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g.data[k * n..(k + 1) * n], &mut dt.data[id * n..(id + 1) * n]);
                    }
                    add_grad(&mut grads, *table, dt);
                }
                Op::Concat(parts, axis) => {
                    if *axis == 0 {
                        let mut off = 0;
                        for &p in parts {
                            let len = self.value(p).len();
                            let piece = Tensor {
                                shape: self.value(p).shape().to_vec(),
                                data: g.data[off..off + len].to_vec(),
                            };
                            off += len;
                            add_grad(&mut grads, p, piece);
                        }
                    } else {
                        let m = g.rows();
                        let n = g.cols();
                        let mut off = 0;
                        for &p in parts {
                            let w = self.value(p).cols();
                            let mut data = Vec::with_capacity(m * w);
                            for i in 0..m {
                                data.extend_from_slice(&g.data[i * n + off..i * n + off + w]);
                            }
                            off += w;
                            add_grad(&mut grads, p, Tensor { shape: self.value(p).shape().to_vec(), data });
                        }
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    let va = self.value(*a);
                    let (m, n) = va.dims2();
                    let mut d = Tensor::zeros(va.shape());
                    if *axis == 0 {
                        d.data[start * n..end * n].copy_from_slice(&g.data);
                    } else {
                        let w = end - start;
                        for i in 0..m {
                            d.data[i * n + start..i * n + end].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                        }
                    }
                    add_grad(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    add_grad(&mut grads, *a, Tensor::full(va.shape(), g.data[0]));
                }
                Op::MeanAll(a) => {
                    let va = self.value(*a);
                    let v = g.data[0] / T::of(va.len().max(1) as f64);
                    add_grad(&mut grads, *a, Tensor::full(va.shape(), v));
                }
                Op::RowSum(a) => {
                    let va = self.value(*a);
                    let n = va.cols();
                    let mut data = Vec::with_capacity(va.len());
                    for &gx in &g.data {
                        data.extend(std::iter::repeat_n(gx, n));
                    }
                    add_grad(&mut grads, *a, Tensor { shape: va.shape().to_vec(), data });
                }
                Op::ColMean(a) => {
                    let va = self.value(*a);
                    let m = va.rows();
                    let inv = T::one() / T::of(m as f64);
                    let row: Vec<T> = g.data.iter().map(|x| *x * inv).collect();
                    let mut data = Vec::with_capacity(va.len());
                    for _ in 0..m {
                        data.extend_from_slice(&row);
                    }
                    add_grad(&mut grads, *a, Tensor { shape: va.shape().to_vec(), data });
                }
            }
        }

        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_grad<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    accumulate(&mut grads[id.0], g);
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|x| f(*x)).collect(),
    }
}

fn zip<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: other.shape.clone(),
        data: g.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s = s + *x * *y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// `out += a[m,k] · b[k,n]`.
fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
