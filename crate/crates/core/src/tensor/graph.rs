use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, S),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<S>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    FrobeniusNorm(Var),
    RowNorm(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    PickPerRow(Var, Vec<usize>),
    RowMaxExcept(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of forward operations.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers. A graph is owned by one execution context; build a fresh one
/// per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by a reverse sweep, indexed by node.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn add(&mut self, v: Var, shape: &[usize], g: &[S]) {
        if self.grads.len() <= v.0 {
            self.grads.resize(v.0 + 1, None);
        }
        match &mut self.grads[v.0] {
            Some(t) => {
                for (a, &b) in t.data.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: shape.to_vec(),
                    data: g.to_vec(),
                })
            }
        }
    }
}

fn dim_err<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.data[0]
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a node's value into a new constant leaf; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(dim_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// `m[N×K] + row[1×K]` added to every row (affine bias).
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (&self.nodes[m.0].value, &self.nodes[row.0].value);
        let (_, k) = tm.dims2()?;
        if tr.shape != [1, k] {
            return Err(dim_err("add_row", tm, tr));
        }
        let mut value = tm.clone();
        for chunk in value.data.chunks_mut(k) {
            for (x, &b) in chunk.iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        self.push("add_row", value, Op::AddRow(m, row), &[m, row])
    }

    /// Multiplies row `i` of `m[N×K]` by `s[N×1]`ᵢ.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (tm, ts) = (&self.nodes[m.0].value, &self.nodes[s.0].value);
        let (n, k) = tm.dims2()?;
        if ts.shape != [n, 1] {
            return Err(dim_err("scale_rows", tm, ts));
        }
        let mut value = tm.clone();
        for (chunk, &c) in value.data.chunks_mut(k).zip(&ts.data) {
            for x in chunk {
                *x *= c;
            }
        }
        self.push("scale_rows", value, Op::ScaleRows(m, s), &[m, s])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(S::zero()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[a.0].value.data.iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        self.unary("log", a, Op::Log(a), |x| x.ln())
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: S) -> Result<Var> {
        self.unary("clamp_min", a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (_, k) = t.dims2()?;
        if !t.is_finite() {
            return Err(Error::Numeric("softmax_rows input is not finite".into()));
        }
        let mut out = vec![S::zero(); t.numel()];
        for (row, o) in t.data.chunks(k).zip(out.chunks_mut(k)) {
            kernels::softmax_row(row, o);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (_, k) = t.dims2()?;
        if !t.is_finite() {
            return Err(Error::Numeric("log_softmax_rows input is not finite".into()));
        }
        let mut out = vec![S::zero(); t.numel()];
        for (row, o) in t.data.chunks(k).zip(out.chunks_mut(k)) {
            kernels::log_softmax_row(row, o);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Divides each row by its Euclidean norm. Rows with norm below `1e-12`
    /// are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (_, k) = t.dims2()?;
        let floor = S::lit(1e-12);
        let mut norms = Vec::with_capacity(t.shape[0]);
        let mut out = t.data.clone();
        for (i, row) in out.chunks_mut(k).enumerate() {
            let n = kernels::norm(row);
            if !(n >= floor) {
                return Err(Error::DegenerateEmbedding {
                    row: i,
                    norm: n.as_f64(),
                });
            }
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows(a, norms), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
            .expect("sum of finite values")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().copied().sum::<S>() / S::from_usize_lossy(t.numel());
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
            .expect("mean of finite values")
    }

    /// `N×K → N×1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, k) = t.dims2()?;
        let data = t.data.chunks(k).map(|r| r.iter().copied().sum()).collect();
        self.push("row_sum", Tensor { shape: vec![n, 1], data }, Op::RowSum(a), &[a])
    }

    /// Frobenius (flattened Euclidean) norm. The gradient at the origin is
    /// taken to be zero.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let n = kernels::norm(&self.nodes[a.0].value.data);
        self.push("frobenius_norm", Tensor::scalar(n), Op::FrobeniusNorm(a), &[a])
            .expect("norm of finite values")
    }

    /// `N×K → N×1` per-row Euclidean norms; zero rows get zero gradient.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, k) = t.dims2()?;
        let data = t.data.chunks(k).map(kernels::norm).collect();
        self.push("row_norm", Tensor { shape: vec![n, 1], data }, Op::RowNorm(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.shape[0]) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {:?}",
                t.shape
            )));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let value = t.select_rows(idx);
        self.push("gather_rows", value, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let tail = self.nodes[first.0].value.shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape[1..] != tail[..] {
                return Err(dim_err("concat_rows", &self.nodes[first.0].value, t));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat_rows", Tensor { shape, data }, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `N×K → N×1`, picking column `cols[i]` from row `i`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, k) = t.dims2()?;
        if cols.len() != n {
            return Err(Error::Dimension {
                op: "pick_per_row",
                lhs: t.shape.clone(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!("pick_per_row column {bad} out of range (K={k})")));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| t.data[i * k + c]).collect();
        self.push(
            "pick_per_row",
            Tensor { shape: vec![n, 1], data },
            Op::PickPerRow(a, cols.to_vec()),
            &[a],
        )
    }

    /// `N×K → N×1`: per-row maximum over all columns except `excluded[i]`.
    /// Needs `K ≥ 2`. The gradient routes to the first maximizing column.
    pub fn row_max_except(&mut self, a: Var, excluded: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, k) = t.dims2()?;
        if k < 2 || excluded.len() != n {
            return Err(Error::Dimension {
                op: "row_max_except",
                lhs: t.shape.clone(),
                rhs: vec![excluded.len()],
            });
        }
        let mut arg = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for (i, row) in t.data.chunks(k).enumerate() {
            let mut best: Option<(usize, S)> = None;
            for (j, &x) in row.iter().enumerate() {
                if j == excluded[i] {
                    continue;
                }
                if best.map_or(true, |(_, b)| x > b) {
                    best = Some((j, x));
                }
            }
            let (j, x) = best.expect("k >= 2");
            arg.push(j);
            data.push(x);
        }
        self.push(
            "row_max_except",
            Tensor { shape: vec![n, 1], data },
            Op::RowMaxExcept(a, arg),
            &[a],
        )
    }

    /// Reverse sweep from a one-element `loss`. Gradients start from zero on
    /// every call.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let mut grads = Gradients { grads: Vec::new() };
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Graph::backward`] but adds into `acc` instead of starting fresh.
    pub fn backward_into(&self, loss: Var, acc: &mut Gradients<S>) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut work: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut work);
            acc.add(Var(id), &node.value.shape, &g);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<S>, g: &[S], work: &mut [Option<Vec<S>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Vec<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut work[v.0] {
                Some(buf) => {
                    for (a, b) in buf.iter_mut().zip(contrib) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&val(*a).data, &val(*b).data);
                send(*a, g.iter().zip(tb).map(|(&d, &x)| d * x).collect());
                send(*b, g.iter().zip(ta).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&d| d * *c).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::AddRow(m, row) => {
                let k = val(*row).numel();
                let mut db = vec![S::zero(); k];
                for chunk in g.chunks(k) {
                    for (acc, &d) in db.iter_mut().zip(chunk) {
                        *acc += d;
                    }
                }
                send(*m, g.to_vec());
                send(*row, db);
            }
            Op::ScaleRows(m, s) => {
                let (tm, ts) = (val(*m), val(*s));
                let k = tm.shape[1];
                let mut dm = g.to_vec();
                let mut ds = Vec::with_capacity(ts.numel());
                for ((dchunk, xchunk), &c) in dm.chunks_mut(k).zip(tm.data.chunks(k)).zip(&ts.data) {
                    ds.push(kernels::dot(dchunk, xchunk));
                    for d in dchunk.iter_mut() {
                        *d *= c;
                    }
                }
                send(*m, dm);
                send(*s, ds);
            }
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(&d, &x)| if x > S::zero() { d } else { S::zero() })
                    .collect(),
            ),
            Op::Tanh(a) => send(*a, g.iter().zip(y).map(|(&d, &t)| d * (S::one() - t * t)).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(&d, &e)| d * e).collect()),
            Op::Log(a) => send(*a, g.iter().zip(&val(*a).data).map(|(&d, &x)| d / x).collect()),
            Op::ClampMin(a, floor) => send(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(&d, &x)| if x > *floor { d } else { S::zero() })
                    .collect(),
            ),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let p = tb.shape[1];
                if self.nodes[a.0].requires_grad {
                    send(*a, kernels::matmul_nt(g, &tb.data, m, p, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, kernels::matmul_tn(&ta.data, g, m, k, p));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape[0], node.value.shape[1]);
                send(*a, kernels::transpose(g, r, c));
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::SoftmaxRows(a) => {
                let k = node.value.shape[1];
                let mut dx = vec![S::zero(); g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let inner = kernels::dot(gr, yr);
                    for ((o, &d), &p) in dxr.iter_mut().zip(gr).zip(yr) {
                        *o = p * (d - inner);
                    }
                }
                send(*a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let k = node.value.shape[1];
                let mut dx = vec![S::zero(); g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let total: S = gr.iter().copied().sum();
                    for ((o, &d), &ly) in dxr.iter_mut().zip(gr).zip(yr) {
                        *o = d - ly.exp() * total;
                    }
                }
                send(*a, dx);
            }
            Op::L2NormalizeRows(a, norms) => {
                let k = node.value.shape[1];
                let mut dx = vec![S::zero(); g.len()];
                for (((dxr, gr), yr), &n) in dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)).zip(norms) {
                    let inner = kernels::dot(gr, yr);
                    for ((o, &d), &u) in dxr.iter_mut().zip(gr).zip(yr) {
                        *o = (d - u * inner) / n;
                    }
                }
                send(*a, dx);
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                send(*a, vec![g[0] / S::from_usize_lossy(n); n]);
            }
            Op::RowSum(a) => {
                let k = val(*a).shape[1];
                send(*a, g.iter().flat_map(|&d| std::iter::repeat(d).take(k)).collect());
            }
            Op::FrobeniusNorm(a) => {
                let n = y[0];
                let x = &val(*a).data;
                if n > S::zero() {
                    send(*a, x.iter().map(|&v| g[0] * v / n).collect());
                } else {
                    send(*a, vec![S::zero(); x.len()]);
                }
            }
            Op::RowNorm(a) => {
                let t = val(*a);
                let k = t.shape[1];
                let mut dx = vec![S::zero(); t.numel()];
                for (((dxr, xr), &n), &d) in dx.chunks_mut(k).zip(t.data.chunks(k)).zip(y).zip(g) {
                    if n > S::zero() {
                        for (o, &v) in dxr.iter_mut().zip(xr) {
                            *o = d * v / n;
                        }
                    }
                }
                send(*a, dx);
            }
            Op::GatherRows(a, idx) => {
                let t = val(*a);
                let (_, w) = t.rows_and_width();
                let mut dx = vec![S::zero(); t.numel()];
                for (gr, &i) in g.chunks(w).zip(idx) {
                    for (o, &d) in dx[i * w..(i + 1) * w].iter_mut().zip(gr) {
                        *o += d;
                    }
                }
                send(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    send(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::PickPerRow(a, cols) | Op::RowMaxExcept(a, cols) => {
                let t = val(*a);
                let k = t.shape[1];
                let mut dx = vec![S::zero(); t.numel()];
                for (i, (&c, &d)) in cols.iter().zip(g).enumerate() {
                    dx[i * k + c] += d;
                }
                send(*a, dx);
            }
        }
    }
}
