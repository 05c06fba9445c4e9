use super::{numel, split_axis, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// rhs shape is a trailing suffix of lhs shape; repeats every `rhs.len()`.
    Suffix,
    Scalar,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, T),
    Offset(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Exp(Var),
    Log(Var),
    Powf(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, Vec<usize>),
    SumAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    LayerNorm(Var, Vec<T>),
    L2Normalize(Var, Vec<T>),
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumers and a reverse scan is a reverse topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) consumed: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + three * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if numel(b) == 1 {
        Ok(Broadcast::Scalar)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Broadcast::Suffix)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

#[inline]
pub(crate) fn bidx(kind: Broadcast, i: usize, blen: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Suffix => i % blen,
        Broadcast::Scalar => 0,
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; handles to them
    /// become invalid. Lets inference loops reuse bound parameters.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf from raw parts.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(self.leaf(t))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, for leaves.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// A constant copy of `v`; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl Fn(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let kind = broadcast_kind(name, sa, sb)?;
        let shape = sa.to_vec();
        let (da, db) = (self.data(a), self.data(b));
        let blen = db.len();
        let data: Vec<T> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[bidx(kind, i, blen)]))
            .collect();
        self.push(name, shape, data, make(a, b, kind), &[a, b])
    }

    /// `a + b`; `b` may be a scalar or a trailing-suffix shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).iter().any(|v| v.is_zero()) {
            return Err(TensorError::Domain { op: "div" });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, Op::Scale(x, c), &[x])
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let data = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("offset", shape, data, Op::Offset(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]` (`[.., k, m]` when `ta`); `b` is either a shared
    /// rank-2 `[k, n]` or carries the same leading batch axes as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let ra = sa.len();
        let rb = sb.len();
        let (m, k) = if ta {
            (sa[ra - 1], sa[ra - 2])
        } else {
            (sa[ra - 2], sa[ra - 1])
        };
        let (kb, n) = if tb {
            (sb[rb - 1], sb[rb - 2])
        } else {
            (sb[rb - 2], sb[rb - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = rb == 2;
        if !shared_b && sa[..ra - 2] != sb[..rb - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let a_st = if ta { (1, m as isize) } else { (k as isize, 1) };
        let b_st = if tb { (1, k as isize) } else { (n as isize, 1) };
        {
            let da = self.data(a);
            let db = self.data(b);
            for bi in 0..batch {
                let ao = bi * m * k;
                let bo = if shared_b { 0 } else { bi * k * n };
                let co = bi * m * n;
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[ao..ao + m * k],
                    a_st,
                    &db[bo..bo + k * n],
                    b_st,
                    T::zero(),
                    &mut out[co..co + m * n],
                    (n as isize, 1),
                );
            }
        }
        let op = Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
            shared_b,
        };
        self.push("matmul", shape, out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(TensorError::ShapeMismatch {
                    op: "permute",
                    lhs: shape,
                    rhs: perm.to_vec(),
                });
            }
        }
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(x), &shape, perm);
        self.push(
            "permute",
            out_shape,
            data,
            Op::Permute(x, perm.to_vec()),
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if numel(old) != numel(shape) || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(TensorError::Domain { op: "concat" })?)
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let np = self.shape(p)[axis];
                let d = self.data(p);
                data.extend_from_slice(&d[o * np * inner..(o + 1) * np * inner]);
            }
        }
        self.push(
            "concat",
            shape,
            data,
            Op::Concat(parts.to_vec(), axis),
            parts,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", out_shape, data, Op::Slice { x, axis, start }, &[x])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() || shape.contains(&0) {
            return Err(TensorError::BadLength {
                op: "gather",
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        let d = self.data(x);
        let bound = d.len();
        let mut data = Vec::with_capacity(index.len());
        for &i in index {
            if i >= bound {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    bound,
                });
            }
            data.push(d[i]);
        }
        self.push(
            "gather",
            shape.to_vec(),
            data,
            Op::Gather(x, index.to_vec()),
            &[x],
        )
    }

    /// Row lookup into a rank-2 table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            data,
            Op::GatherRows(table, ids.to_vec()),
            &[table],
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, data, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::Domain { op: "log" });
        }
        self.unary("log", x, T::ln, Op::Log(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let integral = p.fract() == 0.0;
        let bad = self
            .data(x)
            .iter()
            .any(|&v| (v < T::zero() && !integral) || (v.is_zero() && p < 0.0));
        if bad {
            return Err(TensorError::Domain { op: "powf" });
        }
        let pt = T::from_f64_lossy(p);
        self.unary("powf", x, |v| v.powf(pt), Op::Powf(x, pt))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            Op::Sigmoid(x),
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    fn reduce(
        &mut self,
        name: &'static str,
        x: Var,
        axis: usize,
        f: impl Fn(&[T], usize, usize) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(name, &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                data.push(f(&d[o * n * inner + i..], n, inner));
            }
        }
        self.push(name, reduced_shape(&shape, axis), data, op, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(
            "sum",
            x,
            axis,
            |d, n, inner| (0..n).map(|j| d[j * inner]).sum(),
            Op::Sum(x, axis),
        )
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(
            "mean",
            x,
            axis,
            |d, n, inner| (0..n).map(|j| d[j * inner]).sum::<T>() / T::from_usize(n).unwrap(),
            Op::Mean(x, axis),
        )
    }

    /// Max along `axis`; ties resolve to the first maximal entry.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("max", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = 0;
                for j in 1..n {
                    if d[base + j * inner] > d[base + best * inner] {
                        best = j;
                    }
                }
                data.push(d[base + best * inner]);
                arg.push(base + best * inner);
            }
        }
        self.push(
            "max",
            reduced_shape(&shape, axis),
            data,
            Op::Max(x, arg),
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.push("sum_all", Vec::new(), vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    fn along_axis(
        &mut self,
        name: &'static str,
        x: Var,
        axis: usize,
        f: impl Fn(&[T], &mut [T]),
        op: Op<T>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(name, &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        let mut lane = vec![T::zero(); n];
        let mut res = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for j in 0..n {
                    lane[j] = d[base + j * inner];
                }
                f(&lane, &mut res);
                for j in 0..n {
                    out[base + j * inner] = res[j];
                }
            }
        }
        self.push(name, shape, out, op, &[x])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.along_axis("softmax", x, axis, softmax_lane, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.along_axis(
            "log_softmax",
            x,
            axis,
            |lane, out| {
                let lse = logsumexp_lane(lane);
                for (o, &v) in out.iter_mut().zip(lane) {
                    *o = v - lse;
                }
            },
            Op::LogSoftmax(x, axis),
        )
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(
            "logsumexp",
            x,
            axis,
            |d, n, inner| {
                let lane: Vec<T> = (0..n).map(|j| d[j * inner]).collect();
                logsumexp_lane(&lane)
            },
            Op::LogSumExp(x, axis),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::BadAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        let src = self.data(x);
        let rows = src.len() / d;
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(src.len());
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mu) * rstd));
            rstds.push(rstd);
        }
        self.push("layer_norm", shape, out, Op::LayerNorm(x, rstds), &[x])
    }

    /// Scales every vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::BadAxis {
            op: "l2_normalize",
            axis: 0,
            rank: 0,
        })?;
        let src = self.data(x);
        let rows = src.len() / d;
        let mut out = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(TensorError::Domain { op: "l2_normalize" });
            }
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        self.push("l2_normalize", shape, out, Op::L2Normalize(x, norms), &[x])
    }

    /// Cosine similarity of paired rows of two `[n, d]` tensors, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        let prod = self.mul(an, bn)?;
        let last = self.shape(prod).len() - 1;
        self.sum(prod, last)
    }

    /// Linear layer `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }
}

pub(crate) fn logsumexp_lane<T: Real>(lane: &[T]) -> T {
    let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = lane.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_lane<T: Real>(lane: &[T], out: &mut [T]) {
    let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(lane) {
        *o = (v - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}
