use super::tape::{bidx, gelu_parts, permute_data, softmax_lane, Broadcast, Node, Op, Tape, Var};
use super::{numel, split_axis, Real, Result, TensorError};

type Grads<T> = Vec<Option<Vec<T>>>;

fn slot<'g, T: Real>(grads: &'g mut Grads<T>, nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Folds a full-shape gradient into the (possibly broadcast) rhs slot.
fn reduce_into<T: Real>(dst: &mut [T], kind: Broadcast, full: impl Iterator<Item = T>) {
    let blen = dst.len();
    for (i, v) in full.enumerate() {
        let j = bidx(kind, i, blen);
        dst[j] = dst[j] + v;
    }
}

impl<T: Real> Tape<T> {
    /// Reverse pass from a scalar root.
    ///
    /// Afterwards every trainable leaf reachable from `root` holds
    /// `d root / d leaf` in its gradient slot, readable via [`Tape::grad`].
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let rshape = self.shape(root).to_vec();
        if numel(&rshape) != 1 {
            return Err(TensorError::NotScalar(rshape));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Grads<T> = vec![None; nodes.len()];
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let len = node.value.len();
                node.value.grad = Some(g.unwrap_or_else(|| vec![T::zero(); len]));
            }
        }
        Ok(())
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut Grads<T>) {
    let out = &nodes[i].value;
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b, kind) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                reduce_into(db, *kind, g.iter().copied());
            }
        }
        Op::Sub(a, b, kind) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                reduce_into(db, *kind, g.iter().map(|&x| -x));
            }
        }
        Op::Mul(a, b, kind) => {
            let (av, bv) = (val(*a), val(*b));
            let blen = bv.len();
            if let Some(da) = slot(grads, nodes, *a) {
                for (idx, d) in da.iter_mut().enumerate() {
                    *d = *d + g[idx] * bv[bidx(*kind, idx, blen)];
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                reduce_into(db, *kind, g.iter().zip(av).map(|(&x, &a)| x * a));
            }
        }
        Op::Div(a, b, kind) => {
            let (av, bv) = (val(*a), val(*b));
            let blen = bv.len();
            if let Some(da) = slot(grads, nodes, *a) {
                for (idx, d) in da.iter_mut().enumerate() {
                    *d = *d + g[idx] / bv[bidx(*kind, idx, blen)];
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                reduce_into(
                    db,
                    *kind,
                    g.iter().zip(av).enumerate().map(|(idx, (&x, &a))| {
                        let b = bv[bidx(*kind, idx, blen)];
                        -x * a / (b * b)
                    }),
                );
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c);
            }
        }
        Op::Offset(x) | Op::Reshape(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
            }
        }
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
            shared_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let a_st: (isize, isize) = if *ta {
                (1, m as isize)
            } else {
                (k as isize, 1)
            };
            let b_st: (isize, isize) = if *tb {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            let g_st = (n as isize, 1);
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                for bi in 0..*batch {
                    let bo = if *shared_b { 0 } else { bi * k * n };
                    let ao = bi * m * k;
                    // dOpA[m,k] = dC[m,n] * op(B)^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[bi * m * n..(bi + 1) * m * n],
                        g_st,
                        &bv[bo..bo + k * n],
                        (b_st.1, b_st.0),
                        T::one(),
                        &mut da[ao..ao + m * k],
                        a_st,
                    );
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for bi in 0..*batch {
                    let bo = if *shared_b { 0 } else { bi * k * n };
                    let ao = bi * m * k;
                    // dOpB[k,n] = op(A)^T * dC[m,n]
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av[ao..ao + m * k],
                        (a_st.1, a_st.0),
                        &g[bi * m * n..(bi + 1) * m * n],
                        g_st,
                        T::one(),
                        &mut db[bo..bo + k * n],
                        b_st,
                    );
                }
            }
        }
        Op::Permute(x, perm) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let back = permute_data(g, out.shape(), &inv);
                dx.iter_mut().zip(back).for_each(|(d, v)| *d = *d + v);
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let np = nodes[p.0].value.shape()[*axis];
                if let Some(dp) = slot(grads, nodes, p) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + np) * inner];
                        let dst = &mut dp[o * np * inner..(o + 1) * np * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                offset += np;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = nodes[x.0].value.shape().to_vec();
            let len = out.shape()[*axis];
            if let Some(dx) = slot(grads, nodes, *x) {
                let (outer, n, inner) = split_axis(&in_shape, *axis);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dx[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
        Op::Gather(x, index) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (&j, &v) in index.iter().zip(g) {
                    dx[j] = dx[j] + v;
                }
            }
        }
        Op::GatherRows(table, ids) => {
            let d = nodes[table.0].value.shape()[1];
            if let Some(dt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] = dt[id * d + c] + g[r * d + c];
                    }
                }
            }
        }
        Op::Exp(x) => {
            let y = out.data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for j in 0..dx.len() {
                    dx[j] = dx[j] + g[j] * y[j];
                }
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            if let Some(dx) = slot(grads, nodes, *x) {
                for j in 0..dx.len() {
                    dx[j] = dx[j] + g[j] / xv[j];
                }
            }
        }
        Op::Powf(x, p) => {
            let xv = val(*x);
            if let Some(dx) = slot(grads, nodes, *x) {
                for j in 0..dx.len() {
                    dx[j] = dx[j] + g[j] * *p * xv[j].powf(*p - T::one());
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for j in 0..dx.len() {
                    dx[j] = dx[j] + g[j] * y[j] * (T::one() - y[j]);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(dx) = slot(grads, nodes, *x) {
                for j in 0..dx.len() {
                    dx[j] = dx[j] + g[j] * gelu_parts(xv[j]).1;
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(dx) = slot(grads, nodes, *x) {
                for j in 0..dx.len() {
                    if xv[j] > T::zero() {
                        dx[j] = dx[j] + g[j];
                    }
                }
            }
        }
        Op::Sum(x, axis) | Op::Mean(x, axis) => {
            let in_shape = nodes[x.0].value.shape().to_vec();
            let (outer, n, inner) = split_axis(&in_shape, *axis);
            let scale = if matches!(nodes[i].op, Op::Mean(..)) {
                T::one() / T::from_usize(n).unwrap()
            } else {
                T::one()
            };
            if let Some(dx) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    for j in 0..n {
                        for c in 0..inner {
                            let d = &mut dx[(o * n + j) * inner + c];
                            *d = *d + g[o * inner + c] * scale;
                        }
                    }
                }
            }
        }
        Op::Max(x, arg) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (&src, &v) in arg.iter().zip(g) {
                    dx[src] = dx[src] + v;
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Softmax(x, axis) => {
            let y = out.data();
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            if let Some(dx) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + c;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = dx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x, axis) => {
            let y = out.data();
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            if let Some(dx) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + c;
                        let gs: T = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = dx[at(j)] + g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
            }
        }
        Op::LogSumExp(x, axis) => {
            let xv = val(*x);
            let in_shape = nodes[x.0].value.shape().to_vec();
            let (outer, n, inner) = split_axis(&in_shape, *axis);
            if let Some(dx) = slot(grads, nodes, *x) {
                let mut lane = vec![T::zero(); n];
                let mut sm = vec![T::zero(); n];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + c;
                        for j in 0..n {
                            lane[j] = xv[at(j)];
                        }
                        softmax_lane(&lane, &mut sm);
                        let gv = g[o * inner + c];
                        for j in 0..n {
                            dx[at(j)] = dx[at(j)] + gv * sm[j];
                        }
                    }
                }
            }
        }
        Op::LayerNorm(x, rstds) => {
            let y = out.data();
            let d = *out.shape().last().unwrap();
            let dn = T::from_usize(d).unwrap();
            if let Some(dx) = slot(grads, nodes, *x) {
                for (r, &rstd) in rstds.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for c in 0..d {
                        let v = &mut dx[r * d + c];
                        *v = *v + rstd * (gr[c] - mg - yr[c] * mgy);
                    }
                }
            }
        }
        Op::L2Normalize(x, norms) => {
            let y = out.data();
            let d = *out.shape().last().unwrap();
            if let Some(dx) = slot(grads, nodes, *x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..d {
                        let v = &mut dx[r * d + c];
                        *v = *v + (gr[c] - yr[c] * dot) / norm;
                    }
                }
            }
        }
    }
}
