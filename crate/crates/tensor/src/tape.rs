use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Sum {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    Permute0213 {
        a: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) tracked: bool,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// Nodes are appended in evaluation order, so walking the node list backwards is a
/// reverse topological traversal. A tape supports a single backward pass; build a
/// fresh tape per training step.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
    grad_buffers: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of gradient buffers that were allocated.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            grad_buffers: 0,
        }
    }

    /// A tape that only evaluates. Nothing is tracked and no gradient state exists.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that participate in differentiation.
    pub fn tracked_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.tracked).count()
    }

    /// Gradient buffers allocated by backward passes on this tape so far.
    pub fn grad_buffers_allocated(&self) -> usize {
        self.grad_buffers
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let tracked = self.recording && requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub(crate) fn any_tracked(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Appends a computed node, rejecting non-finite results.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = self.recording && !matches!(op, Op::Leaf);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar root. Every tracked node is visited exactly
    /// once; gradients are allocated only for tracked nodes that receive one.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut allocated = 0usize;
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));
            allocated += 1;
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let mut acc = Accum {
                nodes: &self.nodes,
                grads: lower,
                allocated: &mut allocated,
            };
            backward_node(node, g.data(), &mut acc);
        }
        self.grad_buffers += allocated;
        Ok(Gradients { grads })
    }
}

struct Accum<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    allocated: &'a mut usize,
}

impl<T: Real> Accum<'_, T> {
    /// Gradient buffer for `v`, or `None` when `v` does not participate.
    fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape().to_vec()));
            *self.allocated += 1;
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn add_scaled(&mut self, v: Var, g: &[T], factor: T) {
        if let Some(buf) = self.buf(v) {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b = *b + factor * x;
            }
        }
    }
}

fn backward_node<T: Real>(node: &Node<T>, g: &[T], acc: &mut Accum<'_, T>) {
    let nodes = acc.nodes;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let p = nodes[b.0].value.shape()[1];
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(da) = acc.buf(*a) {
                // dA = dC · Bᵀ
                T::gemm(
                    m,
                    p,
                    k,
                    T::one(),
                    g,
                    p as isize,
                    1,
                    bv,
                    1,
                    p as isize,
                    T::one(),
                    da,
                    k as isize,
                    1,
                );
            }
            if let Some(db) = acc.buf(*b) {
                // dB = Aᵀ · dC
                T::gemm(
                    k,
                    m,
                    p,
                    T::one(),
                    av,
                    1,
                    k as isize,
                    g,
                    p as isize,
                    1,
                    T::one(),
                    db,
                    p as isize,
                    1,
                );
            }
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let ash = nodes[a.0].value.shape().to_vec();
            let bsh = nodes[b.0].value.shape().to_vec();
            let (bt, m, k) = (ash[0], ash[1], ash[2]);
            let p = if *transpose_b { bsh[1] } else { bsh[2] };
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let (sa, sb, sc) = (m * k, k * p, m * p);
            if let Some(da) = acc.buf(*a) {
                for i in 0..bt {
                    let gc = &g[i * sc..(i + 1) * sc];
                    let bb = &bv[i * sb..(i + 1) * sb];
                    let out = &mut da[i * sa..(i + 1) * sa];
                    if *transpose_b {
                        // B stored [p,k]; dA = dC · B
                        T::gemm(
                            m,
                            p,
                            k,
                            T::one(),
                            gc,
                            p as isize,
                            1,
                            bb,
                            k as isize,
                            1,
                            T::one(),
                            out,
                            k as isize,
                            1,
                        );
                    } else {
                        T::gemm(
                            m,
                            p,
                            k,
                            T::one(),
                            gc,
                            p as isize,
                            1,
                            bb,
                            1,
                            p as isize,
                            T::one(),
                            out,
                            k as isize,
                            1,
                        );
                    }
                }
            }
            if let Some(db) = acc.buf(*b) {
                for i in 0..bt {
                    let gc = &g[i * sc..(i + 1) * sc];
                    let aa = &av[i * sa..(i + 1) * sa];
                    let out = &mut db[i * sb..(i + 1) * sb];
                    if *transpose_b {
                        // dB[p,k] = dCᵀ · A
                        T::gemm(
                            p,
                            m,
                            k,
                            T::one(),
                            gc,
                            1,
                            p as isize,
                            aa,
                            k as isize,
                            1,
                            T::one(),
                            out,
                            k as isize,
                            1,
                        );
                    } else {
                        // dB[k,p] = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            p,
                            T::one(),
                            aa,
                            1,
                            k as isize,
                            gc,
                            p as isize,
                            1,
                            T::one(),
                            out,
                            p as isize,
                            1,
                        );
                    }
                }
            }
        }
        Op::Add { a, b } => {
            acc.add_scaled(*a, g, T::one());
            acc.add_scaled(*b, g, T::one());
        }
        Op::AddRow { a, row } => {
            acc.add_scaled(*a, g, T::one());
            let w = nodes[row.0].value.numel();
            if let Some(dr) = acc.buf(*row) {
                for chunk in g.chunks_exact(w) {
                    for (d, &x) in dr.iter_mut().zip(chunk) {
                        *d = *d + x;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(da) = acc.buf(*a) {
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                    *d = *d + x * y;
                }
            }
            if let Some(db) = acc.buf(*b) {
                for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                    *d = *d + x * y;
                }
            }
        }
        Op::Scale { a, factor } => acc.add_scaled(*a, g, *factor),
        Op::Sum { a } => {
            let up = g[0];
            if let Some(da) = acc.buf(*a) {
                for d in da.iter_mut() {
                    *d = *d + up;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let w = nodes[table.0].value.last_dim();
            if let Some(dt) = acc.buf(*table) {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * w..(r + 1) * w];
                    for (d, &x) in dt[id * w..(id + 1) * w].iter_mut().zip(src) {
                        *d = *d + x;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let w = nodes[x.0].value.last_dim();
            let xv = nodes[x.0].value.data();
            let gv = nodes[gamma.0].value.data();
            let rows = xv.len() / w;
            let mut xhat = vec![T::zero(); xv.len()];
            for r in 0..rows {
                for j in 0..w {
                    xhat[r * w + j] = (xv[r * w + j] - mean[r]) * rstd[r];
                }
            }
            if let Some(db) = acc.buf(*beta) {
                for chunk in g.chunks_exact(w) {
                    for (d, &x) in db.iter_mut().zip(chunk) {
                        *d = *d + x;
                    }
                }
            }
            if let Some(dg) = acc.buf(*gamma) {
                for (chunk, xh) in g.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                    for j in 0..w {
                        dg[j] = dg[j] + chunk[j] * xh[j];
                    }
                }
            }
            if let Some(dx) = acc.buf(*x) {
                let nw = T::of(w as f64);
                let mut dxhat = vec![T::zero(); w];
                for r in 0..rows {
                    let gr = &g[r * w..(r + 1) * w];
                    let xh = &xhat[r * w..(r + 1) * w];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..w {
                        dxhat[j] = gr[j] * gv[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xh[j];
                    }
                    let scale = rstd[r] / nw;
                    for j in 0..w {
                        let v = scale * (nw * dxhat[j] - s1 - xh[j] * s2);
                        dx[r * w + j] = dx[r * w + j] + v;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let av = nodes[a.0].value.data();
            if let Some(da) = acc.buf(*a) {
                for ((d, &x), &up) in da.iter_mut().zip(av).zip(g) {
                    *d = *d + up * crate::ops::gelu_grad(x);
                }
            }
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let w = node.value.last_dim();
            if let Some(da) = acc.buf(*a) {
                for ((dr, yr), gr) in da.chunks_exact_mut(w).zip(y.chunks_exact(w)).zip(g.chunks_exact(w)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..w {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Reshape { a } => acc.add_scaled(*a, g, T::one()),
        Op::Transpose { a } => {
            let sh = nodes[a.0].value.shape().to_vec();
            let (m, n) = (sh[0], sh[1]);
            if let Some(da) = acc.buf(*a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + g[j * m + i];
                    }
                }
            }
        }
        Op::Permute0213 { a } => {
            let sh = nodes[a.0].value.shape().to_vec();
            if let Some(da) = acc.buf(*a) {
                let (d0, d1, d2, d3) = (sh[0], sh[1], sh[2], sh[3]);
                for i in 0..d0 {
                    for j in 0..d1 {
                        for k in 0..d2 {
                            let src = ((i * d2 + k) * d1 + j) * d3;
                            let dst = ((i * d1 + j) * d2 + k) * d3;
                            for l in 0..d3 {
                                da[dst + l] = da[dst + l] + g[src + l];
                            }
                        }
                    }
                }
            }
        }
        Op::Concat { a, b } => {
            let wa = nodes[a.0].value.last_dim();
            let wb = nodes[b.0].value.last_dim();
            let w = wa + wb;
            if let Some(da) = acc.buf(*a) {
                for (d, src) in da.chunks_exact_mut(wa).zip(g.chunks_exact(w)) {
                    for j in 0..wa {
                        d[j] = d[j] + src[j];
                    }
                }
            }
            if let Some(db) = acc.buf(*b) {
                for (d, src) in db.chunks_exact_mut(wb).zip(g.chunks_exact(w)) {
                    for j in 0..wb {
                        d[j] = d[j] + src[wa + j];
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(da) = acc.buf(*a) {
                for ((d, &x), &m) in da.iter_mut().zip(g).zip(mask) {
                    *d = *d + x * m;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            weights,
        } => {
            let up = g[0];
            let v = nodes[logits.0].value.last_dim();
            if let Some(dl) = acc.buf(*logits) {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let scale = up * w;
                    let row = &mut dl[r * v..(r + 1) * v];
                    let pr = &probs[r * v..(r + 1) * v];
                    for j in 0..v {
                        row[j] = row[j] + scale * pr[j];
                    }
                    row[t] = row[t] - scale;
                }
            }
        }
    }
}
