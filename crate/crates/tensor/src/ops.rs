//! Forward implementations. Every op records the rule its backward pass needs.

use rand::Rng;

use crate::tape::Op;
use crate::{Real, Result, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// How [`Tape::cross_entropy`] averages the selected positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Mean over every selected position in the whole input.
    #[default]
    Selected,
    /// Mean over selected positions within each example (leading axis of a
    /// `[B, L, V]` input), then mean over examples that select anything.
    PerExample,
}

// tanh through exp; libm's tanh dominates the GELU cost otherwise.
fn tanh<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    if u > T::of(20.0) {
        return T::one();
    }
    if u < T::of(-20.0) {
        return -T::one();
    }
    T::one() - two / ((two * u).exp() + T::one())
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let u = c * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + tanh(u))
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_C);
    let u = c * (x + k * x * x * x);
    let th = tanh(u);
    let half = T::of(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn expect_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn op_or_leaf(&self, inputs: &[Var], op: Op<T>) -> Op<T> {
        if self.any_tracked(inputs) {
            op
        } else {
            Op::Leaf
        }
    }

    /// `[m,k] × [k,p] → [m,p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, p) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        T::gemm(
            m,
            k,
            p,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            p as isize,
            1,
            T::zero(),
            &mut out,
            p as isize,
            1,
        );
        let op = self.op_or_leaf(&[a, b], Op::MatMul { a, b });
        self.push("matmul", Tensor::new(vec![m, p], out)?, op)
    }

    /// Batched product `[n,m,k] × [n,k,p] → [n,m,p]`; with `transpose_b` the right
    /// operand is stored as `[n,p,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("bmm", av, 3)?;
        expect_rank("bmm", bv, 3)?;
        let (n, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (n2, kb, p) = if transpose_b {
            (bv.shape()[0], bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[0], bv.shape()[1], bv.shape()[2])
        };
        if n != n2 || k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * m * p];
        let (sa, sb, sc) = (m * k, k * p, m * p);
        for i in 0..n {
            let aa = &av.data()[i * sa..(i + 1) * sa];
            let bb = &bv.data()[i * sb..(i + 1) * sb];
            let cc = &mut out[i * sc..(i + 1) * sc];
            if transpose_b {
                T::gemm(
                    m,
                    k,
                    p,
                    T::one(),
                    aa,
                    k as isize,
                    1,
                    bb,
                    1,
                    k as isize,
                    T::zero(),
                    cc,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    m,
                    k,
                    p,
                    T::one(),
                    aa,
                    k as isize,
                    1,
                    bb,
                    p as isize,
                    1,
                    T::zero(),
                    cc,
                    p as isize,
                    1,
                );
            }
        }
        let op = self.op_or_leaf(&[a, b], Op::BatchMatMul { a, b, transpose_b });
        self.push("bmm", Tensor::new(vec![n, m, p], out)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        let op = self.op_or_leaf(&[a, b], Op::Add { a, b });
        self.push("add", Tensor::new(shape, out)?, op)
    }

    /// Adds a vector to every row along the trailing axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let w = av.last_dim();
        if rv.numel() != w {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(w) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o = *o + r;
            }
        }
        let shape = av.shape().to_vec();
        let op = self.op_or_leaf(&[a, row], Op::AddRow { a, row });
        self.push("add_row", Tensor::new(shape, out)?, op)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let shape = av.shape().to_vec();
        let op = self.op_or_leaf(&[a, b], Op::Mul { a, b });
        self.push("mul", Tensor::new(shape, out)?, op)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().map(|&x| x * f).collect();
        let shape = av.shape().to_vec();
        let op = self.op_or_leaf(&[a], Op::Scale { a, factor: f });
        self.push("scale", Tensor::new(shape, out)?, op)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let op = self.op_or_leaf(&[a], Op::Sum { a });
        self.push("sum", Tensor::scalar(s), op)
    }

    /// Gathers rows of a `[rows, width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        expect_rank("embedding", tv, 2)?;
        let (rows, w) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    limit: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let op = self.op_or_leaf(
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        );
        self.push("embedding", Tensor::new(vec![ids.len(), w], out)?, op)
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance (epsilon
    /// 1e-5), then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let w = xv.last_dim();
        if gv.numel() != w || bv.numel() != w {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.numel() / w;
        let nw = T::of(w as f64);
        let eps = T::of(LN_EPS);
        let mut out = vec![T::zero(); xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nw;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nw;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..w {
                out[r * w + j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = xv.shape().to_vec();
        let op = self.op_or_leaf(
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        );
        self.push("layer_norm", Tensor::new(shape, out)?, op)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().map(|&x| gelu(x)).collect();
        let shape = av.shape().to_vec();
        let op = self.op_or_leaf(&[a], Op::Gelu { a });
        self.push("gelu", Tensor::new(shape, out)?, op)
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    ///
    /// With `causal`, the input is read as `[..., q, k]` and entry `(i, j)` is
    /// excluded whenever `j > i + (k - q)`; excluded entries come out as exactly 0.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let q = if causal {
            if av.shape().len() < 2 {
                return Err(TensorError::Rank {
                    op: "softmax",
                    expected: 2,
                    shape: av.shape().to_vec(),
                });
            }
            av.shape()[av.shape().len() - 2]
        } else {
            1
        };
        if causal && q > w {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![q, w],
            });
        }
        let mut out = vec![T::zero(); av.numel()];
        for (r, (src, dst)) in av.data().chunks_exact(w).zip(out.chunks_exact_mut(w)).enumerate() {
            let limit = if causal { (r % q) + (w - q) + 1 } else { w };
            let mx = src[..limit].iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..limit {
                let e = (src[j] - mx).exp();
                dst[j] = e;
                total = total + e;
            }
            for d in dst[..limit].iter_mut() {
                *d = *d / total;
            }
        }
        let shape = av.shape().to_vec();
        let op = self.op_or_leaf(&[a], Op::Softmax { a });
        self.push("softmax", Tensor::new(shape, out)?, op)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a).clone().reshaped(shape)?;
        let op = self.op_or_leaf(&[a], Op::Reshape { a });
        self.push("reshape", av, op)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        expect_rank("transpose", av, 2)?;
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let op = self.op_or_leaf(&[a], Op::Transpose { a });
        self.push("transpose", Tensor::new(vec![n, m], out)?, op)
    }

    /// `[a, b, c, d] → [a, c, b, d]`; splits or merges attention heads.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        expect_rank("permute_0213", av, 4)?;
        let sh = av.shape();
        let (d0, d1, d2, d3) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = vec![T::zero(); av.numel()];
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    let src = ((i * d1 + j) * d2 + k) * d3;
                    let dst = ((i * d2 + k) * d1 + j) * d3;
                    out[dst..dst + d3].copy_from_slice(&av.data()[src..src + d3]);
                }
            }
        }
        let op = self.op_or_leaf(&[a], Op::Permute0213 { a });
        self.push("permute_0213", Tensor::new(vec![d0, d2, d1, d3], out)?, op)
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (wa, wb) = (av.last_dim(), bv.last_dim());
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks_exact(wa).zip(bv.data().chunks_exact(wb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let op = self.op_or_leaf(&[a, b], Op::Concat { a, b });
        self.push("concat", Tensor::new(shape, out)?, op)
    }

    /// Inverted dropout. Only call this in training mode; a rate of 0 is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(TensorError::Invalid(format!("dropout rate {rate} must be below 1")));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let av = self.value(a);
        let mask: Vec<T> = (0..av.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = av.shape().to_vec();
        let op = self.op_or_leaf(&[a], Op::Dropout { a, mask });
        self.push("dropout", Tensor::new(shape, out)?, op)
    }

    /// Mean negative log-likelihood of `targets` under `logits` (`[N, V]` or
    /// `[B, L, V]`), restricted to positions where `selected` is true. Gradients
    /// flow only into selected rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        selected: &[bool],
        normalization: Normalization,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if targets.len() != rows || selected.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), selected.len()],
            });
        }
        let weights: Vec<T> = match normalization {
            Normalization::Selected => {
                let count = selected.iter().filter(|&&s| s).count();
                if count == 0 {
                    return Err(TensorError::EmptySelection);
                }
                let w = T::one() / T::of(count as f64);
                selected.iter().map(|&s| if s { w } else { T::zero() }).collect()
            }
            Normalization::PerExample => {
                expect_rank("cross_entropy", lv, 3)?;
                let len = lv.shape()[1];
                let counts: Vec<usize> = selected.chunks(len).map(|c| c.iter().filter(|&&s| s).count()).collect();
                let examples = counts.iter().filter(|&&c| c > 0).count();
                if examples == 0 {
                    return Err(TensorError::EmptySelection);
                }
                selected
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        if s {
                            T::one() / T::of((counts[i / len] * examples) as f64)
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            }
        };
        let track = self.any_tracked(&[logits]);
        let mut probs = if track { vec![T::zero(); lv.numel()] } else { Vec::new() };
        let mut loss = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    limit: v,
                });
            }
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + total.ln();
            loss = loss + weights[r] * (lse - row[t]);
            if track {
                for j in 0..v {
                    probs[r * v + j] = (row[j] - lse).exp();
                }
            }
        }
        let op = if track {
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights,
            }
        } else {
            Op::Leaf
        };
        self.push("cross_entropy", Tensor::scalar(loss), op)
    }
}
