use std::sync::Arc;

use crate::autodiff::real::gemm;
use crate::autodiff::{Real, RngStream, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in CSR layout, used for graph propagation.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` entries; duplicate coordinates are summed.
    pub fn from_entries(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(r < rows && c < cols, "sparse entry out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    Gather {
        table: Var,
        idx: Vec<Option<usize>>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
    LogSigmoid(Var),
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    Attention(Box<AttentionSaved<T>>),
    BlockMatMulNt {
        a: Var,
        b: Var,
        block: usize,
    },
    SpMM {
        adj: Arc<SparseMatrix>,
        x: Var,
    },
}

#[derive(Debug)]
struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    mask: Vec<bool>,
    seq_len: usize,
    heads: usize,
    probs: Vec<T>,
    drop: Option<Vec<T>>,
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BlockMatMulNt { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Relu(x)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowSums(x)
            | Op::Pick { x, .. }
            | Op::WeightedSum { x, .. }
            | Op::LogSigmoid(x)
            | Op::MaskRows { x, .. }
            | Op::SpMM { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::ConcatRows(xs) => xs.clone(),
            Op::Attention(s) => vec![s.q, s.k, s.v],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Reverse-mode differentiation tape.
///
/// Values are computed eagerly as ops are recorded. [`Graph::backward`] may run
/// once per tape; call [`Graph::reset_grads`] to run it again.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    relu_grad_scale: T,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            relu_grad_scale: T::one(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the ReLU backward rule; used to verify that gradient checks
    /// catch a broken rule.
    #[doc(hidden)]
    pub fn inject_relu_grad_fault(&mut self, scale: f64) {
        self.relu_grad_scale = T::of(scale);
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a trainable leaf after [`Graph::backward`]. Leaves the loss
    /// does not depend on hold zeros; constants hold nothing.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.value(a))?;
        let (k2, n) = check_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b: false },
        )
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul_nt", self.value(a))?;
        let (n, k2) = check_2d("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        self.push(
            "matmul_nt",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b: true },
        )
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of `x: [m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = check_2d("add_bias", self.value(x))?;
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("[{m}, {n}] + bias {:?}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        self.push("add_bias", Tensor::new(vec![m, n], out)?, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())?;
        self.push("scale", value, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
        )?;
        self.push("relu", value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row, None);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(x))
    }

    /// Row-wise log-softmax. Entries whose `mask` flag is false are excluded
    /// from the normalizer and produce 0; rows with no valid entry are all 0.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(Error::shape(
                    "log_softmax_rows",
                    format!("mask length {} for shape {:?}", m.len(), t.shape()),
                ));
            }
        }
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let rmask = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            log_softmax_in_place(row, rmask);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "log_softmax_rows",
            value,
            Op::LogSoftmaxRows {
                x,
                mask: mask.map(<[bool]>::to_vec),
            },
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = check_2d("layer_norm", t)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "[{m}, {n}] with gamma {:?}, beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..m {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout. In eval mode, or at rate 0, returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream, train: bool) -> Result<Var> {
        if !train || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let t = self.value(x);
        let scale: Vec<T> = (0..t.numel())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, scale })
    }

    /// Gathers rows of `table: [V, d]`; `None` yields a zero row.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = check_2d("embedding_lookup", t)?;
        let mut out = vec![T::zero(); idx.len() * d];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= vocab {
                    return Err(Error::shape(
                        "embedding_lookup",
                        format!("index {i} out of range for table [{vocab}, {d}]"),
                    ));
                }
                out[r * d..(r + 1) * d].copy_from_slice(t.row(i));
            }
        }
        self.push(
            "embedding_lookup",
            Tensor::new(vec![idx.len(), d], out)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// Pairwise cosine similarities of the rows of `a: [m, d]` and `b: [n, d]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = check_2d("cosine_similarity", self.value(a))?;
        let (n, d2) = check_2d("cosine_similarity", self.value(b))?;
        if d != d2 {
            return Err(Error::shape("cosine_similarity", format!("[{m}, {d}] vs [{n}, {d2}]")));
        }
        let norms = |t: &Tensor<T>, side: &'static str| -> Result<Vec<T>> {
            (0..t.rows())
                .map(|r| {
                    let nrm = t.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if nrm > T::zero() {
                        Ok(nrm)
                    } else {
                        Err(Error::ZeroNorm { side, row: r })
                    }
                })
                .collect()
        };
        let norm_a = norms(self.value(a), "lhs")?;
        let norm_b = norms(self.value(b), "rhs")?;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            d,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] /= norm_a[i] * norm_b[j];
            }
        }
        self.push(
            "cosine_similarity",
            Tensor::new(vec![m, n], out)?,
            Op::Cosine { a, b, norm_a, norm_b },
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, n) = check_2d("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (m, c) = check_2d("concat_rows", self.value(x))?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("column counts {n} vs {c}")));
            }
            rows += m;
            out.extend_from_slice(self.value(x).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(xs.to_vec()),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums each row of a matrix, giving a vector of length `rows`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, _) = check_2d("row_sums", t)?;
        let out = (0..m).map(|r| t.row(r).iter().copied().sum::<T>()).collect();
        self.push("row_sums", Tensor::vector(out), Op::RowSums(x))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = check_2d("pick", t)?;
        if idx.len() != m || idx.iter().any(|&c| c >= n) {
            return Err(Error::shape("pick", format!("{} indices into [{m}, {n}]", idx.len())));
        }
        let out = idx.iter().enumerate().map(|(r, &c)| t.row(r)[c]).collect();
        self.push("pick", Tensor::vector(out), Op::Pick { x, idx: idx.to_vec() })
    }

    /// `Σ w_i x_i` over all elements.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if w.len() != t.numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for shape {:?}", w.len(), t.shape()),
            ));
        }
        let w: Vec<T> = w.iter().map(|&v| T::of(v)).collect();
        let s = t.data().iter().zip(&w).map(|(&a, &b)| a * b).sum::<T>();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, w })
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| log_sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_sigmoid", value, Op::LogSigmoid(x))
    }

    /// Zeroes the rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (m, _) = check_2d("mask_rows", t)?;
        if keep.len() != m {
            return Err(Error::shape("mask_rows", format!("{} flags for {m} rows", keep.len())));
        }
        let mut out = t.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self.push("mask_rows", out, Op::MaskRows { x, keep: keep.to_vec() })
    }

    /// Multi-head scaled dot-product attention over a batch of fixed-length
    /// sequences stacked row-wise in `q, k, v: [batch * seq_len, d]`.
    ///
    /// Keys whose `mask` flag is false are excluded from every softmax.
    /// Dropout, when active, is applied to the attention probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        seq_len: usize,
        heads: usize,
        dropout: f64,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = check_2d("attention", self.value(q))?;
        if seq_len == 0 || rows % seq_len != 0 || mask.len() != rows {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows, seq_len {seq_len}, mask {}", mask.len()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("d_model {d} not divisible by {heads} heads"),
            ));
        }
        let nb = rows / seq_len;
        let dk = d / heads;
        let s = seq_len;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); nb * heads * s * s];
        let mut drop = (train && dropout > 0.0).then(|| vec![T::one(); probs.len()]);
        let keep = T::of(1.0 / (1.0 - dropout));
        let mut out = vec![T::zero(); rows * d];
        let mut scores = vec![T::zero(); s];
        let mut valid = vec![false; s];
        for b in 0..nb {
            for (j, vj) in valid.iter_mut().enumerate() {
                *vj = mask[b * s + j];
            }
            for h in 0..heads {
                let off = h * dk;
                for i in 0..s {
                    let qi = &qd[(b * s + i) * d + off..][..dk];
                    for j in 0..s {
                        let kj = &kd[(b * s + j) * d + off..][..dk];
                        scores[j] = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    }
                    softmax_in_place(&mut scores, Some(&valid));
                    let base = ((b * heads + h) * s + i) * s;
                    probs[base..base + s].copy_from_slice(&scores);
                    if let Some(dm) = drop.as_mut() {
                        for j in 0..s {
                            dm[base + j] = if rng.uniform() < dropout { T::zero() } else { keep };
                        }
                    }
                    let orow = &mut out[(b * s + i) * d + off..][..dk];
                    for j in 0..s {
                        let mut p = scores[j];
                        if let Some(dm) = drop.as_ref() {
                            p *= dm[base + j];
                        }
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &vd[(b * s + j) * d + off..][..dk];
                        orow.iter_mut().zip(vj).for_each(|(o, &x)| *o += p * x);
                    }
                }
            }
        }
        self.push(
            "attention",
            Tensor::new(vec![rows, d], out)?,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                mask: mask.to_vec(),
                seq_len,
                heads,
                probs,
                drop,
            })),
        )
    }

    /// Block-diagonal `a · bᵀ`: rows are grouped into consecutive blocks of
    /// `block` rows and each block of `a` is multiplied with the matching block
    /// of `b`. Output shape `[rows, block]`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        self.same_shape("block_matmul_nt", a, b)?;
        let (rows, d) = check_2d("block_matmul_nt", self.value(a))?;
        if block == 0 || rows % block != 0 {
            return Err(Error::shape(
                "block_matmul_nt",
                format!("{rows} rows in blocks of {block}"),
            ));
        }
        let mut out = vec![T::zero(); rows * block];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for blk in 0..rows / block {
            let r0 = blk * block;
            gemm(
                block,
                d,
                block,
                &ad[r0 * d..(r0 + block) * d],
                false,
                &bd[r0 * d..(r0 + block) * d],
                true,
                &mut out[r0 * block..(r0 + block) * block],
                false,
            );
        }
        self.push(
            "block_matmul_nt",
            Tensor::new(vec![rows, block], out)?,
            Op::BlockMatMulNt { a, b, block },
        )
    }

    /// Sparse-dense product `adj · x`.
    pub fn spmm(&mut self, adj: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let (m, n) = check_2d("spmm", self.value(x))?;
        if adj.cols != m {
            return Err(Error::shape(
                "spmm",
                format!("[{}, {}] x [{m}, {n}]", adj.rows, adj.cols),
            ));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); adj.rows * n];
        for r in 0..adj.rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for p in adj.indptr[r]..adj.indptr[r + 1] {
                let w = T::of(adj.values[p]);
                let c = adj.indices[p];
                orow.iter_mut()
                    .zip(&xd[c * n..(c + 1) * n])
                    .for_each(|(o, &v)| *o += w * v);
            }
        }
        self.push(
            "spmm",
            Tensor::new(vec![adj.rows, n], out)?,
            Op::SpMM {
                adj: Arc::clone(adj),
                x,
            },
        )
    }

    /// Backpropagates from a scalar `loss`, populating gradients of every
    /// trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()])?);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_op(id, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                node.grad = Some(g);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backward_op(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    // dA = G · op(B)ᵀ
                    gemm(m, n, k, gd, false, tb.data(), !*trans_b, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm(n, m, k, gd, true, ta.data(), false, db, true);
                    } else {
                        gemm(k, m, n, ta.data(), true, gd, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(gd).for_each(|(d, &x)| *d += x);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(gd).for_each(|(d, &x)| *d += x);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(gd).for_each(|(d, &x)| *d += x);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(gd).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..gd.len() {
                        da[i] += gd[i] * vb[i];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..gd.len() {
                        db[i] += gd[i] * va[i];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, &v)| *d += v);
                }
                let n = out.shape()[1];
                if let Some(db) = self.slot(grads, *bias) {
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, &v)| *d += v * *c);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let s = self.relu_grad_scale;
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..gd.len() {
                        if xv[i] > T::zero() {
                            dx[i] += gd[i] * s;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, (prow, grow)) in out.data().chunks(cols).zip(gd.chunks(cols)).enumerate() {
                        let dot = prow.iter().zip(grow).map(|(&p, &gv)| p * gv).sum::<T>();
                        for c in 0..cols {
                            dx[r * cols + c] += prow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { x, mask } => {
                let cols = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, (lrow, grow)) in out.data().chunks(cols).zip(gd.chunks(cols)).enumerate() {
                        let valid = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
                        let gsum = (0..cols).filter(|&c| valid(c)).map(|c| grow[c]).sum::<T>();
                        for c in 0..cols {
                            if valid(c) {
                                dx[r * cols + c] += grow[c] - lrow[c].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.shape()[1];
                let gv = self.value(*gamma).data();
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::of(n as f64);
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &gd[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            s1 += dh;
                            s2 += dh * hrow[c];
                        }
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            dx[r * n + c] += *is / nf * (nf * dh - s1 - hrow[c] * s2);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in gd.chunks(n) {
                        db.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..gd.len() {
                        dx[i] += gd[i] * scale[i];
                    }
                }
            }
            Op::Gather { table, idx } => {
                let d = out.shape()[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            dt[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&gd[r * d..(r + 1) * d])
                                .for_each(|(t, &v)| *t += v);
                        }
                    }
                }
            }
            Op::Cosine { a, b, norm_a, norm_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let d = ta.shape()[1];
                let cos = out.data();
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..m {
                        let ai = ta.row(i);
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let bj = tb.row(j);
                            let c1 = gij / (norm_a[i] * norm_b[j]);
                            let c2 = gij * cos[i * n + j] / (norm_a[i] * norm_a[i]);
                            for p in 0..d {
                                da[i * d + p] += c1 * bj[p] - c2 * ai[p];
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..m {
                        let ai = ta.row(i);
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let bj = tb.row(j);
                            let c1 = gij / (norm_a[i] * norm_b[j]);
                            let c2 = gij * cos[i * n + j] / (norm_b[j] * norm_b[j]);
                            for p in 0..d {
                                db[j * d + p] += c1 * ai[p] - c2 * bj[p];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if let Some(dx) = self.slot(grads, x) {
                        dx.iter_mut().zip(&gd[off..off + len]).for_each(|(d, &v)| *d += v);
                    }
                    off += len;
                }
            }
            Op::Sum(x) => {
                let gv = gd[0];
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Mean(x) => {
                let gv = gd[0] / T::of(self.value(*x).numel() as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::RowSums(x) => {
                let n = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &gv) in gd.iter().enumerate() {
                        dx[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::Pick { x, idx } => {
                let n = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &c) in idx.iter().enumerate() {
                        dx[r * n + c] += gd[r];
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                let gv = gd[0];
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(w).for_each(|(d, &wv)| *d += gv * wv);
                }
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..gd.len() {
                        // d/dx log σ(x) = σ(-x)
                        dx[i] += gd[i] * sigmoid(-xv[i]);
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            dx[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(&gd[r * n..(r + 1) * n])
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, gd, grads),
            Op::BlockMatMulNt { a, b, block } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let d = self.value(*a).shape()[1];
                let rows = out.shape()[0];
                let blk = *block;
                if let Some(da) = self.slot(grads, *a) {
                    for k in 0..rows / blk {
                        let r0 = k * blk;
                        gemm(
                            blk,
                            blk,
                            d,
                            &gd[r0 * blk..(r0 + blk) * blk],
                            false,
                            &bd[r0 * d..(r0 + blk) * d],
                            false,
                            &mut da[r0 * d..(r0 + blk) * d],
                            true,
                        );
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for k in 0..rows / blk {
                        let r0 = k * blk;
                        gemm(
                            blk,
                            blk,
                            d,
                            &gd[r0 * blk..(r0 + blk) * blk],
                            true,
                            &ad[r0 * d..(r0 + blk) * d],
                            false,
                            &mut db[r0 * d..(r0 + blk) * d],
                            true,
                        );
                    }
                }
            }
            Op::SpMM { adj, x } => {
                let n = out.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..adj.rows {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in adj.indptr[r]..adj.indptr[r + 1] {
                            let w = T::of(adj.values[p]);
                            let c = adj.indices[p];
                            dx[c * n..(c + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, &v)| *d += w * v);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let d = self.value(s.q).shape()[1];
        let rows = self.value(s.q).shape()[0];
        let (sl, heads) = (s.seq_len, s.heads);
        let dk = d / heads;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let mut dq = vec![T::zero(); rows * d];
        let mut dkv = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); sl];
        for b in 0..rows / sl {
            for h in 0..heads {
                let off = h * dk;
                for i in 0..sl {
                    let base = ((b * heads + h) * sl + i) * sl;
                    let p = &s.probs[base..base + sl];
                    let go = &gd[(b * sl + i) * d + off..][..dk];
                    for j in 0..sl {
                        if !s.mask[b * sl + j] {
                            dp[j] = T::zero();
                            continue;
                        }
                        let dscale = s.drop.as_ref().map_or(T::one(), |dm| dm[base + j]);
                        let vrow = &vd[(b * sl + j) * d + off..][..dk];
                        let dpd = go.iter().zip(vrow).map(|(&a, &c)| a * c).sum::<T>();
                        dp[j] = dpd * dscale;
                        let pd = p[j] * dscale;
                        if pd != T::zero() {
                            let dvrow = &mut dv[(b * sl + j) * d + off..][..dk];
                            dvrow.iter_mut().zip(go).for_each(|(x, &gv)| *x += pd * gv);
                        }
                    }
                    let dot = p.iter().zip(&dp).map(|(&a, &c)| a * c).sum::<T>();
                    let qi = &qd[(b * sl + i) * d + off..][..dk];
                    for j in 0..sl {
                        if !s.mask[b * sl + j] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &kd[(b * sl + j) * d + off..][..dk];
                        let dqrow = &mut dq[(b * sl + i) * d + off..][..dk];
                        dqrow.iter_mut().zip(kj).for_each(|(x, &kv)| *x += ds * kv);
                        let dkrow = &mut dkv[(b * sl + j) * d + off..][..dk];
                        dkrow.iter_mut().zip(qi).for_each(|(x, &qv)| *x += ds * qv);
                    }
                }
            }
        }
        for (var, buf) in [(s.q, dq), (s.k, dkv), (s.v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&buf).for_each(|(x, &v)| *x += v);
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Softmax over the entries flagged valid; invalid entries become 0.
fn softmax_in_place<T: Real>(row: &mut [T], valid: Option<&[bool]>) {
    let ok = |j: usize| valid.is_none_or(|v| v[j]);
    let max = (0..row.len())
        .filter(|&j| ok(j))
        .map(|j| row[j])
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if ok(j) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = T::zero();
        }
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn log_softmax_in_place<T: Real>(row: &mut [T], valid: Option<&[bool]>) {
    let ok = |j: usize| valid.is_none_or(|v| v[j]);
    let max = (0..row.len())
        .filter(|&j| ok(j))
        .map(|j| row[j])
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let lse = (0..row.len())
        .filter(|&j| ok(j))
        .map(|j| (row[j] - max).exp())
        .sum::<T>()
        .ln()
        + max;
    for (j, x) in row.iter_mut().enumerate() {
        *x = if ok(j) { *x - lse } else { T::zero() };
    }
}
