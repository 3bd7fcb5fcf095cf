use crate::{DiffError, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Weight kept on the old running value at each update.
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
            momentum: T::of(0.9),
            eps: T::of(1e-5),
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormStats<U> {
        BatchNormStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
            momentum: U::of(self.momentum.as_f64()),
            eps: U::of(self.eps.as_f64()),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Unary(Unary, Var),
    Affine(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        weights: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRows {
        x: Var,
        times: usize,
    },
    Reshape(Var),
    GroupWeightedSum {
        weights: Var,
        rows: Var,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    ConvTime {
        input: Var,
        kernels: Var,
        bias: Var,
        seq_len: usize,
        window: usize,
    },
    MaxOverTime {
        x: Var,
        seq_len: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not need a
    /// gradient or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Record of executed operations supporting reverse-mode replay.
///
/// A tape is single-threaded and append-only; values are immutable once
/// recorded. Matrices are row-major and one-dimensional tensors of length `n`
/// are treated as `1 x n` rows.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; it is differentiated iff it requires grad.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Records a tensor as a differentiated leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.values().to_vec(), true)
    }

    /// Records a tensor as a constant leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.values().to_vec(), false)
    }

    pub fn constant_values(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), values)?;
        Ok(self.constant(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        DiffError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("elementwise", a, b));
        }
        let out: Vec<T> = {
            let (av, bv) = (self.value(a), self.value(b));
            match kind {
                Binary::Add => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
                Binary::Mul => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
            }
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r, n2) = self.dims(row);
        if r != 1 || n != n2 {
            return Err(self.mismatch("add_row", a, row));
        }
        let mut out = self.value(a).to_vec();
        {
            let rv = self.value(row);
            for i in 0..m {
                for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                    *o += b;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Unary(kind, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Affine(x, scale), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Row-wise softmax, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return Err(DiffError::Invalid("softmax over empty rows".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n).take(m) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows(x), &[x]))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return Err(DiffError::Invalid("log-softmax over empty rows".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n).take(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Gathers rows of a `V x M` table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, width) = self.dims(table);
        if ids.is_empty() {
            return Err(DiffError::Invalid("embedding lookup of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * width);
        {
            let tv = self.value(table);
            for &id in ids {
                if id >= vocab {
                    return Err(DiffError::Index {
                        op: "embed_lookup",
                        index: id,
                        bound: vocab,
                    });
                }
                out.extend_from_slice(&tv[id * width..(id + 1) * width]);
            }
        }
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Selects one column per row, producing an `m x 1` column.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if cols.len() != m {
            return Err(DiffError::Shape {
                op: "pick",
                lhs: self.shape(x).to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(DiffError::Index {
                    op: "pick",
                    index: c,
                    bound: n,
                });
            }
            out.push(self.value(x)[i * n + c]);
        }
        Ok(self.push(
            vec![m, 1],
            out,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if weights.len() != m {
            return Err(DiffError::Shape {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let mut out = self.value(x).to_vec();
        for (row, &w) in out.chunks_mut(n).zip(weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::ScaleRows {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(DiffError::Index {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DiffError::Invalid("concat of zero tensors".into()));
        };
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Repeats each row `times` times consecutively: `B x A -> (B*times) x A`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(DiffError::Invalid("repeat_rows with zero repeats".into()));
        }
        let (m, n) = self.dims(x);
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * n * times);
        for row in v.chunks(n) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(vec![m * times, n], out, Op::RepeatRows { x, times }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(DiffError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// For each group `b`, the weighted sum `sum_k weights[b,k] * rows[b*K+k]`:
    /// `(B x K, (B*K) x D) -> B x D`.
    pub fn group_weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (b, k) = self.dims(weights);
        let (r, d) = self.dims(rows);
        if r != b * k {
            return Err(self.mismatch("group_weighted_sum", weights, rows));
        }
        let mut out = vec![T::zero(); b * d];
        {
            let (wv, rv) = (self.value(weights), self.value(rows));
            for g in 0..b {
                let orow = &mut out[g * d..(g + 1) * d];
                for j in 0..k {
                    let w = wv[g * k + j];
                    let src = &rv[(g * k + j) * d..(g * k + j + 1) * d];
                    for (o, &s) in orow.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        Ok(self.push(
            vec![b, d],
            out,
            Op::GroupWeightedSum { weights, rows },
            &[weights, rows],
        ))
    }

    /// Mean over consecutive groups of `group` rows: `(B*group) x D -> B x D`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, d) = self.dims(x);
        if group == 0 || r % group != 0 {
            return Err(DiffError::Shape {
                op: "group_mean",
                lhs: self.shape(x).to_vec(),
                rhs: vec![group],
            });
        }
        let b = r / group;
        let scale = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); b * d];
        {
            let v = self.value(x);
            for g in 0..b {
                for j in 0..group {
                    let src = &v[(g * group + j) * d..(g * group + j + 1) * d];
                    for (o, &s) in out[g * d..(g + 1) * d].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(self.push(vec![b, d], out, Op::GroupMean { x, group }, &[x]))
    }

    /// Full-width temporal convolution with stride 1 and no padding.
    ///
    /// `input` stacks `B` sequences of `seq_len` rows of width `M`. `kernels`
    /// holds `F` filters, each a flattened `window x M` block, and `bias` is
    /// `1 x F`. Output is `(B * (seq_len - window + 1)) x F` where entry
    /// `(b, j, f)` is `<kernel_f, S_b[j..j+window]> + bias_f`.
    pub fn conv_time(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        seq_len: usize,
        window: usize,
    ) -> Result<Var> {
        let (rows, width) = self.dims(input);
        let (filters, kw) = self.dims(kernels);
        let (br, bf) = self.dims(bias);
        if window == 0 || window > seq_len {
            return Err(DiffError::Config(format!(
                "convolution window {window} does not fit a sequence of length {seq_len}"
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 || kw != window * width {
            return Err(self.mismatch("conv_time", input, kernels));
        }
        if br != 1 || bf != filters {
            return Err(self.mismatch("conv_time", kernels, bias));
        }
        let batch = rows / seq_len;
        let positions = seq_len - window + 1;
        let mut out = vec![T::zero(); batch * positions * filters];
        {
            let (iv, kv, bv) = (self.value(input), self.value(kernels), self.value(bias));
            for b in 0..batch {
                for j in 0..positions {
                    let start = (b * seq_len + j) * width;
                    let patch = &iv[start..start + kw];
                    let orow = &mut out[(b * positions + j) * filters..][..filters];
                    for (f, o) in orow.iter_mut().enumerate() {
                        let k = &kv[f * kw..(f + 1) * kw];
                        let mut acc = bv[f];
                        for (&a, &w) in patch.iter().zip(k) {
                            acc += a * w;
                        }
                        *o = acc;
                    }
                }
            }
        }
        Ok(self.push(
            vec![batch * positions, filters],
            out,
            Op::ConvTime {
                input,
                kernels,
                bias,
                seq_len,
                window,
            },
            &[input, kernels, bias],
        ))
    }

    /// Column-wise maximum over each group of `seq_len` consecutive rows.
    /// Ties resolve to the earliest row.
    pub fn max_over_time(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, f) = self.dims(x);
        if seq_len == 0 || rows == 0 || rows % seq_len != 0 {
            return Err(DiffError::Invalid(format!(
                "max_over_time over {rows} rows in groups of {seq_len}"
            )));
        }
        let batch = rows / seq_len;
        let mut out = vec![T::zero(); batch * f];
        let mut argmax = vec![0usize; batch * f];
        {
            let v = self.value(x);
            for b in 0..batch {
                for c in 0..f {
                    let mut best = v[b * seq_len * f + c];
                    let mut at = 0;
                    for j in 1..seq_len {
                        let cand = v[(b * seq_len + j) * f + c];
                        if cand > best {
                            best = cand;
                            at = j;
                        }
                    }
                    out[b * f + c] = best;
                    argmax[b * f + c] = at;
                }
            }
        }
        Ok(self.push(
            vec![batch, f],
            out,
            Op::MaxOverTime { x, seq_len, argmax },
            &[x],
        ))
    }

    /// Batch normalization over the rows of an `N x F` matrix.
    ///
    /// In train mode the batch statistics normalize the input and are folded
    /// into `stats`; in infer mode `stats` is used as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let (n, f) = self.dims(x);
        if self.value(gamma).len() != f || self.value(beta).len() != f || stats.features() != f
        {
            return Err(self.mismatch("batch_norm", x, gamma));
        }
        let (mean, var) = match mode {
            NormMode::Train => {
                let v = self.value(x);
                let inv_n = T::one() / T::of(n as f64);
                let mut mean = vec![T::zero(); f];
                for row in v.chunks(f) {
                    for (m, &a) in mean.iter_mut().zip(row) {
                        *m += a;
                    }
                }
                mean.iter_mut().for_each(|m| *m *= inv_n);
                let mut var = vec![T::zero(); f];
                for row in v.chunks(f) {
                    for ((s, &a), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (a - m) * (a - m);
                    }
                }
                var.iter_mut().for_each(|s| *s *= inv_n);
                let keep = stats.momentum;
                for j in 0..f {
                    stats.mean[j] = keep * stats.mean[j] + (T::one() - keep) * mean[j];
                    stats.var[j] = keep * stats.var[j] + (T::one() - keep) * var[j];
                }
                (mean, var)
            }
            NormMode::Infer => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + stats.eps).sqrt()).collect();
        let mut xhat = self.value(x).to_vec();
        for row in xhat.chunks_mut(f) {
            for ((a, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *a = (*a - m) * is;
            }
        }
        let mut out = xhat.clone();
        {
            let (gv, bv) = (self.value(gamma), self.value(beta));
            for row in out.chunks_mut(f) {
                for ((a, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                    *a = g * *a + b;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == NormMode::Train,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- reverse pass --------------------------------------------------------

    /// Differentiates the scalar `loss` w.r.t. every recorded value that
    /// needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(DiffError::NonScalarLoss(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !node.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, g, lower);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut acc = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                acc += x * y;
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            &Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                match kind {
                    Binary::Add => {
                        if let Some(ga) = self.slot(grads, a) {
                            add_into(ga, g);
                        }
                        if let Some(gb) = self.slot(grads, b) {
                            add_into(gb, g);
                        }
                    }
                    Binary::Mul => {
                        if let Some(ga) = self.slot(grads, a) {
                            for ((o, &d), &y) in ga.iter_mut().zip(g).zip(bv) {
                                *o += d * y;
                            }
                        }
                        if let Some(gb) = self.slot(grads, b) {
                            for ((o, &d), &x) in gb.iter_mut().zip(g).zip(av) {
                                *o += d * x;
                            }
                        }
                    }
                }
            }
            &Op::AddRow(a, row) => {
                let n = self.dims(a).1;
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gr) = self.slot(grads, row) {
                    for grow in g.chunks(n) {
                        add_into(gr, grow);
                    }
                }
            }
            &Op::Unary(kind, x) => {
                let (xv, y) = (self.value(x), &node.value);
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..gx.len() {
                        let local = match kind {
                            Unary::Sigmoid => y[i] * (T::one() - y[i]),
                            Unary::Tanh => T::one() - y[i] * y[i],
                            Unary::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        gx[i] += g[i] * local;
                    }
                }
            }
            &Op::Affine(x, scale) => {
                if let Some(gx) = self.slot(grads, x) {
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o += scale * d;
                    }
                }
            }
            &Op::Square(x) => {
                let xv = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for ((o, &d), &a) in gx.iter_mut().zip(g).zip(xv) {
                        *o += (a + a) * d;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    let d = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|o| *o += d);
                }
            }
            &Op::SoftmaxRows(x) => {
                let n = self.dims(x).1;
                let y = &node.value;
                if let Some(gx) = self.slot(grads, x) {
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &d), &p) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += p * (d - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                let n = self.dims(x).1;
                let y = &node.value;
                if let Some(gx) = self.slot(grads, x) {
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: T = grow.iter().copied().sum();
                        for ((o, &d), &lp) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += d - lp.exp() * total;
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let width = self.dims(*table).1;
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Pick { x, cols } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &c) in cols.iter().enumerate() {
                        gx[i * n + c] += g[i];
                    }
                }
            }
            Op::ScaleRows { x, weights } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((orow, grow), &w) in gx.chunks_mut(n).zip(g.chunks(n)).zip(weights) {
                        for (o, &d) in orow.iter_mut().zip(grow) {
                            *o += w * d;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let n = self.dims(x).1;
                let len = node.shape[1];
                if let Some(gx) = self.slot(grads, x) {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + len], grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for (i, orow) in gp.chunks_mut(c).enumerate() {
                            add_into(orow, &g[i * total + offset..i * total + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            &Op::RepeatRows { x, times } => {
                let n = self.dims(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for (i, orow) in gx.chunks_mut(n).enumerate() {
                        for t in 0..times {
                            let r = i * times + t;
                            add_into(orow, &g[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    add_into(gx, g);
                }
            }
            &Op::GroupWeightedSum { weights, rows } => {
                let (b, k) = self.dims(weights);
                let d = self.dims(rows).1;
                let (wv, rv) = (self.value(weights), self.value(rows));
                if let Some(gw) = self.slot(grads, weights) {
                    for grp in 0..b {
                        let grow = &g[grp * d..(grp + 1) * d];
                        for j in 0..k {
                            let src = &rv[(grp * k + j) * d..(grp * k + j + 1) * d];
                            gw[grp * k + j] += grow.iter().zip(src).map(|(&a, &s)| a * s).sum::<T>();
                        }
                    }
                }
                if let Some(gr) = self.slot(grads, rows) {
                    for grp in 0..b {
                        let grow = &g[grp * d..(grp + 1) * d];
                        for j in 0..k {
                            let w = wv[grp * k + j];
                            for (o, &a) in gr[(grp * k + j) * d..(grp * k + j + 1) * d].iter_mut().zip(grow) {
                                *o += w * a;
                            }
                        }
                    }
                }
            }
            &Op::GroupMean { x, group } => {
                let d = self.dims(x).1;
                let scale = T::one() / T::of(group as f64);
                if let Some(gx) = self.slot(grads, x) {
                    for (r, orow) in gx.chunks_mut(d).enumerate() {
                        let grp = r / group;
                        for (o, &a) in orow.iter_mut().zip(&g[grp * d..(grp + 1) * d]) {
                            *o += scale * a;
                        }
                    }
                }
            }
            &Op::ConvTime {
                input,
                kernels,
                bias,
                seq_len,
                window,
            } => {
                let width = self.dims(input).1;
                let (filters, kw) = self.dims(kernels);
                let positions = seq_len - window + 1;
                let batch = node.shape[0] / positions;
                let (iv, kv) = (self.value(input), self.value(kernels));
                if let Some(gi) = self.slot(grads, input) {
                    for b in 0..batch {
                        for j in 0..positions {
                            let start = (b * seq_len + j) * width;
                            let grow = &g[(b * positions + j) * filters..][..filters];
                            let patch = &mut gi[start..start + kw];
                            for (f, &d) in grow.iter().enumerate() {
                                for (o, &w) in patch.iter_mut().zip(&kv[f * kw..(f + 1) * kw]) {
                                    *o += d * w;
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, kernels) {
                    for b in 0..batch {
                        for j in 0..positions {
                            let start = (b * seq_len + j) * width;
                            let patch = &iv[start..start + kw];
                            let grow = &g[(b * positions + j) * filters..][..filters];
                            for (f, &d) in grow.iter().enumerate() {
                                for (o, &a) in gk[f * kw..(f + 1) * kw].iter_mut().zip(patch) {
                                    *o += d * a;
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, bias) {
                    for grow in g.chunks(filters) {
                        add_into(gb, grow);
                    }
                }
            }
            Op::MaxOverTime { x, seq_len, argmax } => {
                let f = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (idx, &at) in argmax.iter().enumerate() {
                        let (b, c) = (idx / f, idx % f);
                        gx[(b * seq_len + at) * f + c] += g[idx];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, f) = self.dims(*x);
                let gv = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                        for ((o, &d), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += d * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks(f) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    if *train {
                        let mut sum_d = vec![T::zero(); f];
                        let mut sum_dh = vec![T::zero(); f];
                        for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                            for j in 0..f {
                                let d = grow[j] * gv[j];
                                sum_d[j] += d;
                                sum_dh[j] += d * hrow[j];
                            }
                        }
                        let inv_n = T::one() / T::of(n as f64);
                        for ((orow, grow), hrow) in gx.chunks_mut(f).zip(g.chunks(f)).zip(xhat.chunks(f)) {
                            for j in 0..f {
                                let d = grow[j] * gv[j];
                                orow[j] += inv_std[j] * (d - inv_n * sum_d[j] - hrow[j] * inv_n * sum_dh[j]);
                            }
                        }
                    } else {
                        for (orow, grow) in gx.chunks_mut(f).zip(g.chunks(f)) {
                            for j in 0..f {
                                orow[j] += grow[j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        tape.param(&Tensor::new(shape.to_vec(), v.to_vec()).unwrap())
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::<f64>::new();
        let i = mat(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = mat(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let r = mat(&mut t, &[1, 2], &[1.0, 2.0]);
        let c = mat(&mut t, &[2, 1], &[3.0, 4.0]);
        let p = t.matmul(r, c).unwrap();
        assert_eq!(t.value(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(&Tensor::zeros(&[2, 3]));
        let b = t.constant(&Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(DiffError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut t = Tape::<f32>::new();
        let z = t.constant(&Tensor::new(vec![2], vec![0.0, -1.0]).unwrap());
        let s = t.sigmoid(z);
        let th = t.tanh(z);
        let r = t.relu(z);
        assert_eq!(t.value(s)[0], 0.5);
        assert_eq!(t.value(th)[0], 0.0);
        assert_eq!(t.value(r)[1], 0.0);
        let other = t.constant(&Tensor::zeros(&[3]));
        assert!(t.add(z, other).is_err());
        assert!(t.mul(z, other).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for &p in t.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = t.constant(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        assert!((t.value(y)[0] - 1.0).abs() < 1e-7);
        assert!(t.value(y)[1] >= 0.0 && t.value(y)[1] < 1e-30);
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, &[1, 3], &[1.0, 2.0, 3.0]);
        let y = t.softmax_rows(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &p) in t.value(y).iter().enumerate() {
            assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_lookup_gathers_and_scatters() {
        let mut t = Tape::<f64>::new();
        let table = mat(&mut t, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = t.embed_lookup(table, &[0]).unwrap();
        assert_eq!(t.value(e), &[1.0, 2.0]);
        let e = t.embed_lookup(table, &[2, 2]).unwrap();
        let l = t.sum(e);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        match t.embed_lookup(table, &[3]) {
            Err(DiffError::Index { index, bound, .. }) => assert_eq!((index, bound), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_time_degenerate_windows() {
        let mut t = Tape::<f64>::new();
        let s = mat(&mut t, &[4, 1], &[1.0, -2.0, 3.0, 0.5]);
        let k = mat(&mut t, &[1, 1], &[1.0]);
        let b = mat(&mut t, &[1, 1], &[0.0]);
        let y = t.conv_time(s, k, b, 4, 1).unwrap();
        assert_eq!(t.value(y), &[1.0, -2.0, 3.0, 0.5]);

        let k4 = mat(&mut t, &[1, 4], &[1.0, 1.0, 1.0, 1.0]);
        let y = t.conv_time(s, k4, b, 4, 4).unwrap();
        assert_eq!(t.shape(y), &[1, 1]);
        assert_eq!(t.value(y), &[2.5]);

        let k5 = mat(&mut t, &[1, 5], &[1.0; 5]);
        assert!(matches!(t.conv_time(s, k5, b, 4, 5), Err(DiffError::Config(_))));
    }

    #[test]
    fn max_over_time_tie_goes_to_first() {
        let mut t = Tape::<f64>::new();
        let v = mat(&mut t, &[3, 1], &[1.0, 5.0, 3.0]);
        let m = t.max_over_time(v, 3).unwrap();
        assert_eq!(t.value(m), &[5.0]);

        let v = mat(&mut t, &[3, 1], &[2.0, 2.0, 2.0]);
        let m = t.max_over_time(v, 3).unwrap();
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        assert_eq!(t.value(m), &[2.0]);
        assert_eq!(g.get(v).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_norm_edge_cases() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, &[3, 2], &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
        let one = mat(&mut t, &[1, 2], &[1.0, 1.0]);
        let zero = mat(&mut t, &[1, 2], &[0.0, 0.0]);
        let mut stats = BatchNormStats::new(2);
        let y = t.batch_norm(x, one, zero, &mut stats, NormMode::Train).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
        // running stats moved 10% toward the batch statistics
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - 0.9).abs() < 1e-12);

        let beta = mat(&mut t, &[1, 2], &[0.5, -0.25]);
        let y = t.batch_norm(x, zero, beta, &mut stats, NormMode::Infer).unwrap();
        assert_eq!(t.value(y), &[0.5, -0.25, 0.5, -0.25, 0.5, -0.25]);

        let single = mat(&mut t, &[1, 2], &[3.0, 4.0]);
        let y = t.batch_norm(single, one, zero, &mut stats, NormMode::Train).unwrap();
        assert!(t.value(y).iter().all(|v| v.is_finite()));

        let bad = mat(&mut t, &[1, 3], &[1.0, 2.0, 3.0]);
        let y = t.batch_norm(x, bad, zero, &mut stats, NormMode::Train);
        assert!(y.is_err());
    }

    #[test]
    fn backward_of_sum_and_zero_scaled() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let y = t.tanh(x);
        let y = t.sum(y);
        let z = t.affine(y, 0.0, 0.0);
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(DiffError::NonScalarLoss(_))));
    }
}
