use super::{gemm_acc, transpose2d, Scalar, Tensor, TensorError, TensorResult};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    Embedding,
    Conv1d,
    ConvTranspose1d,
    Mean,
    Sum,
    L1Distance,
    SqL2Distance,
    CrossEntropy,
    StopGradient,
    StraightThrough,
    GatherRows,
    ConcatRows,
    SliceCols,
    ConcatCols,
    Reshape,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding",
            OpKind::Conv1d => "conv1d",
            OpKind::ConvTranspose1d => "conv_transpose1d",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::L1Distance => "l1_distance",
            OpKind::SqL2Distance => "sq_l2_distance",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::StopGradient => "stop_gradient",
            OpKind::StraightThrough => "straight_through",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::Conv1d,
        OpKind::ConvTranspose1d,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::L1Distance,
        OpKind::SqL2Distance,
        OpKind::CrossEntropy,
        OpKind::StopGradient,
        OpKind::StraightThrough,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::Reshape,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Repeat the edge frame; keeps constant inputs constant.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv1dSpec {
    pub fn same(kernel: usize) -> Self {
        Conv1dSpec {
            stride: 1,
            padding: kernel / 2,
            pad_mode: PadMode::Replicate,
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        src: Vec<Option<usize>>,
        cols: Vec<T>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        kernel: usize,
        w2: Vec<T>,
    },
    Mean(Var),
    Sum(Var),
    L1Distance(Var, Var),
    SqL2Distance(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    StopGradient,
    StraightThrough {
        encoder_out: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::ConvTranspose1d { .. } => OpKind::ConvTranspose1d,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::L1Distance(..) => OpKind::L1Distance,
            Op::SqL2Distance(..) => OpKind::SqL2Distance,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::StopGradient => OpKind::StopGradient,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are created in topological order,
/// so the backward pass is a single reverse sweep.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: perturbs the backward rule of `kind` so gradient checks
    /// can be shown to fail.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf. Leaves that require gradients but
    /// received none report zeros; constants report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> TensorResult<(usize, usize)> {
        let shape = self.value(v).shape();
        if shape.len() != 2 {
            return Err(invalid(op, format!("expected a 2-D tensor, got {shape:?}")));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(mismatch(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let (m, n) = self.expect_2d("transpose", a)?;
        let out = transpose2d(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), rg))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> TensorResult<Var> {
        let (m, n) = self.dims2(x);
        let bs = self.value(b).shape();
        if bs.len() != 1 || bs[0] != n {
            return Err(mismatch("add_bias", self.value(x).shape(), bs));
        }
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, b), rg))
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> TensorResult<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> TensorResult<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x);
        let out = Tensor::new(
            value.shape().to_vec(),
            value.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map_op(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        self.map_op(
            x,
            move |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Row-wise softmax over the last dimension. `allow`, when given, is a
    /// row-major mask of the same size; disallowed entries get probability
    /// exactly zero and a row with nothing allowed is all zeros.
    pub fn softmax(&mut self, x: Var, allow: Option<&[bool]>) -> TensorResult<Var> {
        let (m, n) = self.dims2(x);
        if let Some(mask) = allow {
            if mask.len() != m * n {
                return Err(mismatch("softmax", self.value(x).shape(), &[mask.len()]));
            }
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &data[r * n..(r + 1) * n];
            let ok = |j: usize| allow.is_none_or(|mask| mask[r * n + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            let orow = &mut out[r * n..(r + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` of width `n`.
    /// A constant row normalizes to exactly zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> TensorResult<Var> {
        let (m, n) = self.dims2(x);
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s.len() != 1 || s[0] != n {
                return Err(mismatch("layer_norm", self.value(x).shape(), s));
            }
        }
        let data = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let nf = T::lit(n as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let constant = row.iter().all(|&v| v == row[0]);
            for j in 0..n {
                let xh = if constant {
                    T::zero()
                } else {
                    (row[j] - mean) * rs
                };
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> TensorResult<Var> {
        let (v, d) = self.expect_2d("embedding", table)?;
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// 1-D convolution over time. `x: [T, c_in]`, `w: [c_out, c_in, k]`,
    /// `b: [c_out]`; output `[(T + 2p - k) / s + 1, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: Conv1dSpec) -> TensorResult<Var> {
        let (t_in, c_in) = self.expect_2d("conv1d", x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(mismatch("conv1d", self.value(x).shape(), &ws));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.value(b).shape() != [c_out] {
            return Err(mismatch("conv1d", &ws, self.value(b).shape()));
        }
        if spec.stride == 0 || t_in + 2 * spec.padding < k {
            return Err(invalid(
                "conv1d",
                format!("input length {t_in} too short for kernel {k}"),
            ));
        }
        let t_out = (t_in + 2 * spec.padding - k) / spec.stride + 1;
        let mut src = Vec::with_capacity(t_out * k);
        for t in 0..t_out {
            for kk in 0..k {
                let pos = (t * spec.stride + kk) as isize - spec.padding as isize;
                src.push(if pos >= 0 && (pos as usize) < t_in {
                    Some(pos as usize)
                } else {
                    match spec.pad_mode {
                        PadMode::Zeros => None,
                        PadMode::Replicate => Some(pos.clamp(0, t_in as isize - 1) as usize),
                    }
                });
            }
        }
        let ck = c_in * k;
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); t_out * ck];
        for t in 0..t_out {
            let crow = &mut cols[t * ck..(t + 1) * ck];
            for kk in 0..k {
                if let Some(s) = src[t * k + kk] {
                    let xrow = &xd[s * c_in..(s + 1) * c_in];
                    for ci in 0..c_in {
                        crow[ci * k + kk] = xrow[ci];
                    }
                }
            }
        }
        let wt = transpose2d(self.value(w).data(), c_out, ck);
        let mut out = vec![T::zero(); t_out * c_out];
        let bias = self.value(b).data();
        for t in 0..t_out {
            out[t * c_out..(t + 1) * c_out].copy_from_slice(bias);
        }
        gemm_acc(&cols, &wt, &mut out, t_out, ck, c_out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new([t_out, c_out], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel: k,
                src,
                cols,
            },
            rg,
        ))
    }

    /// Transposed 1-D convolution. `x: [T, c_in]`, `w: [c_in, c_out, k]`;
    /// output length `(T - 1) * s - 2p + k`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> TensorResult<Var> {
        let (t_in, c_in) = self.expect_2d("conv_transpose1d", x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[0] != c_in {
            return Err(mismatch("conv_transpose1d", self.value(x).shape(), &ws));
        }
        let (c_out, k) = (ws[1], ws[2]);
        if self.value(b).shape() != [c_out] {
            return Err(mismatch("conv_transpose1d", &ws, self.value(b).shape()));
        }
        if stride == 0 || (t_in - 1) * stride + k <= 2 * padding {
            return Err(invalid("conv_transpose1d", "empty output"));
        }
        let t_out = (t_in - 1) * stride + k - 2 * padding;
        let kc = k * c_out;
        let wd = self.value(w).data();
        let mut w2 = vec![T::zero(); c_in * kc];
        for ci in 0..c_in {
            for co in 0..c_out {
                for kk in 0..k {
                    w2[ci * kc + kk * c_out + co] = wd[(ci * c_out + co) * k + kk];
                }
            }
        }
        let mut cols = vec![T::zero(); t_in * kc];
        gemm_acc(self.value(x).data(), &w2, &mut cols, t_in, c_in, kc);
        let mut out = vec![T::zero(); t_out * c_out];
        let bias = self.value(b).data();
        for t in 0..t_out {
            out[t * c_out..(t + 1) * c_out].copy_from_slice(bias);
        }
        for t in 0..t_in {
            for kk in 0..k {
                let pos = (t * stride + kk) as isize - padding as isize;
                if pos < 0 || pos as usize >= t_out {
                    continue;
                }
                let p = pos as usize;
                let src = &cols[t * kc + kk * c_out..t * kc + (kk + 1) * c_out];
                for (o, &v) in out[p * c_out..(p + 1) * c_out].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new([t_out, c_out], out)?,
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                padding,
                kernel: k,
                w2,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().copied().sum::<T>() / T::lit(t.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    /// Mean over rows of the per-row L1 norm of `a - b`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("l1_distance", a, b)?;
        let rows = T::lit(self.value(a).rows() as f64);
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / rows;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::L1Distance(a, b), rg))
    }

    /// Mean over rows of the per-row squared L2 norm of `a - b`.
    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("sq_l2_distance", a, b)?;
        let rows = T::lit(self.value(a).rows() as f64);
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / rows;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::SqL2Distance(a, b), rg))
    }

    /// Mean token cross-entropy over rows where `mask` is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> TensorResult<Var> {
        let (t, v) = self.expect_2d("cross_entropy", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(mismatch(
                "cross_entropy",
                self.value(logits).shape(),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid("cross_entropy", "empty loss mask"));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: targets[r],
                    bound: v,
                });
            }
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / sum;
            }
            total += sum.ln() + max - row[targets[r]];
        }
        let loss = total / T::lit(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Forward value is `quantized` (bit-identical); the upstream gradient
    /// passes unchanged to `encoder_out` and nothing reaches `quantized`.
    pub fn straight_through(&mut self, quantized: Var, encoder_out: Var) -> TensorResult<Var> {
        self.same_shape("straight_through", quantized, encoder_out)?;
        let value = self.value(quantized).clone();
        let rg = self.rg(encoder_out);
        Ok(self.push(value, Op::StraightThrough { encoder_out }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> TensorResult<Var> {
        let (m, n) = self.expect_2d("gather_rows", x)?;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([idx.len(), n], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let n = self.expect_2d("concat_rows", parts[0])?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.expect_2d("concat_rows", p)?;
            if pn != n {
                return Err(mismatch(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new([rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (m, n) = self.expect_2d("slice_cols", x)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&data[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let m = self.expect_2d("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.expect_2d("concat_cols", p)?;
            if pm != m {
                return Err(mismatch(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new([m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lnode.value.shape().to_vec()));
        }
        if !lnode.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                let f = T::lit(1.25);
                g.iter_mut().for_each(|v| *v *= f);
            }
            backprop(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

fn acc<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    if let Some(buf) = acc(nodes, grads, v) {
        buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if let Some(da) = acc(nodes, grads, *a) {
                let bt = transpose2d(val(*b).data(), k, n);
                gemm_acc(g, &bt, da, m, n, k);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                let at = transpose2d(val(*a).data(), m, k);
                gemm_acc(&at, g, db, k, m, n);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).rows(), val(*a).cols());
            let gt = transpose2d(g, n, m);
            add_into(nodes, grads, *a, &gt);
        }
        Op::AddBias(x, b) => {
            add_into(nodes, grads, *x, g);
            if let Some(db) = acc(nodes, grads, *b) {
                let n = db.len();
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g);
            if let Some(db) = acc(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
            let three = T::lit(3.0);
            let xv = val(*x).data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    let th = (c * (v + a * v * v * v)).tanh();
                    let dy = half * (T::one() + th)
                        + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                    *d += gv * dy;
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let n = node.value.cols();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = node.value.cols();
            let nf = T::lit(n as f64);
            let gm = val(*gamma).data();
            if let Some(dx) = acc(nodes, grads, *x) {
                let mut dxh = vec![T::zero(); n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let grow = &g[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxh[j] = grow[j] * gm[j];
                    }
                    let s1: T = dxh.iter().copied().sum();
                    let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] += rs / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                    }
                }
            }
            if let Some(dg) = acc(nodes, grads, *gamma) {
                for (grow, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        dg[j] += grow[j] * xh[j];
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *beta) {
                for grow in g.chunks(n) {
                    db.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).cols();
            if let Some(dt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            kernel,
            src,
            cols,
        } => {
            let k = *kernel;
            let c_in = val(*x).cols();
            let c_out = node.value.cols();
            let t_out = node.value.rows();
            let ck = c_in * k;
            if let Some(dx) = acc(nodes, grads, *x) {
                let mut dcols = vec![T::zero(); t_out * ck];
                gemm_acc(g, val(*w).data(), &mut dcols, t_out, c_out, ck);
                for t in 0..t_out {
                    for kk in 0..k {
                        if let Some(s) = src[t * k + kk] {
                            let drow = &mut dx[s * c_in..(s + 1) * c_in];
                            for ci in 0..c_in {
                                drow[ci] += dcols[t * ck + ci * k + kk];
                            }
                        }
                    }
                }
            }
            if let Some(dw) = acc(nodes, grads, *w) {
                let gt = transpose2d(g, t_out, c_out);
                gemm_acc(&gt, cols, dw, c_out, t_out, ck);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for grow in g.chunks(c_out) {
                    db.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::ConvTranspose1d {
            x,
            w,
            b,
            stride,
            padding,
            kernel,
            w2,
        } => {
            let k = *kernel;
            let (t_in, c_in) = (val(*x).rows(), val(*x).cols());
            let (t_out, c_out) = (node.value.rows(), node.value.cols());
            let kc = k * c_out;
            let mut dcols = vec![T::zero(); t_in * kc];
            for t in 0..t_in {
                for kk in 0..k {
                    let pos = (t * stride + kk) as isize - *padding as isize;
                    if pos < 0 || pos as usize >= t_out {
                        continue;
                    }
                    let p = pos as usize;
                    dcols[t * kc + kk * c_out..t * kc + (kk + 1) * c_out]
                        .copy_from_slice(&g[p * c_out..(p + 1) * c_out]);
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let w2t = transpose2d(w2, c_in, kc);
                gemm_acc(&dcols, &w2t, dx, t_in, kc, c_in);
            }
            if let Some(dw) = acc(nodes, grads, *w) {
                let xt = transpose2d(val(*x).data(), t_in, c_in);
                let mut dw2 = vec![T::zero(); c_in * kc];
                gemm_acc(&xt, &dcols, &mut dw2, c_in, t_in, kc);
                for ci in 0..c_in {
                    for co in 0..c_out {
                        for kk in 0..k {
                            dw[(ci * c_out + co) * k + kk] += dw2[ci * kc + kk * c_out + co];
                        }
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for grow in g.chunks(c_out) {
                    db.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Mean(x) => {
            let n = T::lit(val(*x).numel().max(1) as f64);
            if let Some(dx) = acc(nodes, grads, *x) {
                let v = g[0] / n;
                dx.iter_mut().for_each(|d| *d += v);
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::L1Distance(a, b) => {
            let rows = T::lit(val(*a).rows() as f64);
            let s = g[0] / rows;
            let diff: Vec<T> = val(*a)
                .data()
                .iter()
                .zip(val(*b).data())
                .map(|(&x, &y)| {
                    let d = x - y;
                    if d > T::zero() {
                        s
                    } else if d < T::zero() {
                        -s
                    } else {
                        T::zero()
                    }
                })
                .collect();
            add_into(nodes, grads, *a, &diff);
            if let Some(db) = acc(nodes, grads, *b) {
                db.iter_mut().zip(&diff).for_each(|(d, &v)| *d -= v);
            }
        }
        Op::SqL2Distance(a, b) => {
            let rows = T::lit(val(*a).rows() as f64);
            let s = T::lit(2.0) * g[0] / rows;
            let diff: Vec<T> = val(*a)
                .data()
                .iter()
                .zip(val(*b).data())
                .map(|(&x, &y)| s * (x - y))
                .collect();
            add_into(nodes, grads, *a, &diff);
            if let Some(db) = acc(nodes, grads, *b) {
                db.iter_mut().zip(&diff).for_each(|(d, &v)| *d -= v);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let v = val(*logits).cols();
            let s = g[0] / T::lit(*count as f64);
            if let Some(dl) = acc(nodes, grads, *logits) {
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] += s * probs[r * v + j];
                    }
                    dl[r * v + targets[r]] -= s;
                }
            }
        }
        Op::StraightThrough { encoder_out } => {
            add_into(nodes, grads, *encoder_out, g);
        }
        Op::GatherRows { x, idx } => {
            let n = val(*x).cols();
            if let Some(dx) = acc(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] += g[r * n + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).numel();
                add_into(nodes, grads, p, &g[off..off + len]);
                off += len;
            }
        }
        Op::SliceCols { x, start } => {
            let n = val(*x).cols();
            let len = node.value.cols();
            if let Some(dx) = acc(nodes, grads, *x) {
                for (r, grow) in g.chunks(len).enumerate() {
                    for (j, &v) in grow.iter().enumerate() {
                        dx[r * n + start + j] += v;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(dp) = acc(nodes, grads, p) {
                    for (r, drow) in dp.chunks_mut(w).enumerate() {
                        for (j, d) in drow.iter_mut().enumerate() {
                            *d += g[r * n + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Reshape(x) => add_into(nodes, grads, *x, g),
    }
}
