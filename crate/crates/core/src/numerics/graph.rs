//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in execution order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! reverse and accumulates vector-Jacobian products into per-node gradient
//! buffers. Parameter leaves borrow their storage from the caller, which keeps
//! the per-step cost of binding a model's weights at zero copies.

use std::borrow::Cow;

use super::real::Real;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a single-image 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = self.positions();
        let mut cols = vec![T::zero(); self.patch() * p];
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src_row = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = input[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], input_grad: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = self.positions();
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst_row = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                input_grad[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(NodeId, NodeId),
    AddRow {
        x: NodeId,
        bias: NodeId,
        cols: usize,
    },
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        len: usize,
        inner: usize,
    },
    CausalSoftmax {
        x: NodeId,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cols: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
        width: usize,
    },
    SliceCols {
        x: NodeId,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(NodeId, usize)>,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geo: ConvGeometry,
        cols: Vec<T>,
    },
    MeanRows {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<T>,
        vocab: usize,
        count: usize,
    },
    Sum(NodeId),
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications with their saved activations.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    non_finite: Option<(NodeId, &'static str)>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool, name: &'static str) -> NodeId {
        let id = NodeId(self.nodes.len());
        if self.non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.non_finite = Some((id, name));
        }
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that borrows the tensor's storage; its `requires_grad` flag is honoured.
    pub fn param(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad(), "leaf")
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, rg, "leaf")
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId, NumericsError> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.input(t))
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// First node whose forward value contained NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match self.non_finite {
            Some((id, op)) => Err(NumericsError::NonFinite { op, node: id.0 }),
            None => Ok(()),
        }
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `op(a) · op(b)` where `a_t`/`b_t` select the transposed operand.
    pub fn matmul_t(&mut self, a: NodeId, a_t: bool, b: NodeId, b_t: bool) -> Result<NodeId, NumericsError> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), a_t, self.value(b), b_t, &mut out, false);
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Cow::Owned(out),
            vec![m, n],
            Op::MatMul { a, b, a_t, b_t, m, k, n },
            rg,
            "matmul",
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg, "add"))
    }

    /// Adds a length-`cols` vector to every row of a `rows×cols` matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (_, cols) = self.dims2(x, "add_row")?;
        if self.value(bias).len() != cols {
            return Err(mismatch("add_row", format!("bias {:?} for {cols} columns", self.shape(bias))));
        }
        let b = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| *v + *bb))
            .collect();
        let rg = self.needs(&[x, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::AddRow { x, bias, cols }, rg, "add_row"))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b), rg, "mul"))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let out: Vec<T> = self.value(x).iter().map(|v| *v * s).collect();
        let rg = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(x, s), rg, "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = T::lit(SQRT_2_OVER_PI);
        let a = T::lit(GELU_CUBIC);
        let half = T::lit(0.5);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let rg = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu(x), rg, "gelu")
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        for block in out.chunks_mut(len * inner) {
            for i in 0..inner {
                softmax_strided(block, i, inner, len, len);
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x, len, inner }, rg, "softmax"))
    }

    /// Row softmax where row `i` only attends to columns `j ≤ i`; masked weights are exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.dims2(x, "causal_softmax")?;
        if rows > cols {
            return Err(mismatch("causal_softmax", format!("{rows} rows over {cols} keys")));
        }
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_mut(cols).enumerate() {
            softmax_strided(row, 0, 1, cols, i + 1);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), vec![rows, cols], Op::CausalSoftmax { x, cols }, rg, "causal_softmax"))
    }

    /// Per-row normalisation to zero mean and unit variance, then `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId, NumericsError> {
        let (_, cols) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(mismatch("layer_norm", format!("affine params for {cols} columns")));
        }
        let n = T::from_usize(cols).expect("usize fits");
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut normalized = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                normalized.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                normalized,
                inv_std,
            },
            rg,
            "layer_norm",
        ))
    }

    /// Selects rows of a matrix (embedding lookup, row permutation).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let (rows, width) = self.dims2(table, "gather_rows")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(mismatch("gather_rows", format!("row {bad} of {rows}")));
        }
        if ids.is_empty() {
            return Err(mismatch("gather_rows", "no rows selected".into()));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), width],
            Op::Gather {
                table,
                ids: ids.to_vec(),
                width,
            },
            rg,
            "gather_rows",
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(mismatch("slice_cols", format!("[{start}, {}) of {cols}", start + len)));
        }
        let out: Vec<T> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), vec![rows, len], Op::SliceCols { x, cols, start, len }, rg, "slice_cols"))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let rows = self.dims2(*parts.first().ok_or_else(|| mismatch("concat_cols", "nothing to join".into()))?, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Cow::Owned(out), vec![rows, total], Op::ConcatCols { parts: widths }, rg, "concat_cols"))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let out = transpose_vec(self.value(x), rows, cols);
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), vec![cols, rows], Op::Transpose { x, rows, cols }, rg, "transpose"))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(x), rg, "reshape"))
    }

    /// Convolution of a `[c_in, h, w]` input by `[c_out, c_in, k, k]` weights plus per-channel bias.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId, NumericsError> {
        let (cin, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(mismatch("conv2d", format!("input {s:?} is not [c, h, w]"))),
        };
        let (cout, kernel) = match self.shape(weight) {
            [o, i, kh, kw] if *i == cin && kh == kw => (*o, *kh),
            s => return Err(mismatch("conv2d", format!("weight {s:?} for {cin} input channels"))),
        };
        if self.value(bias).len() != cout {
            return Err(mismatch("conv2d", format!("bias {:?} for {cout} channels", self.shape(bias))));
        }
        if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(mismatch("conv2d", format!("kernel {kernel} stride {stride} on {h}x{w}")));
        }
        let geo = ConvGeometry {
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel,
            stride,
            pad,
        };
        let cols = geo.im2col(self.value(input));
        let p = geo.positions();
        let mut out = vec![T::zero(); cout * p];
        for (c, row) in out.chunks_mut(p).enumerate() {
            let b = self.value(bias)[c];
            row.iter_mut().for_each(|v| *v = b);
        }
        T::gemm(cout, geo.patch(), p, self.value(weight), false, &cols, false, &mut out, true);
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Cow::Owned(out),
            vec![cout, geo.out_h(), geo.out_w()],
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
                cols,
            },
            rg,
            "conv2d",
        ))
    }

    /// Column means of a matrix, shape `[cols]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.dims2(x, "mean_rows")?;
        let mut out = vec![T::zero(); cols];
        for row in self.value(x).chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let n = T::from_usize(rows).expect("usize fits");
        out.iter_mut().for_each(|v| *v /= n);
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), vec![cols], Op::MeanRows { x, rows, cols }, rg, "mean_rows"))
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` keeps).
    pub fn dropout(&mut self, x: NodeId, keep: &[bool], rate: T) -> Result<NodeId, NumericsError> {
        if keep.len() != self.value(x).len() {
            return Err(mismatch("dropout", format!("{} mask entries", keep.len())));
        }
        let s = T::one() / (T::one() - rate);
        let mask: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let out: Vec<T> = self.value(x).iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let rg = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Dropout { x, mask }, rg, "dropout"))
    }

    /// Mean token negative log-likelihood over rows where `ignore[t]` is false.
    pub fn cross_entropy_masked(&mut self, logits: NodeId, targets: &[usize], ignore: &[bool]) -> Result<NodeId, NumericsError> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || ignore.len() != rows {
            return Err(mismatch("cross_entropy", format!("{} targets / {} mask for {rows} rows", targets.len(), ignore.len())));
        }
        if let Some(bad) = targets.iter().zip(ignore).find(|(t, m)| !**m && **t >= vocab) {
            return Err(mismatch("cross_entropy", format!("target {} outside vocabulary of {vocab}", bad.0)));
        }
        let keep: Vec<bool> = ignore.iter().map(|m| !m).collect();
        let count = keep.iter().filter(|k| **k).count();
        if count == 0 {
            return Err(NumericsError::AllMasked);
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (t, row) in self.value(logits).chunks(vocab).enumerate() {
            if !keep[t] {
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[t * vocab..(t + 1) * vocab];
            let mut z = T::zero();
            for (pi, v) in p.iter_mut().zip(row) {
                *pi = (*v - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|v| *v /= z);
            total += max + z.ln() - row[targets[t]];
        }
        let n = T::from_usize(count).expect("usize fits");
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Cow::Owned(vec![total / n]),
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep,
                probs,
                vocab,
                count,
            },
            rg,
            "cross_entropy",
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), rg, "sum")
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the last backward pass, zeros when the node was unreachable.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<T> {
        self.grad(id)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.value(id).len()])
    }

    /// Accumulates `∂loss/∂node` for every node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.check_finite()?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        // Split borrows: node data is read-only while gradient buffers are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |id: NodeId| -> &[T] { &nodes[id.0].value };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = g · op(B)ᵀ, or its transpose when A is stored transposed.
                    if *a_t {
                        T::gemm(k, n, m, val(*b), *b_t, g, true, ga, true);
                    } else {
                        T::gemm(m, n, k, g, false, val(*b), !*b_t, ga, true);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if *b_t {
                        T::gemm(n, m, k, g, true, val(*a), *a_t, gb, true);
                    } else {
                        T::gemm(k, m, n, val(*a), !*a_t, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(ga) = slot(nodes, grads, id) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::AddRow { x, bias, cols } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in g.chunks(*cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b * *s);
                }
            }
            Op::Gelu(x) => {
                let c = T::lit(SQRT_2_OVER_PI);
                let a = T::lit(GELU_CUBIC);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let vx = val(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        let v = vx[i];
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Softmax { x, len, inner } => {
                let y = &nodes[idx].value;
                let (len, inner) = (*len, *inner);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (bo, block) in y.chunks(len * inner).enumerate() {
                        let base = bo * len * inner;
                        for i in 0..inner {
                            let mut dot = T::zero();
                            for j in 0..len {
                                let p = base + j * inner + i;
                                dot += g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner + i;
                                gx[p] += block[j * inner + i] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax { x, cols } => {
                let y = &nodes[idx].value;
                let cols = *cols;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, row) in y.chunks(cols).enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = (0..=r).map(|j| gr[j] * row[j]).sum();
                        for j in 0..=r {
                            gx[r * cols + j] += row[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                normalized,
                inv_std,
            } => {
                let cols = *cols;
                let n = T::from_usize(cols).expect("usize fits");
                let gam = val(*gamma);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &rs) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let h = &normalized[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * h[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for j in 0..cols {
                            gx[r * cols + j] += rs * (gr[j] * gam[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (gr, h) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for gr in g.chunks(cols) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += *b);
                    }
                }
            }
            Op::Gather { table, ids, width } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        gt[i * width..(i + 1) * width].iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                    }
                }
            }
            Op::SliceCols { x, cols, start, len } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, gr) in g.chunks(*len).enumerate() {
                        let dst = &mut gx[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(gr).for_each(|(a, b)| *a += *b);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if let Some(gp) = slot(nodes, grads, p) {
                        for (r, gr) in g.chunks(total).enumerate() {
                            gp[r * c..(r + 1) * c].iter_mut().zip(&gr[offset..offset + c]).for_each(|(a, b)| *a += *b);
                        }
                    }
                    offset += c;
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
                cols,
            } => {
                let p = geo.positions();
                let patch = geo.patch();
                if let Some(gw) = slot(nodes, grads, *weight) {
                    T::gemm(geo.out_channels, p, patch, g, false, cols, true, gw, true);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for (c, row) in g.chunks(p).enumerate() {
                        gb[c] += row.iter().copied().sum::<T>();
                    }
                }
                if nodes[input.0].requires_grad {
                    let mut dcols = vec![T::zero(); patch * p];
                    T::gemm(patch, geo.out_channels, p, val(*weight), true, g, false, &mut dcols, false);
                    if let Some(gi) = slot(nodes, grads, *input) {
                        geo.col2im(&dcols, gi);
                    }
                }
            }
            Op::MeanRows { x, rows, cols } => {
                let n = T::from_usize(*rows).expect("usize fits");
                if let Some(gx) = slot(nodes, grads, *x) {
                    for row in gx.chunks_mut(*cols) {
                        row.iter_mut().zip(g).for_each(|(a, b)| *a += *b / n);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                probs,
                vocab,
                count,
            } => {
                let scale = g[0] / T::from_usize(*count).expect("usize fits");
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (t, &k) in keep.iter().enumerate() {
                        if !k {
                            continue;
                        }
                        let row = &mut gl[t * vocab..(t + 1) * vocab];
                        let p = &probs[t * vocab..(t + 1) * vocab];
                        for j in 0..*vocab {
                            row[j] += scale * p[j];
                        }
                        row[targets[t]] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }

}

fn slot<'g, T: Real>(nodes: &[Node<'_, T>], grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let n = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
}

/// In-place softmax over `len` strided entries starting at `offset`; entries at
/// positions `>= visible` are set to exactly zero.
fn softmax_strided<T: Real>(data: &mut [T], offset: usize, stride: usize, len: usize, visible: usize) {
    let mut max = T::neg_infinity();
    for j in 0..visible {
        max = max.max(data[offset + j * stride]);
    }
    let mut z = T::zero();
    for j in 0..visible {
        let p = offset + j * stride;
        data[p] = (data[p] - max).exp();
        z += data[p];
    }
    for j in 0..len {
        let p = offset + j * stride;
        data[p] = if j < visible { data[p] / z } else { T::zero() };
    }
}

pub(crate) fn transpose_vec<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(g: &mut Graph<'_, f64>, rows: usize, cols: usize, v: &[f64]) -> NodeId {
        g.constant(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let s = mat(&mut g, 1, 1, &[2.0]);
        let t = mat(&mut g, 1, 1, &[3.0]);
        let y = g.matmul(s, t).unwrap();
        assert_eq!(g.value(y), &[6.0]);
        assert!(matches!(g.matmul(a, s), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (na, nb) = (mat(&mut g, 3, 3, &a), mat(&mut g, 3, 3, &b));
        let y = g.matmul(na, nb).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
                assert!((g.value(y)[i * 3 + j] - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let c = mat(&mut g, 1, 4, &[3.0; 4]);
        let y = g.softmax(c, 1).unwrap();
        assert!(g.value(y).iter().all(|v| (v - 0.25).abs() < 1e-15));
        let x = mat(&mut g, 1, 2, &[0.0, 2f64.ln()]);
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y)[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 3, &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-30.0..30.0)).collect();
            let shift = rng.random_range(-100.0..100.0);
            let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let mut g = Graph::new();
            let (a, b) = (mat(&mut g, 1, 7, &x), mat(&mut g, 1, 7, &xs));
            let (ya, yb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
            let total: f64 = g.value(ya).iter().sum();
            assert!((total - 1.0).abs() <= 1e-9);
            for (p, q) in g.value(ya).iter().zip(g.value(yb)) {
                assert!(*p > 0.0 || x.iter().any(|v| *v > 0.0));
                assert!((p - q).abs() <= 1e-9);
            }
            // naive oracle
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            for (p, v) in g.value(ya).iter().zip(&x) {
                assert!((p - v.exp() / z).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut g = Graph::new();
        let x = mat(&mut g, 3, 3, &[1.0, 5.0, 9.0, 2.0, 2.0, 7.0, 0.0, 1.0, 2.0]);
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(&[4], vec![1.0; 4]).unwrap();
        let beta = g.constant(&[4], vec![0.0; 4]).unwrap();
        let c = mat(&mut g, 1, 4, &[2.5; 4]);
        let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));
        let unit = [-1.0, 1.0, -1.0, 1.0];
        let u = mat(&mut g, 1, 4, &unit);
        let y = g.layer_norm(u, gamma, beta, 1e-5).unwrap();
        for (a, b) in g.value(y).iter().zip(unit) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = mat(&mut g, 1, 4, &row);
        let y = g.layer_norm(r, gamma, beta, 1e-5).unwrap();
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for (a, v) in g.value(y).iter().zip(&row) {
            assert!((a - (v - mean) / (var + 1e-5).sqrt()).abs() <= 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = mat(&mut g, 2, 4, &[0.0; 8]);
        let l = g.cross_entropy_masked(u, &[1, 3], &[false, false]).unwrap();
        assert!((g.value(l)[0] - 4f64.ln()).abs() < 1e-12);
        let sharp = mat(&mut g, 1, 4, &[0.0, 20.0, 0.0, 0.0]);
        let l = g.cross_entropy_masked(sharp, &[1], &[false]).unwrap();
        assert!(g.value(l)[0] <= 1e-3);
        assert_eq!(g.cross_entropy_masked(u, &[0, 0], &[true, true]), Err(NumericsError::AllMasked));
    }

    #[test]
    fn cross_entropy_masked_rows_contribute_nothing() {
        let mut g = Graph::new();
        let logits = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect())
            .unwrap()
            .with_grad(true);
        let x = g.input(logits);
        let l = g.cross_entropy_masked(x, &[0, 2, 999], &[false, false, true]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap()[8..].iter().all(|v| *v == 0.0));
        let mut h = Graph::new();
        let y = h.constant(&[2, 4], (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let l2 = h.cross_entropy_masked(y, &[0, 2], &[false, false]).unwrap();
        assert_eq!(g.value(l)[0], h.value(l2)[0]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let x = Tensor::scalar(3.0f64).with_grad(true);
        let mut g = Graph::new();
        let n = g.param(&x);
        let y = g.mul(n, n).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(n).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_graph_has_zero_grads() {
        let x = Tensor::scalar(3.0f64);
        let mut g = Graph::new();
        let n = g.param(&x);
        let y = g.mul(n, n).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad_or_zeros(n), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1e300, 2.0]);
        let y = g.scale(x, 1e300);
        let s = g.sum(y);
        assert!(matches!(g.check_finite(), Err(NumericsError::NonFinite { op: "scale", .. })));
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cin, h, w, cout, k) = (2, 5, 5, 3, 3);
        let inp: Vec<f64> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let mut g = Graph::new();
        let i = g.constant(&[cin, h, w], inp.clone()).unwrap();
        let wn = g.constant(&[cout, cin, k, k], wt.clone()).unwrap();
        let b = g.constant(&[cout], bias.clone()).unwrap();
        let y = g.conv2d(i, wn, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 3]);
        for o in 0..cout {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = bias[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    s += inp[(c * h + iy as usize) * w + ix as usize] * wt[((o * cin + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    assert!((g.value(y)[(o * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }
}
