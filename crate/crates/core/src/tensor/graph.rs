use super::kernels::{self, ConvDims};
use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise a + b; b may broadcast over its size-1 axes.
    Add { a: TensorId, b: TensorId },
    /// Elementwise a * b, identical shapes.
    Mul { a: TensorId, b: TensorId },
    MulScalar { a: TensorId, s: f64 },
    MatMul { a: TensorId, b: TensorId },
    Conv2d { input: TensorId, kernels: TensorId, bias: TensorId, dims: ConvDims },
    /// `argmax` holds the flat input index each output cell drew from.
    MaxPool2d { input: TensorId, argmax: Vec<usize> },
    Relu { a: TensorId },
    /// Elementwise max(a, floor); grad passes where a > floor.
    ClampMin { a: TensorId, floor: f64 },
    /// Softmax over the last axis.
    Softmax { a: TensorId },
    Log { a: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    /// Mean over the batch of -log softmax(logits)[label].
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
    Reshape { a: TensorId },
    Transpose { a: TensorId },
    /// out[i] = a[map[i]].
    Gather { a: TensorId, map: Vec<usize> },
    ConcatRows { parts: Vec<TensorId> },
    /// [T x D] -> [1 x D] column means.
    MeanRows { a: TensorId },
    /// [C x H x W] -> [1 x C] per-channel spatial means.
    ChannelMean { a: TensorId },
    Sum { a: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Append-only operation record. Nodes only reference earlier nodes, so a
/// single reverse sweep in [`Graph::backward`] visits consumers before
/// producers. Graphs are rebuilt per forward pass and confined to one
/// thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        let tensor = Tensor::new(shape, data).expect("op output shape is consistent");
        self.push(tensor, op)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch { op: "add", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(&x, &y)| y != x && y != 1) {
            return Err(mismatch());
        }
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(x, y)| x + y).collect()
        } else {
            let strides = broadcast_strides(&sb);
            (0..da.len()).map(|i| da[i] + db[broadcast_index(i, &sa, &strides)]).collect()
        };
        Ok(self.out(sa, data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.out(sa, data, Op::Mul { a, b }))
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| x * s).collect();
        self.out(shape, data, Op::MulScalar { a, s })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: 2, shape: sa });
        }
        if sb.len() != 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: 2, shape: sb });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.out(vec![m, n], data, Op::MatMul { a, b }))
    }

    /// Cross-correlation (no kernel flip) of a [C_in x H x W] input with
    /// [C_out x C_in x Kh x Kw] kernels plus a per-channel bias. Each output
    /// cell accumulates bias first, then (ic, kh, kw) in ascending order.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernels_id: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, TensorError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels_id).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 3 {
            return Err(TensorError::BadRank { op: "conv2d input", expected: 3, shape: si });
        }
        if sk.len() != 4 {
            return Err(TensorError::BadRank { op: "conv2d kernels", expected: 4, shape: sk });
        }
        if sb.len() != 1 || sb[0] != sk[0] || sk[1] != si[0] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: "conv2d" });
        }
        let dims = ConvDims {
            c_in: si[0],
            h: si[1],
            w: si[2],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
        };
        if dims.h + 2 * padding < dims.kh || dims.w + 2 * padding < dims.kw {
            return Err(TensorError::KernelTooLarge {
                kh: dims.kh,
                kw: dims.kw,
                h: dims.h,
                w: dims.w,
                padding,
            });
        }
        let data = kernels::conv2d_forward(self.data(input), self.data(kernels_id), self.data(bias), &dims);
        let shape = vec![dims.c_out, dims.out_h(), dims.out_w()];
        Ok(self.out(shape, data, Op::Conv2d { input, kernels: kernels_id, bias, dims }))
    }

    /// Max over square windows; gradient routes to the first (row-major)
    /// maximal element of each window.
    pub fn max_pool2d(
        &mut self,
        input: TensorId,
        window: usize,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return Err(TensorError::BadRank { op: "max_pool2d", expected: 3, shape: si });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: "max_pool2d" });
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        if window > h || window > w {
            return Err(TensorError::WindowTooLarge { window, h, w });
        }
        let (oh_n, ow_n) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let src = self.data(input);
        let mut data = Vec::with_capacity(c * oh_n * ow_n);
        let mut argmax = Vec::with_capacity(c * oh_n * ow_n);
        for ch in 0..c {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut best_idx = (ch * h + oh * stride) * w + ow * stride;
                    let mut best = src[best_idx];
                    for kh in 0..window {
                        for kw in 0..window {
                            let idx = (ch * h + oh * stride + kh) * w + ow * stride + kw;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        Ok(self.out(vec![c, oh_n, ow_n], data, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.out(shape, data, Op::Relu { a })
    }

    /// Elementwise max(a, floor).
    pub fn clamp_min(&mut self, a: TensorId, floor: f64) -> TensorId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(floor)).collect();
        self.out(shape, data, Op::ClampMin { a, floor })
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().expect("tensor shapes are non-empty");
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(width) {
            softmax_row(row);
        }
        self.out(shape, data, Op::Softmax { a })
    }

    /// Elementwise natural log; inputs must be strictly positive.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::NonPositiveLog { value: bad });
        }
        let data: Vec<f64> = self.data(a).iter().map(|x| x.ln()).collect();
        Ok(self.out(shape, data, Op::Log { a }))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("tensor shapes are non-empty");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.out(self.shape(a).to_vec(), data, Op::LayerNorm { a, gamma, beta, eps }))
    }

    /// Mean over the batch of -log softmax(logits)[label], computed in the
    /// log-sum-exp stabilized form. Returns a [1] scalar.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadRank { op: "cross_entropy", expected: 2, shape });
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(TensorError::LabelCountMismatch { labels: labels.len(), batch });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes });
        }
        let data = self.data(logits);
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &data[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / batch as f64;
        Ok(self.out(vec![1], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec() }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::NonPositiveDim { shape });
        }
        if numel != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.out(shape, data, Op::Reshape { a }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadRank { op: "transpose", expected: 2, shape });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.out(vec![c, r], data, Op::Transpose { a }))
    }

    /// out[i] = a[map[i]]; backward scatter-adds along the same map.
    pub fn gather(&mut self, a: TensorId, map: Vec<usize>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let len = self.data(a).len();
        if let Some(&bad) = map.iter().find(|&&i| i >= len) {
            return Err(TensorError::GatherOutOfBounds { index: bad, len });
        }
        let numel: usize = shape.iter().product();
        if numel != map.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeDataMismatch { shape, expected: numel, actual: map.len() });
        }
        let src = self.data(a);
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        Ok(self.out(shape, data, Op::Gather { a, map }))
    }

    /// Stack matrices (or row vectors) with a common column count into one
    /// matrix, in argument order.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = *self.shape(parts[0]).last().expect("tensor shapes are non-empty");
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            let (r, c) = match s.len() {
                1 => (1, s[0]),
                2 => (s[0], s[1]),
                _ => {
                    return Err(TensorError::BadRank { op: "concat_rows", expected: 2, shape: s.to_vec() })
                }
            };
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        Ok(self.out(vec![rows, cols], data, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Column means of a [T x D] matrix -> [1 x D].
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadRank { op: "mean_rows", expected: 2, shape });
        }
        let (t, d) = (shape[0], shape[1]);
        let src = self.data(a);
        let mut data = vec![0.0; d];
        for row in src.chunks(d) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in data.iter_mut() {
            *o /= t as f64;
        }
        Ok(self.out(vec![1, d], data, Op::MeanRows { a }))
    }

    /// Spatial mean per channel of a [C x H x W] tensor -> [1 x C].
    pub fn channel_mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::BadRank { op: "channel_mean", expected: 3, shape });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let src = self.data(a);
        let data: Vec<f64> = (0..c)
            .map(|ch| src[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.out(vec![1, c], data, Op::ChannelMean { a }))
    }

    /// Sum of all elements -> [1] scalar (sequential left fold).
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.data(a).iter().sum();
        self.out(vec![1], vec![total], Op::Sum { a })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Fills the grad slot of every
    /// `requires_grad` tensor in this graph; tensors not on the path from
    /// the loss get zero grads.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_shape.to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    acc(&mut grads, a, self.numel(a), |ga| {
                        for (o, &v) in ga.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                    if sa == sb {
                        acc(&mut grads, b, self.numel(b), |gb| {
                            for (o, &v) in gb.iter_mut().zip(&g) {
                                *o += v;
                            }
                        });
                    } else {
                        let strides = broadcast_strides(&sb);
                        acc(&mut grads, b, self.numel(b), |gb| {
                            for (i, &v) in g.iter().enumerate() {
                                gb[broadcast_index(i, &sa, &strides)] += v;
                            }
                        });
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = self.data(a).to_vec();
                    let db = self.data(b).to_vec();
                    acc(&mut grads, a, da.len(), |ga| {
                        for ((o, &v), &bv) in ga.iter_mut().zip(&g).zip(&db) {
                            *o += v * bv;
                        }
                    });
                    acc(&mut grads, b, db.len(), |gb| {
                        for ((o, &v), &av) in gb.iter_mut().zip(&g).zip(&da) {
                            *o += v * av;
                        }
                    });
                }
                Op::MulScalar { a, s } => {
                    let (a, s) = (*a, *s);
                    acc(&mut grads, a, self.numel(a), |ga| {
                        for (o, &v) in ga.iter_mut().zip(&g) {
                            *o += v * s;
                        }
                    });
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n_cols = self.shape(b)[1];
                    // dA = g . B^T, dB = A^T . g
                    let bt = transpose_buf(self.data(b), k, n_cols);
                    let da = kernels::matmul(&g, &bt, m, n_cols, k);
                    let at = transpose_buf(self.data(a), m, k);
                    let db = kernels::matmul(&at, &g, k, m, n_cols);
                    acc(&mut grads, a, da.len(), |ga| {
                        for (o, &v) in ga.iter_mut().zip(&da) {
                            *o += v;
                        }
                    });
                    acc(&mut grads, b, db.len(), |gb| {
                        for (o, &v) in gb.iter_mut().zip(&db) {
                            *o += v;
                        }
                    });
                }
                Op::Conv2d { input, kernels: ks, bias, dims } => {
                    let (input, ks, bias, dims) = (*input, *ks, *bias, *dims);
                    let d_in = kernels::conv2d_input_grad(self.data(ks), &g, &dims);
                    let d_k = kernels::conv2d_kernel_grad(self.data(input), &g, &dims);
                    let d_b = kernels::conv2d_bias_grad(&g, &dims);
                    acc(&mut grads, input, d_in.len(), |gi| {
                        for (o, &v) in gi.iter_mut().zip(&d_in) {
                            *o += v;
                        }
                    });
                    acc(&mut grads, ks, d_k.len(), |gk| {
                        for (o, &v) in gk.iter_mut().zip(&d_k) {
                            *o += v;
                        }
                    });
                    acc(&mut grads, bias, d_b.len(), |gb| {
                        for (o, &v) in gb.iter_mut().zip(&d_b) {
                            *o += v;
                        }
                    });
                }
                Op::MaxPool2d { input, argmax } => {
                    let input = *input;
                    let argmax = argmax.clone();
                    acc(&mut grads, input, self.numel(input), |gi| {
                        for (out_idx, &src_idx) in argmax.iter().enumerate() {
                            gi[src_idx] += g[out_idx];
                        }
                    });
                }
                Op::Relu { a } => {
                    let a = *a;
                    let src = self.data(a).to_vec();
                    acc(&mut grads, a, src.len(), |ga| {
                        for ((o, &v), &x) in ga.iter_mut().zip(&g).zip(&src) {
                            if x > 0.0 {
                                *o += v;
                            }
                        }
                    });
                }
                Op::ClampMin { a, floor } => {
                    let (a, floor) = (*a, *floor);
                    let src = self.data(a).to_vec();
                    acc(&mut grads, a, src.len(), |ga| {
                        for ((o, &v), &x) in ga.iter_mut().zip(&g).zip(&src) {
                            if x > floor {
                                *o += v;
                            }
                        }
                    });
                }
                Op::Softmax { a } => {
                    let a = *a;
                    let width = *self.nodes[i].tensor.shape().last().unwrap();
                    let s = self.nodes[i].tensor.data().to_vec();
                    acc(&mut grads, a, s.len(), |ga| {
                        for ((s_row, g_row), ga_row) in
                            s.chunks(width).zip(g.chunks(width)).zip(ga.chunks_mut(width))
                        {
                            let dot: f64 = s_row.iter().zip(g_row).map(|(x, y)| x * y).sum();
                            for j in 0..width {
                                ga_row[j] += s_row[j] * (g_row[j] - dot);
                            }
                        }
                    });
                }
                Op::Log { a } => {
                    let a = *a;
                    let src = self.data(a).to_vec();
                    acc(&mut grads, a, src.len(), |ga| {
                        for ((o, &v), &x) in ga.iter_mut().zip(&g).zip(&src) {
                            *o += v / x;
                        }
                    });
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let (a, gamma, beta, eps) = (*a, *gamma, *beta, *eps);
                    let d = self.shape(gamma)[0];
                    let x = self.data(a).to_vec();
                    let gam = self.data(gamma).to_vec();
                    let rows = x.len() / d;
                    let mut dx = vec![0.0; x.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let xr = &x[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = gr.iter().zip(&gam).map(|(gv, gm)| gv * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            dx[r * d + j] += inv_std / d as f64
                                * (d as f64 * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, a, dx.len(), |ga| {
                        for (o, &v) in ga.iter_mut().zip(&dx) {
                            *o += v;
                        }
                    });
                    acc(&mut grads, gamma, d, |gg| {
                        for (o, &v) in gg.iter_mut().zip(&dgamma) {
                            *o += v;
                        }
                    });
                    acc(&mut grads, beta, d, |gb| {
                        for (o, &v) in gb.iter_mut().zip(&dbeta) {
                            *o += v;
                        }
                    });
                }
                Op::CrossEntropy { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let shape = self.shape(logits).to_vec();
                    let (batch, classes) = (shape[0], shape[1]);
                    let data = self.data(logits).to_vec();
                    let upstream = g[0];
                    acc(&mut grads, logits, data.len(), |gl| {
                        for (b, &label) in labels.iter().enumerate() {
                            let row = &data[b * classes..(b + 1) * classes];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                            for c in 0..classes {
                                let p = (row[c] - max).exp() / sum;
                                let onehot = if c == label { 1.0 } else { 0.0 };
                                gl[b * classes + c] += upstream * (p - onehot) / batch as f64;
                            }
                        }
                    });
                }
                Op::Reshape { a } => {
                    let a = *a;
                    acc(&mut grads, a, self.numel(a), |ga| {
                        for (o, &v) in ga.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                    acc(&mut grads, a, r * c, |ga| {
                        // g has shape [c x r]
                        for i in 0..c {
                            for j in 0..r {
                                ga[j * c + i] += g[i * r + j];
                            }
                        }
                    });
                }
                Op::Gather { a, map } => {
                    let a = *a;
                    let map = map.clone();
                    acc(&mut grads, a, self.numel(a), |ga| {
                        for (out_idx, &src_idx) in map.iter().enumerate() {
                            ga[src_idx] += g[out_idx];
                        }
                    });
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.numel(p);
                        let slice = g[offset..offset + len].to_vec();
                        acc(&mut grads, p, len, |gp| {
                            for (o, &v) in gp.iter_mut().zip(&slice) {
                                *o += v;
                            }
                        });
                        offset += len;
                    }
                }
                Op::MeanRows { a } => {
                    let a = *a;
                    let (t, d) = (self.shape(a)[0], self.shape(a)[1]);
                    acc(&mut grads, a, t * d, |ga| {
                        for row in ga.chunks_mut(d) {
                            for (o, &v) in row.iter_mut().zip(&g) {
                                *o += v / t as f64;
                            }
                        }
                    });
                }
                Op::ChannelMean { a } => {
                    let a = *a;
                    let s = self.shape(a).to_vec();
                    let plane = s[1] * s[2];
                    acc(&mut grads, a, s[0] * plane, |ga| {
                        for (ch, chunk) in ga.chunks_mut(plane).enumerate() {
                            let v = g[ch] / plane as f64;
                            for o in chunk {
                                *o += v;
                            }
                        }
                    });
                }
                Op::Sum { a } => {
                    let a = *a;
                    acc(&mut grads, a, self.numel(a), |ga| {
                        for o in ga.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.tensor.requires_grad() {
                let n = node.tensor.numel();
                node.tensor.set_grad(grads[i].take().unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].tensor.numel()
    }
}

/// In-place stable softmax over one contiguous row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn transpose_buf(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

// Strides into rhs with zero stride on its size-1 (broadcast) axes.
fn broadcast_strides(rhs: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; rhs.len()];
    let mut s = 1;
    for i in (0..rhs.len()).rev() {
        strides[i] = if rhs[i] == 1 { 0 } else { s };
        s *= rhs[i];
    }
    strides
}

fn broadcast_index(flat: usize, lhs_shape: &[usize], rhs_strides: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = 0;
    for d in (0..lhs_shape.len()).rev() {
        let coord = rem % lhs_shape[d];
        rem /= lhs_shape[d];
        idx += coord * rhs_strides[d];
    }
    idx
}

fn acc(
    grads: &mut [Option<Vec<f64>>],
    id: TensorId,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}
