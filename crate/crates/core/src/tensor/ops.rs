use super::gemm::{gemm, MatRef};
use super::{Node, Tensor};
use crate::error::{Error, Result};

/// Norms below this are treated as zero by the normalizing ops.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub(super) struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

pub(super) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeom, cols: Vec<f64> },
    ChannelBias { x: usize, bias: usize, plane: usize },
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    MaxPool2 { x: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: usize, plane: usize },
    Mul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Norm(usize),
    Dot(usize, usize),
    Cosine { a: usize, b: usize, norm_a: f64, norm_b: f64 },
    Normalize { x: usize, norm: f64 },
    Reshape(usize),
    Concat(Vec<usize>),
    Gather { x: usize, indices: Vec<usize> },
    Standardize { x: usize, cols: usize, inv_std: Vec<f64> },
    Affine { x: usize, scale: Vec<f64> },
}

pub(super) fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(s: f64) -> f64 {
    // exp of a non-positive argument never overflows
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let mut cols = vec![0.0; g.patch() * plane];
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    fn unary(&self, f: impl FnOnce(&Node) -> Result<(Vec<usize>, Vec<f64>, Op)>) -> Result<Tensor> {
        let (shape, value, op, rg) = {
            let tape = self.graph.tape.borrow();
            let node = &tape.nodes[self.id];
            let (shape, value, op) = f(node)?;
            (shape, value, op, node.requires_grad)
        };
        Ok(self.graph.push(shape, value, op, rg))
    }

    fn binary(
        &self,
        other: &Tensor,
        f: impl FnOnce(&Node, &Node) -> Result<(Vec<usize>, Vec<f64>, Op)>,
    ) -> Result<Tensor> {
        self.check_graph(other)?;
        let (shape, value, op, rg) = {
            let tape = self.graph.tape.borrow();
            let (a, b) = (&tape.nodes[self.id], &tape.nodes[other.id]);
            let (shape, value, op) = f(a, b)?;
            (shape, value, op, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(shape, value, op, rg))
    }

    fn map(&self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Tensor {
        let id = self.id;
        self.unary(|n| Ok((n.shape.clone(), n.value.iter().map(|&v| f(v)).collect(), op(id))))
            .expect("elementwise ops cannot fail")
    }

    fn same_shape(&self, other: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor> {
        self.binary(other, |a, b| {
            if a.shape != b.shape {
                return Err(Error::shape(format!("{name}: shapes {:?} and {:?} differ", a.shape, b.shape)));
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            Ok((a.shape.clone(), v, op))
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| {
            let (&[m, k], &[k2, n]) = (a.shape.as_slice(), b.shape.as_slice()) else {
                return Err(Error::shape(format!("matmul needs 2-d operands, got {:?} and {:?}", a.shape, b.shape)));
            };
            if k != k2 {
                return Err(Error::shape(format!("matmul inner dimensions {k} and {k2} differ")));
            }
            let mut out = vec![0.0; m * n];
            gemm(MatRef::new(&a.value, m, k), MatRef::new(&b.value, k, n), 0.0, &mut out);
            Ok((vec![m, n], out, Op::MatMul { a: ia, b: ib, m, k, n }))
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let id = self.id;
        self.unary(|x| {
            let &[rows, cols] = x.shape.as_slice() else {
                return Err(Error::shape(format!("transpose needs a 2-d tensor, got {:?}", x.shape)));
            };
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = x.value[i * cols + j];
                }
            }
            Ok((vec![cols, rows], out, Op::Transpose { x: id, rows, cols }))
        })
    }

    /// 2-d cross-correlation of a `[C, H, W]` input with a `[O, C, kh, kw]`
    /// kernel, zero padded.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (ii, ik) = (self.id, kernel.id);
        self.binary(kernel, |x, k| {
            let (&[c, h, w], &[o, kc, kh, kw]) = (x.shape.as_slice(), k.shape.as_slice()) else {
                return Err(Error::shape(format!("conv2d expects [C,H,W] and [O,C,kh,kw], got {:?} and {:?}", x.shape, k.shape)));
            };
            if c != kc {
                return Err(Error::shape(format!("conv2d input has {c} channels, kernel expects {kc}")));
            }
            if stride == 0 {
                return Err(Error::shape("conv2d stride must be at least 1"));
            }
            if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
                return Err(Error::shape(format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad})")));
            }
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (w + 2 * pad - kw) / stride + 1;
            let geom = ConvGeom { c, h, w, o, kh, kw, stride, pad, ho, wo };
            let cols = im2col(&x.value, &geom);
            let mut out = vec![0.0; o * ho * wo];
            gemm(MatRef::new(&k.value, o, geom.patch()), MatRef::new(&cols, geom.patch(), ho * wo), 0.0, &mut out);
            Ok((vec![o, ho, wo], out, Op::Conv2d { input: ii, kernel: ik, geom, cols }))
        })
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (ix, ib) = (self.id, bias.id);
        self.binary(bias, |x, b| {
            let c = *x.shape.first().ok_or_else(|| Error::shape("channel bias on a scalar"))?;
            if b.shape != [c] {
                return Err(Error::shape(format!("bias shape {:?} does not match {c} channels", b.shape)));
            }
            let plane = x.value.len() / c.max(1);
            let mut out = x.value.clone();
            for (ch, chunk) in out.chunks_mut(plane.max(1)).enumerate().take(c) {
                chunk.iter_mut().for_each(|v| *v += b.value[ch]);
            }
            Ok((x.shape.clone(), out, Op::ChannelBias { x: ix, bias: ib, plane }))
        })
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.map(Op::Relu, |v| v.max(0.0))
    }

    /// Elementwise logistic function, evaluated without overflow.
    pub fn sigmoid(&self) -> Tensor {
        self.map(Op::Sigmoid, sigmoid)
    }

    /// Elementwise `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.map(Op::Softplus, softplus)
    }

    pub fn abs(&self) -> Tensor {
        self.map(Op::Abs, f64::abs)
    }

    /// 2×2 non-overlapping max pooling of a `[C, H, W]` tensor. Ties route
    /// the gradient to the first cell in row-major order.
    pub fn maxpool2(&self) -> Result<Tensor> {
        let id = self.id;
        self.unary(|x| {
            let &[c, h, w] = x.shape.as_slice() else {
                return Err(Error::shape(format!("maxpool2 expects [C,H,W], got {:?}", x.shape)));
            };
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("maxpool2 needs even spatial sides, got {h}x{w}")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(c * ho * wo);
            let mut argmax = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                let base = ch * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if x.value[cand] > x.value[best] {
                                best = cand;
                            }
                        }
                        out.push(x.value[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((vec![c, ho, wo], out, Op::MaxPool2 { x: id, argmax }))
        })
    }

    /// Per-channel spatial mean of a `[C, H, W]` tensor, giving `[C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let id = self.id;
        self.unary(|x| {
            let &[c, h, w] = x.shape.as_slice() else {
                return Err(Error::shape(format!("global_avg_pool expects [C,H,W], got {:?}", x.shape)));
            };
            let plane = h * w;
            if plane == 0 {
                return Err(Error::shape("global_avg_pool over an empty plane"));
            }
            let out = x.value.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
            Ok((vec![c], out, Op::GlobalAvgPool { x: id, plane }))
        })
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let id = self.id;
        self.map(move |_| Op::Scale(id, c), move |v| v * c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(Op::AddScalar, move |v| v + c)
    }

    /// Sum of all elements, as a scalar of shape `[]`.
    pub fn sum(&self) -> Tensor {
        let id = self.id;
        self.unary(|x| Ok((vec![], vec![x.value.iter().sum()], Op::Sum(id))))
            .expect("sum cannot fail")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Euclidean norm of all elements. The subgradient at 0 is 0.
    pub fn l2_norm(&self) -> Tensor {
        let id = self.id;
        self.unary(|x| Ok((vec![], vec![dot(&x.value, &x.value).sqrt()], Op::Norm(id))))
            .expect("norm cannot fail")
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| {
            if a.value.len() != b.value.len() {
                return Err(Error::shape(format!("dot: shapes {:?} and {:?} differ", a.shape, b.shape)));
            }
            Ok((vec![], vec![dot(&a.value, &b.value)], Op::Dot(ia, ib)))
        })
    }

    /// Cosine similarity of two equally sized tensors. If either norm is
    /// below [`NORM_GUARD`] the result is 0 and no gradient flows.
    pub fn cosine(&self, other: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| {
            if a.value.len() != b.value.len() {
                return Err(Error::shape(format!("cosine: shapes {:?} and {:?} differ", a.shape, b.shape)));
            }
            let norm_a = dot(&a.value, &a.value).sqrt();
            let norm_b = dot(&b.value, &b.value).sqrt();
            let value = if norm_a < NORM_GUARD || norm_b < NORM_GUARD {
                0.0
            } else {
                (dot(&a.value, &b.value) / (norm_a * norm_b)).clamp(-1.0, 1.0)
            };
            Ok((vec![], vec![value], Op::Cosine { a: ia, b: ib, norm_a, norm_b }))
        })
    }

    /// `x / |x|`, or zeros (with zero gradient) when `|x|` is below
    /// [`NORM_GUARD`].
    pub fn normalize(&self) -> Tensor {
        let id = self.id;
        self.unary(|x| {
            let norm = dot(&x.value, &x.value).sqrt();
            let value = if norm < NORM_GUARD {
                vec![0.0; x.value.len()]
            } else {
                x.value.iter().map(|v| v / norm).collect()
            };
            Ok((x.shape.clone(), value, Op::Normalize { x: id, norm }))
        })
        .expect("normalize cannot fail")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let id = self.id;
        self.unary(|x| {
            if shape.iter().product::<usize>() != x.value.len() {
                return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", x.shape)));
            }
            Ok((shape.to_vec(), x.value.clone(), Op::Reshape(id)))
        })
    }

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        for p in &parts[1..] {
            first.check_graph(p)?;
        }
        let graph = first.graph.clone();
        let (value, rg) = {
            let tape = graph.tape.borrow();
            let mut value = Vec::new();
            let mut rg = false;
            for p in parts {
                let node = &tape.nodes[p.id];
                value.extend_from_slice(&node.value);
                rg |= node.requires_grad;
            }
            (value, rg)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(vec![value.len()], value, Op::Concat(ids), rg))
    }

    /// Picks flat elements by index into a new vector.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let id = self.id;
        self.unary(|x| {
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.value.len()) {
                return Err(Error::shape(format!("gather index {bad} out of range for {:?}", x.shape)));
            }
            let out = indices.iter().map(|&i| x.value[i]).collect();
            Ok((vec![indices.len()], out, Op::Gather { x: id, indices: indices.to_vec() }))
        })
    }

    /// Standardizes each column of a `[rows, cols]` tensor by its own mean
    /// and population variance: `(x - mean) / sqrt(var + eps)`.
    pub fn standardize_columns(&self, eps: f64) -> Result<Tensor> {
        let id = self.id;
        self.unary(|x| {
            let &[rows, cols] = x.shape.as_slice() else {
                return Err(Error::shape(format!("standardize_columns expects 2-d, got {:?}", x.shape)));
            };
            if rows == 0 {
                return Err(Error::shape("standardize_columns over zero rows"));
            }
            let (mean, var) = column_moments(&x.value, rows, cols);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = x.value.clone();
            for row in out.chunks_mut(cols) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
            Ok((x.shape.clone(), out, Op::Standardize { x: id, cols, inv_std }))
        })
    }

    /// `x * scale + shift` elementwise with constant coefficients.
    pub fn affine(&self, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
        let id = self.id;
        self.unary(|x| {
            if scale.len() != x.value.len() || shift.len() != x.value.len() {
                return Err(Error::shape("affine coefficients do not match tensor size"));
            }
            let out = x.value.iter().zip(scale).zip(shift).map(|((v, a), b)| v * a + b).collect();
            Ok((x.shape.clone(), out, Op::Affine { x: id, scale: scale.to_vec() }))
        })
    }
}

/// Per-column mean and population variance of a row-major `[rows, cols]`
/// matrix.
pub fn column_moments(values: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for row in values.chunks(cols) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for row in values.chunks(cols) {
        for j in 0..cols {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    (mean, var)
}

/// Pushes `grad` (the gradient at node `id`) into the gradient slots of the
/// node's inputs.
pub(super) fn propagate(nodes: &[Node], id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if wants(a) {
                let dst = slot(grads, a, m * k);
                gemm(MatRef::new(grad, m, n), MatRef::t(&nodes[b].value, k, n), 1.0, dst);
            }
            if wants(b) {
                let dst = slot(grads, b, k * n);
                gemm(MatRef::t(&nodes[a].value, m, k), MatRef::new(grad, m, n), 1.0, dst);
            }
        }
        &Op::Transpose { x, rows, cols } => {
            if wants(x) {
                let dst = slot(grads, x, rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        dst[i * cols + j] += grad[j * rows + i];
                    }
                }
            }
        }
        Op::Conv2d { input, kernel, geom, cols } => {
            let (input, kernel, g) = (*input, *kernel, geom);
            if wants(kernel) {
                let dst = slot(grads, kernel, g.o * g.patch());
                gemm(
                    MatRef::new(grad, g.o, g.out_plane()),
                    MatRef::t(cols, g.patch(), g.out_plane()),
                    1.0,
                    dst,
                );
            }
            if wants(input) {
                let mut dcols = vec![0.0; g.patch() * g.out_plane()];
                gemm(
                    MatRef::t(&nodes[kernel].value, g.o, g.patch()),
                    MatRef::new(grad, g.o, g.out_plane()),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, g, slot(grads, input, len(input)));
            }
        }
        &Op::ChannelBias { x, bias, plane } => {
            if wants(x) {
                slot(grads, x, len(x)).iter_mut().zip(grad).for_each(|(d, g)| *d += g);
            }
            if wants(bias) {
                let c = len(bias);
                let dst = slot(grads, bias, c);
                for (ch, chunk) in grad.chunks(plane.max(1)).enumerate().take(c) {
                    dst[ch] += chunk.iter().sum::<f64>();
                }
            }
        }
        &Op::Relu(x) => {
            if wants(x) {
                let dst = slot(grads, x, len(x));
                for ((d, g), y) in dst.iter_mut().zip(grad).zip(&node.value) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        &Op::Sigmoid(x) => {
            if wants(x) {
                let dst = slot(grads, x, len(x));
                for ((d, g), y) in dst.iter_mut().zip(grad).zip(&node.value) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        &Op::Softplus(x) => {
            if wants(x) {
                let dst = slot(grads, x, len(x));
                for ((d, g), v) in dst.iter_mut().zip(grad).zip(&nodes[x].value) {
                    *d += g * sigmoid(*v);
                }
            }
        }
        &Op::Abs(x) => {
            if wants(x) {
                let dst = slot(grads, x, len(x));
                for ((d, g), v) in dst.iter_mut().zip(grad).zip(&nodes[x].value) {
                    if *v > 0.0 {
                        *d += g;
                    } else if *v < 0.0 {
                        *d -= g;
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if wants(*x) {
                let dst = slot(grads, *x, len(*x));
                for (g, &src) in grad.iter().zip(argmax) {
                    dst[src] += g;
                }
            }
        }
        &Op::GlobalAvgPool { x, plane } => {
            if wants(x) {
                let dst = slot(grads, x, len(x));
                for (chunk, g) in dst.chunks_mut(plane).zip(grad) {
                    let share = g / plane as f64;
                    chunk.iter_mut().for_each(|d| *d += share);
                }
            }
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                let other = nodes[b].value.as_slice();
                let dst = slot(grads, a, len(a));
                for ((d, g), v) in dst.iter_mut().zip(grad).zip(other) {
                    *d += g * v;
                }
            }
            if wants(b) {
                let other = nodes[a].value.as_slice();
                let dst = slot(grads, b, len(b));
                for ((d, g), v) in dst.iter_mut().zip(grad).zip(other) {
                    *d += g * v;
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(a) {
                slot(grads, a, len(a)).iter_mut().zip(grad).for_each(|(d, g)| *d += g);
            }
            if wants(b) {
                slot(grads, b, len(b)).iter_mut().zip(grad).for_each(|(d, g)| *d += sign * g);
            }
        }
        &Op::Scale(x, c) => {
            if wants(x) {
                slot(grads, x, len(x)).iter_mut().zip(grad).for_each(|(d, g)| *d += c * g);
            }
        }
        &Op::AddScalar(x) | &Op::Reshape(x) => {
            if wants(x) {
                slot(grads, x, len(x)).iter_mut().zip(grad).for_each(|(d, g)| *d += g);
            }
        }
        &Op::Sum(x) => {
            if wants(x) {
                slot(grads, x, len(x)).iter_mut().for_each(|d| *d += grad[0]);
            }
        }
        &Op::Norm(x) => {
            let n = node.value[0];
            if wants(x) && n > 0.0 {
                let scale = grad[0] / n;
                let xv = nodes[x].value.as_slice();
                for (d, v) in slot(grads, x, len(x)).iter_mut().zip(xv) {
                    *d += scale * v;
                }
            }
        }
        &Op::Dot(a, b) => {
            for (this, other) in [(a, b), (b, a)] {
                if wants(this) {
                    let ov = nodes[other].value.as_slice();
                    for (d, v) in slot(grads, this, len(this)).iter_mut().zip(ov) {
                        *d += grad[0] * v;
                    }
                }
            }
        }
        &Op::Cosine { a, b, norm_a, norm_b } => {
            if norm_a < NORM_GUARD || norm_b < NORM_GUARD {
                return;
            }
            let cos = node.value[0];
            for (this, other, n_this, n_other) in [(a, b, norm_a, norm_b), (b, a, norm_b, norm_a)] {
                if wants(this) {
                    let tv = nodes[this].value.as_slice();
                    let ov = nodes[other].value.as_slice();
                    let cross = grad[0] / (n_this * n_other);
                    let self_term = grad[0] * cos / (n_this * n_this);
                    for ((d, t), o) in slot(grads, this, len(this)).iter_mut().zip(tv).zip(ov) {
                        *d += cross * o - self_term * t;
                    }
                }
            }
        }
        &Op::Normalize { x, norm } => {
            if wants(x) && norm >= NORM_GUARD {
                let y = node.value.as_slice();
                let proj = dot(y, grad);
                for ((d, g), yi) in slot(grads, x, len(x)).iter_mut().zip(grad).zip(y) {
                    *d += (g - yi * proj) / norm;
                }
            }
        }
        Op::Concat(ids) => {
            let mut offset = 0;
            for &p in ids {
                let n = len(p);
                if wants(p) {
                    slot(grads, p, n).iter_mut().zip(&grad[offset..offset + n]).for_each(|(d, g)| *d += g);
                }
                offset += n;
            }
        }
        Op::Gather { x, indices } => {
            if wants(*x) {
                let dst = slot(grads, *x, len(*x));
                for (g, &i) in grad.iter().zip(indices) {
                    dst[i] += g;
                }
            }
        }
        Op::Standardize { x, cols, inv_std } => {
            let (x, cols) = (*x, *cols);
            if wants(x) {
                let rows = grad.len() / cols;
                let xhat = node.value.as_slice();
                let mut mean_g = vec![0.0; cols];
                let mut mean_gx = vec![0.0; cols];
                for (grow, xrow) in grad.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        mean_g[j] += grow[j];
                        mean_gx[j] += grow[j] * xrow[j];
                    }
                }
                mean_g.iter_mut().for_each(|v| *v /= rows as f64);
                mean_gx.iter_mut().for_each(|v| *v /= rows as f64);
                let dst = slot(grads, x, len(x));
                for ((drow, grow), xrow) in dst.chunks_mut(cols).zip(grad.chunks(cols)).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        drow[j] += inv_std[j] * (grow[j] - mean_g[j] - xrow[j] * mean_gx[j]);
                    }
                }
            }
        }
        Op::Affine { x, scale } => {
            if wants(*x) {
                for ((d, g), a) in slot(grads, *x, len(*x)).iter_mut().zip(grad).zip(scale) {
                    *d += g * a;
                }
            }
        }
    }
}

/// Numerically stable logistic function on plain numbers.
pub fn logistic(s: f64) -> f64 {
    sigmoid(s)
}

/// Numerically stable `ln(1 + e^s)` on plain numbers.
pub fn log1p_exp(s: f64) -> f64 {
    softplus(s)
}

impl super::Graph {
    /// Distance of the recorded forward pass from the nearest
    /// non-differentiable point: the smallest `|x|` entering a relu or abs
    /// and the smallest gap between the two largest cells of a max-pool
    /// window. Finite-difference checks with steps well below this margin
    /// never cross a kink.
    ///
    /// Exact zeros and exact ties are skipped: they come from upstream
    /// structure (a dead relu feeding another relu, identical patches of a
    /// flat image region) and stay zero or tied under small parameter
    /// changes.
    /// Feeds the forward pass's activation pattern (relu and abs signs,
    /// max-pool winners) into `state`. Two passes with equal patterns lie in
    /// the same smooth piece of the function.
    pub fn hash_kink_pattern(&self, state: &mut impl std::hash::Hasher) {
        use std::hash::Hash;
        let tape = self.tape.borrow();
        for node in &tape.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    for v in &tape.nodes[*x].value {
                        (*v > 0.0, *v < 0.0).hash(state);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(state),
                _ => {}
            }
        }
    }

    pub fn kink_margin(&self) -> f64 {
        let tape = self.tape.borrow();
        let mut margin = f64::INFINITY;
        for node in &tape.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    for v in &tape.nodes[*x].value {
                        if *v != 0.0 {
                            margin = margin.min(v.abs());
                        }
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let input = &tape.nodes[*x];
                    let &[_, h, w] = input.shape.as_slice() else { continue };
                    for (o, &best) in argmax.iter().enumerate() {
                        let (ch, rem) = (o / ((h / 2) * (w / 2)), o % ((h / 2) * (w / 2)));
                        let (oy, ox) = (rem / (w / 2), rem % (w / 2));
                        let base = ch * h * w + 2 * oy * w + 2 * ox;
                        for cell in [base, base + 1, base + w, base + w + 1] {
                            let gap = input.value[best] - input.value[cell];
                            if cell != best && gap != 0.0 {
                                margin = margin.min(gap);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}
