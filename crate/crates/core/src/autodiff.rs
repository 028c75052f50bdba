//! Arena-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking the arena backwards is
//! a valid reverse topological order. [`Graph::backward`] seeds the scalar
//! loss with gradient one and accumulates into parents; a node used twice
//! receives the sum of both contributions.

use crate::error::{DqError, Result};
use crate::tensor::{decompose, positions_as_vectors, AxisDecomposition, NdTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    StopGradient,
    StraightThrough(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Upsample2x(NodeId),
    ConcatChannels(NodeId, NodeId),
    CodeLookup {
        books: Vec<NodeId>,
        plan: AxisDecomposition,
        codes: Vec<usize>,
    },
    CrossEntropy256 {
        logits: NodeId,
        targets: Vec<u8>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: NdTensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Per-node gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<NdTensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; all zeros when no path
    /// carried gradient to it (including paths cut by a stop-gradient).
    pub fn get(&self, id: NodeId) -> NdTensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => NdTensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&NdTensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &NdTensor, b: &NdTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DqError::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &NdTensor, b: &NdTensor, f: impl Fn(f64, f64) -> f64) -> NdTensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NdTensor::from_parts(a.shape().to_vec(), data).expect("shapes checked")
}

fn map(a: &NdTensor, f: impl Fn(f64) -> f64) -> NdTensor {
    NdTensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe buffers of exactly the asserted lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (h, w, k, s, p) = (self.height, self.width, self.kernel, self.stride, self.pad as isize);
        let ncols = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kx) as isize - p;
                            dst[oy * self.out_w + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                            {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (h, w, k, s, p) = (self.height, self.width, self.kernel, self.stride, self.pad as isize);
        let ncols = self.col_cols();
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && (ix as usize) < w {
                                dx[c * h * w + iy as usize * w + ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NdTensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Sign of every ReLU input, in node order. Two evaluations with equal
    /// patterns lie on the same linear piece of every ReLU.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn push(&mut self, value: NdTensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: NdTensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: NdTensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map(self.value(a), |x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = NdTensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = NdTensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// Forward value unchanged; contributes no gradient to `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Takes the forward value `value` while passing gradient to `z`
    /// unchanged. Equivalent to `z + sg(value - z)` without the rounding of
    /// the add and subtract.
    pub fn straight_through(&mut self, z: NodeId, value: NdTensor) -> Result<NodeId> {
        same_shape(self.value(z), &value)?;
        let rg = self.rg(&[z]);
        Ok(self.push(value, Op::StraightThrough(z), rg))
    }

    /// `x [B, in] * w^T + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(DqError::ShapeMismatch {
                expected: vec![xs[0], ws.get(1).copied().unwrap_or(0)],
                actual: xs.to_vec(),
            });
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            batch,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            1.0,
        );
        let v = NdTensor::from_parts(vec![batch, out], y)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// Square-kernel 2-D convolution over `x [B, Cin, H, W]` with
    /// `w [Cout, Cin, k, k]`, `b [Cout]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || self.value(b).shape() != [ws[0]] {
            return Err(DqError::ShapeMismatch {
                expected: vec![
                    xs[0],
                    ws.get(1).copied().unwrap_or(0),
                    xs.get(2).copied().unwrap_or(0),
                    xs.get(3).copied().unwrap_or(0),
                ],
                actual: xs,
            });
        }
        let k = ws[2];
        if stride == 0 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(DqError::InvalidArgument(format!(
                "kernel {k} with stride {stride}, pad {pad} does not fit input {xs:?}"
            )));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: k,
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - k) / stride + 1,
            out_w: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_plane = geom.in_ch * geom.height * geom.width;
        let out_plane = geom.out_ch * ncols;
        let mut cols = vec![0.0; geom.batch * rows * ncols];
        let mut y = vec![0.0; geom.batch * out_plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for n in 0..geom.batch {
            let col = &mut cols[n * rows * ncols..(n + 1) * rows * ncols];
            geom.im2col(&xv[n * in_plane..(n + 1) * in_plane], col);
            let out = &mut y[n * out_plane..(n + 1) * out_plane];
            for (o, chunk) in out.chunks_mut(ncols).enumerate() {
                chunk.fill(bv[o]);
            }
            gemm(geom.out_ch, rows, ncols, wv, false, col, false, out, 1.0);
        }
        let v = NdTensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], y)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 {
            return Err(DqError::InvalidArgument(format!("upsample expects rank 4, got {s:?}")));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(a).data();
        let mut out = vec![0.0; bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + x] = src[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let v = NdTensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Upsample2x(a), rg))
    }

    /// Concatenation of two `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(DqError::ShapeMismatch {
                expected: sa,
                actual: sb,
            });
        }
        let hw = sa[2] * sa[3];
        let (ca, cb) = (sa[1] * hw, sb[1] * hw);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb));
        for n in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&self.value(b).data()[n * cb..(n + 1) * cb]);
        }
        let v = NdTensor::from_parts(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::ConcatChannels(a, b), rg))
    }

    /// Gathers code rows of the `books` (each `[K, D]`) according to
    /// `codes` (laid out `[M, P]`) and reassembles them into a tensor of the
    /// decomposed shape. Gradients scatter back into the selected rows.
    pub fn code_lookup(&mut self, books: &[NodeId], plan: &AxisDecomposition, codes: &[usize]) -> Result<NodeId> {
        if books.len() != plan.num_slices {
            return Err(DqError::DimensionMismatch {
                expected: plan.num_slices,
                actual: books.len(),
            });
        }
        let slice_shape = plan.slice_shape();
        let positions = slice_shape.iter().product::<usize>() / plan.slice_extent;
        if codes.len() != positions * books.len() {
            return Err(DqError::DimensionMismatch {
                expected: positions * books.len(),
                actual: codes.len(),
            });
        }
        let mut slices = Vec::with_capacity(books.len());
        for (m, &bk) in books.iter().enumerate() {
            let table = self.value(bk);
            let (k, d) = (table.shape()[0], table.shape()[1]);
            if d != plan.slice_extent {
                return Err(DqError::DimensionMismatch {
                    expected: plan.slice_extent,
                    actual: d,
                });
            }
            let mut rows = Vec::with_capacity(positions * d);
            for &c in &codes[m * positions..(m + 1) * positions] {
                if c >= k {
                    return Err(DqError::CodeOutOfRange { index: c, codes: k });
                }
                rows.extend_from_slice(&table.data()[c * d..(c + 1) * d]);
            }
            let mat = NdTensor::from_parts(vec![positions, d], rows)?;
            slices.push(crate::tensor::vectors_to_positions(&mat, &slice_shape, plan.axis)?);
        }
        let v = crate::tensor::reassemble(&slices, plan)?;
        let rg = self.rg(books);
        Ok(self.push(
            v,
            Op::CodeLookup {
                books: books.to_vec(),
                plan: plan.clone(),
                codes: codes.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood in nats of 8-bit `targets [B, C, H, W]`
    /// under per-channel 256-way softmaxes over `logits [B, 256 C, H, W]`.
    pub fn cross_entropy_256(&mut self, logits: NodeId, targets: &[u8]) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(256) {
            return Err(DqError::InvalidArgument(format!(
                "logits must be [B, 256*C, H, W], got {s:?}"
            )));
        }
        let (batch, ch, hw) = (s[0], s[1] / 256, s[2] * s[3]);
        let dims = batch * ch * hw;
        if targets.len() != dims {
            return Err(DqError::DimensionMismatch {
                expected: dims,
                actual: targets.len(),
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut nll = 0.0;
        let mut buf = [0.0f64; 256];
        for n in 0..batch {
            for c in 0..ch {
                let base = (n * ch + c) * 256 * hw;
                for p in 0..hw {
                    let mut mx = f64::NEG_INFINITY;
                    for (bin, slot) in buf.iter_mut().enumerate() {
                        *slot = lv[base + bin * hw + p];
                        mx = mx.max(*slot);
                    }
                    let mut z = 0.0;
                    for slot in buf.iter_mut() {
                        *slot = (*slot - mx).exp();
                        z += *slot;
                    }
                    let t = targets[(n * ch + c) * hw + p] as usize;
                    nll += z.ln() - (lv[base + t * hw + p] - mx);
                    for (bin, e) in buf.iter().enumerate() {
                        probs[base + bin * hw + p] = e / z;
                    }
                }
            }
        }
        let v = NdTensor::scalar(nll / dims as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy256 {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DqError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<NdTensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(NdTensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<NdTensor>], id: NodeId, delta: NdTensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, g: &NdTensor, grads: &mut [Option<NdTensor>]) -> Result<()> {
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(g, vb, |x, y| x * y));
                self.accumulate(grads, *b, zip_map(g, va, |x, y| x * y));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, map(g, |x| x * c)),
            Op::Square(a) => self.accumulate(grads, *a, zip_map(g, self.value(*a), |x, y| 2.0 * x * y)),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                zip_map(g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let s = self.value(*a).shape();
                self.accumulate(grads, *a, NdTensor::full(s, g.data()[0]));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                self.accumulate(grads, *a, NdTensor::full(v.shape(), g.data()[0] / v.len() as f64));
            }
            Op::StraightThrough(z) => self.accumulate(grads, *z, g.clone()),
            Op::Linear { x, w, b } => {
                let (batch, inp) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let out = self.value(*w).shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    gemm(
                        batch,
                        out,
                        inp,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        0.0,
                    );
                    self.accumulate(grads, *x, NdTensor::from_parts(vec![batch, inp], dx)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm(
                        out,
                        batch,
                        inp,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        0.0,
                    );
                    self.accumulate(grads, *w, NdTensor::from_parts(vec![out, inp], dw)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; out];
                    for row in g.data().chunks(out) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *b, NdTensor::from_parts(vec![out], db)?);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_plane = geom.in_ch * geom.height * geom.width;
                let out_plane = geom.out_ch * ncols;
                let gd = g.data();
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; geom.out_ch * rows];
                    for n in 0..geom.batch {
                        gemm(
                            geom.out_ch,
                            ncols,
                            rows,
                            &gd[n * out_plane..(n + 1) * out_plane],
                            false,
                            &cols[n * rows * ncols..(n + 1) * rows * ncols],
                            true,
                            &mut dw,
                            1.0,
                        );
                    }
                    self.accumulate(grads, *w, NdTensor::from_parts(self.value(*w).shape().to_vec(), dw)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; geom.out_ch];
                    for n in 0..geom.batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            let start = n * out_plane + o * ncols;
                            *d += gd[start..start + ncols].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, NdTensor::from_parts(vec![geom.out_ch], db)?);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; geom.batch * in_plane];
                    let mut dcol = vec![0.0; rows * ncols];
                    for n in 0..geom.batch {
                        gemm(
                            rows,
                            geom.out_ch,
                            ncols,
                            self.value(*w).data(),
                            true,
                            &gd[n * out_plane..(n + 1) * out_plane],
                            false,
                            &mut dcol,
                            0.0,
                        );
                        geom.col2im(&dcol, &mut dx[n * in_plane..(n + 1) * in_plane]);
                    }
                    self.accumulate(grads, *x, NdTensor::from_parts(self.value(*x).shape().to_vec(), dx)?);
                }
            }
            Op::Upsample2x(a) => {
                let s = self.value(*a).shape();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut d = vec![0.0; bc * h * w];
                let gd = g.data();
                for p in 0..bc {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            d[p * h * w + (y / 2) * w + x / 2] += gd[p * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, NdTensor::from_parts(s.to_vec(), d)?);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let hw = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * hw, sb[1] * hw);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for n in 0..sa[0] {
                    let base = n * (ca + cb);
                    da.extend_from_slice(&g.data()[base..base + ca]);
                    db.extend_from_slice(&g.data()[base + ca..base + ca + cb]);
                }
                self.accumulate(grads, *a, NdTensor::from_parts(sa, da)?);
                self.accumulate(grads, *b, NdTensor::from_parts(sb, db)?);
            }
            Op::CodeLookup { books, plan, codes } => {
                let (slices, _) = decompose(g, plan.axis, plan.num_slices)?;
                for (m, (&bk, slice)) in books.iter().zip(&slices).enumerate() {
                    if !self.requires_grad(bk) {
                        continue;
                    }
                    let vecs = positions_as_vectors(slice, plan.axis)?;
                    let d = plan.slice_extent;
                    let positions = vecs.shape()[0];
                    let table_shape = self.value(bk).shape().to_vec();
                    let mut dt = vec![0.0; table_shape.iter().product()];
                    for (p, row) in vecs.data().chunks_exact(d).enumerate() {
                        let c = codes[m * positions + p];
                        for (t, r) in dt[c * d..(c + 1) * d].iter_mut().zip(row) {
                            *t += r;
                        }
                    }
                    self.accumulate(grads, bk, NdTensor::from_parts(table_shape, dt)?);
                }
            }
            Op::CrossEntropy256 { logits, targets, probs } => {
                let s = self.value(*logits).shape();
                let (ch, hw) = (s[1] / 256, s[2] * s[3]);
                let scale = g.data()[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    let (nc, p) = (i / hw, i % hw);
                    let n = nc / ch;
                    let c = nc % ch;
                    d[((n * ch + c) * 256 + t as usize) * hw + p] -= scale;
                }
                self.accumulate(grads, *logits, NdTensor::from_parts(s.to_vec(), d)?);
            }
        }
        Ok(())
    }
}
