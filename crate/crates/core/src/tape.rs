//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Ops push a node holding the
//! forward value plus whatever the adjoint needs; [`Tape::backward`] walks
//! the arena once in reverse insertion order. Nodes whose inputs carry no
//! gradient requirement are skipped entirely, so large constant operands
//! (the fixed generator matrix in particular) never allocate gradient
//! buffers.
//!
//! One tape per training step; tapes are not shared across threads.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::mapping::MapMatrix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-weight scale for grouped modulation.
#[derive(Debug, Clone)]
pub enum GroupScale<F> {
    Uniform(F),
    PerElement(Arc<Vec<F>>),
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    // elementwise, equal shape
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    // scalar-node broadcast
    AddS { v: Var, s: Var },
    SubVS { v: Var, s: Var },
    SubSV { s: Var, v: Var },
    MulS { v: Var, s: Var },
    // constant affine
    Scale { x: Var, c: F },
    AddConst { x: Var },
    // unary
    Tanh { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Square { x: Var },
    // linear algebra
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    MapMatvec { m: Arc<MapMatrix>, x: Var },
    MapMatvecT { m: Arc<MapMatrix>, x: Var },
    // convolution
    Conv2d(Box<Conv2dOp<F>>),
    MaxPool2d { x: Var, argmax: Arc<Vec<usize>> },
    AddRowBroadcast { m: Var, b: Var },
    ConvBiasAdd { x: Var, b: Var },
    // reductions
    Sum { x: Var },
    Mean { x: Var },
    SumSquares { x: Var },
    CosineSim { a: Var, b: Var, na: F, nb: F, dot: F },
    CrossEntropy { logits: Var, labels: Arc<Vec<usize>>, probs: Arc<Vec<F>> },
    // shape
    Reshape { x: Var },
    Slice { x: Var, start: usize },
    SliceCols { x: Var, start: usize, len: usize },
    Concat { xs: Vec<Var> },
    // grouped additive modulation
    GroupModAdd { base: Var, o: Var, group: usize, scale: GroupScale<F> },
}

#[derive(Debug, Clone)]
struct Conv2dOp<F> {
    x: Var,
    k: Var,
    stride: usize,
    pad: usize,
    cols: Arc<Vec<F>>,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by forward values; used for the peak-memory estimate.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel() * F::BYTES).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a node after `backward`. Only leaves retain gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient matches node shape")
        })
    }

    pub fn has_grad(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Node indices holding a gradient after backward. Because non-leaf
    /// gradients are dropped once consumed and constants never allocate
    /// one, this is exactly the set of trainable leaves reached (plus
    /// disconnected trainable leaves, which hold zeros).
    pub fn grad_bearing_indices(&self) -> Vec<usize> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.is_some().then_some(i))
            .collect()
    }

    /// Clear all gradients so backward may run again on the same graph.
    pub fn reset_gradients(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    // ── graph construction ──────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<F>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Elementwise add; one side may be a scalar node.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, BinKind::Mul)
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            let (da, db) = (self.val(a).data(), self.val(b).data());
            let data: Vec<F> = match kind {
                BinKind::Add => da.iter().zip(db).map(|(&x, &y)| x + y).collect(),
                BinKind::Sub => da.iter().zip(db).map(|(&x, &y)| x - y).collect(),
                BinKind::Mul => da.iter().zip(db).map(|(&x, &y)| x * y).collect(),
            };
            let t = Tensor::new(sa, data)?;
            let op = match kind {
                BinKind::Add => Op::Add { a, b },
                BinKind::Sub => Op::Sub { a, b },
                BinKind::Mul => Op::Mul { a, b },
            };
            return Ok(self.push(t, op, rg));
        }
        // scalar-with-tensor is the only broadcast form supported
        let (vec_var, s_var, scalar_first) = if self.val(b).is_scalar() {
            (a, b, false)
        } else if self.val(a).is_scalar() {
            (b, a, true)
        } else {
            return Err(Error::Dim(format!(
                "elementwise op needs equal shapes or a scalar operand, got {sa:?} vs {sb:?}"
            )));
        };
        let s = self.val(s_var).item();
        let vd = self.val(vec_var).data();
        let shape = self.val(vec_var).shape().to_vec();
        let (data, op): (Vec<F>, Op<F>) = match (kind, scalar_first) {
            (BinKind::Add, _) => (
                vd.iter().map(|&x| x + s).collect(),
                Op::AddS { v: vec_var, s: s_var },
            ),
            (BinKind::Mul, _) => (
                vd.iter().map(|&x| x * s).collect(),
                Op::MulS { v: vec_var, s: s_var },
            ),
            (BinKind::Sub, false) => (
                vd.iter().map(|&x| x - s).collect(),
                Op::SubVS { v: vec_var, s: s_var },
            ),
            (BinKind::Sub, true) => (
                vd.iter().map(|&x| s - x).collect(),
                Op::SubSV { s: s_var, v: vec_var },
            ),
        };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.val(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    pub fn add_const(&mut self, x: Var, c: F) -> Var {
        let t = self.val(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddConst { x }, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let t = self.val(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.maximum(F::ZERO), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        // ln(1 + e^x), computed as max(x,0) + ln(1 + e^-|x|) for stability
        self.unary(
            x,
            |v| v.maximum(F::ZERO) + (F::ONE + (-v.abs()).exp()).ln(),
            Op::Softplus { x },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "matmul needs [m,k] x [k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul_nn(self.val(a).data(), self.val(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::Matmul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("transpose needs a 2-d tensor, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.val(x).data();
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, rg))
    }

    /// y = M x for a fixed f32 generator matrix. M itself never receives
    /// gradients; only the input vector does.
    pub fn map_matvec(&mut self, m: &Arc<MapMatrix>, x: Var) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        if s != [m.cols()] {
            return Err(Error::Contract(format!(
                "map_matvec: expected input [{}], got {s:?}",
                m.cols()
            )));
        }
        let y = m.matvec(self.val(x).data());
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(y),
            Op::MapMatvec { m: Arc::clone(m), x },
            rg,
        ))
    }

    /// y = M^T u for the same fixed matrix.
    pub fn map_matvec_t(&mut self, m: &Arc<MapMatrix>, x: Var) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        if s != [m.rows()] {
            return Err(Error::Contract(format!(
                "map_matvec_t: expected input [{}], got {s:?}",
                m.rows()
            )));
        }
        let y = m.matvec_t(self.val(x).data());
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(y),
            Op::MapMatvecT { m: Arc::clone(m), x },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let ks = self.val(k).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d needs x[N,C,H,W] and k[O,C,kh,kw], got {xs:?} and {ks:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        let ho = kernels::conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::Dim(format!("conv2d: kernel {kh} exceeds padded height {}", h + 2 * pad)))?;
        let wo = kernels::conv_out_extent(w, kw, stride, pad)
            .ok_or_else(|| Error::Dim(format!("conv2d: kernel {kw} exceeds padded width {}", w + 2 * pad)))?;
        let cols = kernels::im2col(self.val(x).data(), n, c, h, w, kh, kw, stride, pad, ho, wo);
        let rows = n * ho * wo;
        let ckk = c * kh * kw;
        // y_mat[(n,oh,ow), o] = cols . kernel^T
        let y_mat = kernels::matmul_nt(&cols, self.val(k).data(), rows, ckk, o);
        // rearrange to NCHW-style [N,O,Ho,Wo]
        let mut y = vec![F::ZERO; n * o * ho * wo];
        for ni in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let row = (ni * ho + oh) * wo + ow;
                    for oi in 0..o {
                        y[((ni * o + oi) * ho + oh) * wo + ow] = y_mat[row * o + oi];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor::new(vec![n, o, ho, wo], y)?,
            Op::Conv2d(Box::new(Conv2dOp {
                x,
                k,
                stride,
                pad,
                cols: Arc::new(cols),
            })),
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!("max_pool2d needs [N,C,H,W], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = kernels::conv_out_extent(h, k, stride, 0)
            .ok_or_else(|| Error::Dim(format!("max_pool2d: window {k} exceeds height {h}")))?;
        let wo = kernels::conv_out_extent(w, k, stride, 0)
            .ok_or_else(|| Error::Dim(format!("max_pool2d: window {k} exceeds width {w}")))?;
        let (y, arg) = kernels::max_pool2d(self.val(x).data(), n, c, h, w, k, stride, ho, wo);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], y)?,
            Op::MaxPool2d {
                x,
                argmax: Arc::new(arg),
            },
            rg,
        ))
    }

    /// m[N,K] + b[K], broadcast over rows.
    pub fn add_row_broadcast(&mut self, m: Var, b: Var) -> Result<Var> {
        let ms = self.val(m).shape().to_vec();
        let bs = self.val(b).shape().to_vec();
        if ms.len() != 2 || bs != [ms[1]] {
            return Err(Error::Dim(format!(
                "add_row_broadcast needs [N,K] + [K], got {ms:?} + {bs:?}"
            )));
        }
        let (rows, k) = (ms[0], ms[1]);
        let md = self.val(m).data();
        let bd = self.val(b).data();
        let mut out = vec![F::ZERO; rows * k];
        for r in 0..rows {
            for j in 0..k {
                out[r * k + j] = md[r * k + j] + bd[j];
            }
        }
        let rg = self.rg(m) || self.rg(b);
        Ok(self.push(
            Tensor::new(ms, out)?,
            Op::AddRowBroadcast { m, b },
            rg,
        ))
    }

    /// x[N,O,H,W] + b[O], broadcast per channel.
    pub fn conv_bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let bs = self.val(b).shape().to_vec();
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::Dim(format!(
                "conv_bias_add needs [N,O,H,W] + [O], got {xs:?} + {bs:?}"
            )));
        }
        let (n, o, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.val(x).data();
        let bd = self.val(b).data();
        let plane = h * w;
        let mut out = vec![F::ZERO; xd.len()];
        for ni in 0..n {
            for oi in 0..o {
                let base = (ni * o + oi) * plane;
                let bias = bd[oi];
                for p in 0..plane {
                    out[base + p] = xd[base + p] + bias;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(xs, out)?, Op::ConvBiasAdd { x, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.val(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).numel();
        let s: F = self.val(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(s / F::from_f64(n as f64)),
            Op::Mean { x },
            rg,
        )
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn frobenius_norm_sq(&mut self, x: Var) -> Var {
        let s: F = self.val(x).data().iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, rg)
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        if ad.len() != bd.len() {
            return Err(Error::Dim(format!(
                "cosine_similarity needs equal lengths, got {} vs {}",
                ad.len(),
                bd.len()
            )));
        }
        let dot: F = ad.iter().zip(bd).map(|(&x, &y)| x * y).sum();
        let na = ad.iter().map(|&x| x * x).sum::<F>().sqrt();
        let nb = bd.iter().map(|&x| x * x).sum::<F>().sqrt();
        if na == F::ZERO || nb == F::ZERO {
            return Err(Error::Contract(
                "cosine_similarity undefined for a zero vector".into(),
            ));
        }
        let c = dot / (na * nb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(c),
            Op::CosineSim { a, b, na, nb, dot },
            rg,
        ))
    }

    /// Mean cross-entropy over the batch with a fused, numerically stable
    /// log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.val(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dim(format!(
                "cross_entropy: logits {s:?} incompatible with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Data(format!(
                    "label {y} at row {i} out of range for {c} classes"
                )));
            }
        }
        let ld = self.val(logits).data();
        let mut probs = vec![F::ZERO; n * c];
        let mut total = F::ZERO;
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let mut m = row[0];
            for &v in row.iter() {
                m = m.maximum(v);
            }
            let mut z = F::ZERO;
            for &v in row.iter() {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[i]];
        }
        let loss = total / F::from_f64(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: Arc::new(labels.to_vec()),
                probs: Arc::new(probs),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.val(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Contiguous range of a 1-d tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        if s.len() != 1 {
            return Err(Error::Dim(format!("slice needs a 1-d tensor, got {s:?}")));
        }
        if len == 0 || start + len > s[0] {
            return Err(Error::Bounds(format!(
                "slice [{start}, {}) out of range for length {}",
                start + len,
                s[0]
            )));
        }
        let data = self.val(x).data()[start..start + len].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(data), Op::Slice { x, start }, rg))
    }

    /// Column range of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("slice_cols needs a 2-d tensor, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if len == 0 || start + len > cols {
            return Err(Error::Bounds(format!(
                "column slice [{start}, {}) out of range for width {cols}",
                start + len
            )));
        }
        let xd = self.val(x).data();
        let mut out = vec![F::ZERO; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { x, start, len },
            rg,
        ))
    }

    /// Concatenate 1-d tensors in order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &v in xs {
            if self.val(v).shape().len() != 1 {
                return Err(Error::Dim(format!(
                    "concat needs 1-d tensors, got {:?}",
                    self.val(v).shape()
                )));
            }
            data.extend_from_slice(self.val(v).data());
            rg |= self.rg(v);
        }
        Ok(self.push(
            Tensor::from_vec(data),
            Op::Concat { xs: xs.to_vec() },
            rg,
        ))
    }

    /// out[k] = base[k] + scale_k * o[k / group]; the grouped additive
    /// update used for fine-tuning frozen weights.
    pub fn group_mod_add(
        &mut self,
        base: Var,
        o: Var,
        group: usize,
        scale: GroupScale<F>,
    ) -> Result<Var> {
        let n = self.val(base).numel();
        let os = self.val(o).shape().to_vec();
        if group == 0 {
            return Err(Error::Contract("group size must be positive".into()));
        }
        let expect = n.div_ceil(group);
        if os != [expect] {
            return Err(Error::Contract(format!(
                "modulation vector must have length ceil({n}/{group}) = {expect}, got {os:?}"
            )));
        }
        if let GroupScale::PerElement(sc) = &scale {
            if sc.len() != n {
                return Err(Error::Contract(format!(
                    "per-element scale length {} != base length {n}",
                    sc.len()
                )));
            }
        }
        let bd = self.val(base).data();
        let od = self.val(o).data();
        let mut out = vec![F::ZERO; n];
        match &scale {
            GroupScale::Uniform(alpha) => {
                for k in 0..n {
                    out[k] = bd[k] + *alpha * od[k / group];
                }
            }
            GroupScale::PerElement(sc) => {
                for k in 0..n {
                    out[k] = bd[k] + sc[k] * od[k / group];
                }
            }
        }
        let shape = self.val(base).shape().to_vec();
        let rg = self.rg(base) || self.rg(o);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GroupModAdd { base, o, group, scale },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Populates gradient slots for all
    /// leaves; intermediate gradients are dropped as soon as they are
    /// consumed. Running twice without [`Tape::reset_gradients`] is an
    /// error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call reset_gradients first".into(),
            ));
        }
        if self.val(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.val(root).shape()
            )));
        }
        self.backward_done = true;
        if self.rg(root) {
            self.grads[root.0] = Some(vec![F::ONE]);
            for i in (0..=root.0).rev() {
                if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                    continue;
                }
                let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
                let g = if is_leaf {
                    continue; // leaves only accumulate
                } else {
                    self.grads[i].take().unwrap()
                };
                self.propagate(i, &g);
            }
        }
        // Every trainable leaf gets a slot, even if disconnected from the root.
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf)
                && self.nodes[i].requires_grad
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![F::ZERO; self.nodes[i].value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[F]) {
        // Split borrows: nodes are read, grads are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;

        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let numel = |v: Var| nodes[v.0].value.numel();

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if rg(*a) {
                    axpy(gbuf(grads, a.0, numel(*a)), g, F::ONE);
                }
                if rg(*b) {
                    axpy(gbuf(grads, b.0, numel(*b)), g, F::ONE);
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    axpy(gbuf(grads, a.0, numel(*a)), g, F::ONE);
                }
                if rg(*b) {
                    axpy(gbuf(grads, b.0, numel(*b)), g, -F::ONE);
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let bd = val(*b);
                    let buf = gbuf(grads, a.0, numel(*a));
                    for ((o, &gi), &bv) in buf.iter_mut().zip(g).zip(bd) {
                        *o += gi * bv;
                    }
                }
                if rg(*b) {
                    let ad = val(*a);
                    let buf = gbuf(grads, b.0, numel(*b));
                    for ((o, &gi), &av) in buf.iter_mut().zip(g).zip(ad) {
                        *o += gi * av;
                    }
                }
            }
            Op::AddS { v, s } => {
                if rg(*v) {
                    axpy(gbuf(grads, v.0, numel(*v)), g, F::ONE);
                }
                if rg(*s) {
                    let total: F = g.iter().copied().sum();
                    gbuf(grads, s.0, 1)[0] += total;
                }
            }
            Op::SubVS { v, s } => {
                if rg(*v) {
                    axpy(gbuf(grads, v.0, numel(*v)), g, F::ONE);
                }
                if rg(*s) {
                    let total: F = g.iter().copied().sum();
                    gbuf(grads, s.0, 1)[0] -= total;
                }
            }
            Op::SubSV { s, v } => {
                if rg(*s) {
                    let total: F = g.iter().copied().sum();
                    gbuf(grads, s.0, 1)[0] += total;
                }
                if rg(*v) {
                    axpy(gbuf(grads, v.0, numel(*v)), g, -F::ONE);
                }
            }
            Op::MulS { v, s } => {
                let sv = val(*s)[0];
                if rg(*v) {
                    axpy(gbuf(grads, v.0, numel(*v)), g, sv);
                }
                if rg(*s) {
                    let vd = val(*v);
                    let total: F = g.iter().zip(vd).map(|(&gi, &vi)| gi * vi).sum();
                    gbuf(grads, s.0, 1)[0] += total;
                }
            }
            Op::Scale { x, c } => {
                if rg(*x) {
                    axpy(gbuf(grads, x.0, numel(*x)), g, *c);
                }
            }
            Op::AddConst { x } => {
                if rg(*x) {
                    axpy(gbuf(grads, x.0, numel(*x)), g, F::ONE);
                }
            }
            Op::Tanh { x } => {
                if rg(*x) {
                    let yd = nodes[idx].value.data();
                    let buf = gbuf(grads, x.0, numel(*x));
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(yd) {
                        *o += gi * (F::ONE - y * y);
                    }
                }
            }
            Op::Relu { x } => {
                if rg(*x) {
                    let xd = val(*x);
                    let buf = gbuf(grads, x.0, numel(*x));
                    for ((o, &gi), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        if xv > F::ZERO {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if rg(*x) {
                    let yd = nodes[idx].value.data();
                    let buf = gbuf(grads, x.0, numel(*x));
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(yd) {
                        *o += gi * y * (F::ONE - y);
                    }
                }
            }
            Op::Softplus { x } => {
                if rg(*x) {
                    let xd = val(*x);
                    let buf = gbuf(grads, x.0, numel(*x));
                    for ((o, &gi), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        *o += gi * sigmoid_scalar(xv);
                    }
                }
            }
            Op::Exp { x } => {
                if rg(*x) {
                    let yd = nodes[idx].value.data();
                    let buf = gbuf(grads, x.0, numel(*x));
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(yd) {
                        *o += gi * y;
                    }
                }
            }
            Op::Log { x } => {
                if rg(*x) {
                    let xd = val(*x);
                    let buf = gbuf(grads, x.0, numel(*x));
                    for ((o, &gi), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        *o += gi / xv;
                    }
                }
            }
            Op::Square { x } => {
                if rg(*x) {
                    let xd = val(*x);
                    let two = F::from_f64(2.0);
                    let buf = gbuf(grads, x.0, numel(*x));
                    for ((o, &gi), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        *o += gi * two * xv;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = nodes[b.0].value.shape()[1];
                if rg(*a) {
                    let ga = kernels::matmul_nt(g, val(*b), m, n, k);
                    axpy(gbuf(grads, a.0, m * k), &ga, F::ONE);
                }
                if rg(*b) {
                    let gb = kernels::matmul_tn(val(*a), g, k, m, n);
                    axpy(gbuf(grads, b.0, k * n), &gb, F::ONE);
                }
            }
            Op::Transpose { x } => {
                if rg(*x) {
                    let s = nodes[idx].value.shape();
                    let (r, c) = (s[0], s[1]); // shape of the transposed output
                    let buf = gbuf(grads, x.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::MapMatvec { m, x } => {
                if rg(*x) {
                    let gx = m.matvec_t(g);
                    axpy(gbuf(grads, x.0, m.cols()), &gx, F::ONE);
                }
            }
            Op::MapMatvecT { m, x } => {
                if rg(*x) {
                    let gx = m.matvec(g);
                    axpy(gbuf(grads, x.0, m.rows()), &gx, F::ONE);
                }
            }
            Op::Conv2d(op) => {
                let Conv2dOp { x, k, stride, pad, cols } = op.as_ref();
                let xs = nodes[x.0].value.shape().to_vec();
                let ks = nodes[k.0].value.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ks[0], ks[2], ks[3]);
                let ys = nodes[idx].value.shape().to_vec();
                let (ho, wo) = (ys[2], ys[3]);
                let rows = n * ho * wo;
                let ckk = c * kh * kw;
                // g arrives as [N,O,Ho,Wo]; fold back into [(n,oh,ow), o]
                let mut g_mat = vec![F::ZERO; rows * o];
                for ni in 0..n {
                    for oi in 0..o {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                g_mat[((ni * ho + oh) * wo + ow) * o + oi] =
                                    g[((ni * o + oi) * ho + oh) * wo + ow];
                            }
                        }
                    }
                }
                if rg(*k) {
                    let gw = kernels::matmul_tn(&g_mat, cols, o, rows, ckk);
                    axpy(gbuf(grads, k.0, o * ckk), &gw, F::ONE);
                }
                if rg(*x) {
                    let kd = val(*k); // [O, ckk] flat
                    let gcols = kernels::matmul_nn(&g_mat, kd, rows, o, ckk);
                    let buf = gbuf(grads, x.0, n * c * h * w);
                    kernels::col2im(&gcols, n, c, h, w, kh, kw, *stride, *pad, ho, wo, buf);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if rg(*x) {
                    let buf = gbuf(grads, x.0, numel(*x));
                    for (gi, &src) in g.iter().zip(argmax.iter()) {
                        buf[src] += *gi;
                    }
                }
            }
            Op::AddRowBroadcast { m, b } => {
                let k = nodes[b.0].value.numel();
                if rg(*m) {
                    axpy(gbuf(grads, m.0, numel(*m)), g, F::ONE);
                }
                if rg(*b) {
                    let buf = gbuf(grads, b.0, k);
                    for (chunk_idx, chunk) in g.chunks(k).enumerate() {
                        let _ = chunk_idx;
                        for (o, &gi) in buf.iter_mut().zip(chunk) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::ConvBiasAdd { x, b } => {
                if rg(*x) {
                    axpy(gbuf(grads, x.0, numel(*x)), g, F::ONE);
                }
                if rg(*b) {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let (n, o, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let buf = gbuf(grads, b.0, o);
                    for ni in 0..n {
                        for oi in 0..o {
                            let base = (ni * o + oi) * plane;
                            let mut acc = F::ZERO;
                            for p in 0..plane {
                                acc += g[base + p];
                            }
                            buf[oi] += acc;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    let g0 = g[0];
                    let buf = gbuf(grads, x.0, numel(*x));
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                }
            }
            Op::Mean { x } => {
                if rg(*x) {
                    let n = numel(*x);
                    let g0 = g[0] / F::from_f64(n as f64);
                    let buf = gbuf(grads, x.0, n);
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                }
            }
            Op::SumSquares { x } => {
                if rg(*x) {
                    let xd = val(*x);
                    let c = g[0] * F::from_f64(2.0);
                    let buf = gbuf(grads, x.0, numel(*x));
                    for (o, &xv) in buf.iter_mut().zip(xd) {
                        *o += c * xv;
                    }
                }
            }
            Op::CosineSim { a, b, na, nb, dot } => {
                let g0 = g[0];
                let (na, nb, dot) = (*na, *nb, *dot);
                let inv = F::ONE / (na * nb);
                let cos = dot * inv;
                if rg(*a) {
                    let (ad, bd) = (val(*a), val(*b));
                    let buf = gbuf(grads, a.0, ad.len());
                    let na2 = na * na;
                    for ((o, &av), &bv) in buf.iter_mut().zip(ad).zip(bd) {
                        *o += g0 * (bv * inv - cos * av / na2);
                    }
                }
                if rg(*b) {
                    let (ad, bd) = (val(*a), val(*b));
                    let buf = gbuf(grads, b.0, bd.len());
                    let nb2 = nb * nb;
                    for ((o, &bv), &av) in buf.iter_mut().zip(bd).zip(ad) {
                        *o += g0 * (av * inv - cos * bv / nb2);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if rg(*logits) {
                    let n = labels.len();
                    let c = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / F::from_f64(n as f64);
                    let buf = gbuf(grads, logits.0, n * c);
                    for i in 0..n {
                        for j in 0..c {
                            let ind = if j == labels[i] { F::ONE } else { F::ZERO };
                            buf[i * c + j] += scale * (probs[i * c + j] - ind);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if rg(*x) {
                    axpy(gbuf(grads, x.0, numel(*x)), g, F::ONE);
                }
            }
            Op::Slice { x, start } => {
                if rg(*x) {
                    let buf = gbuf(grads, x.0, numel(*x));
                    for (o, &gi) in buf[*start..*start + g.len()].iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if rg(*x) {
                    let cols = nodes[x.0].value.shape()[1];
                    let rows = nodes[x.0].value.shape()[0];
                    let buf = gbuf(grads, x.0, rows * cols);
                    for r in 0..rows {
                        for j in 0..*len {
                            buf[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let mut off = 0;
                for &v in xs.iter() {
                    let n = numel(v);
                    if rg(v) {
                        let buf = gbuf(grads, v.0, n);
                        for (o, &gi) in buf.iter_mut().zip(&g[off..off + n]) {
                            *o += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::GroupModAdd { base, o, group, scale } => {
                if rg(*base) {
                    axpy(gbuf(grads, base.0, numel(*base)), g, F::ONE);
                }
                if rg(*o) {
                    let n = numel(*base);
                    let buf = gbuf(grads, o.0, numel(*o));
                    match scale {
                        GroupScale::Uniform(alpha) => {
                            for (k, &gi) in g.iter().enumerate().take(n) {
                                buf[k / group] += *alpha * gi;
                            }
                        }
                        GroupScale::PerElement(sc) => {
                            for (k, &gi) in g.iter().enumerate().take(n) {
                                buf[k / group] += sc[k] * gi;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

fn sigmoid_scalar<F: Scalar>(v: F) -> F {
    // 1 / (1 + e^-x), split by sign so the exponential never overflows
    if v >= F::ZERO {
        F::ONE / (F::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::ONE + e)
    }
}

fn gbuf<F: Scalar>(grads: &mut [Option<Vec<F>>], idx: usize, numel: usize) -> &mut Vec<F> {
    grads[idx].get_or_insert_with(|| vec![F::ZERO; numel])
}

fn axpy<F: Scalar>(buf: &mut [F], g: &[F], c: F) {
    for (o, &gi) in buf.iter_mut().zip(g) {
        *o += c * gi;
    }
}
