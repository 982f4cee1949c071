//! Reverse-mode autodiff on an append-only tape.
//!
//! Every differentiable operation appends one node holding the forward value
//! and whatever it needs for its backward rule. Nodes only reference earlier
//! nodes, so a single reverse scan from the loss visits each node exactly
//! once. Parameter leaves accumulate their gradients into a `ParamStore` with
//! `+=`; calling `backward` twice without `zero_grad` doubles them.

use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::{check_rank, Tensor};

/// Handle to a tensor on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    op: Op,
    needs: bool,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    SoftmaxRows { x: Var },
    Conv2d(Box<ConvRecord>),
    AvgPool2 { x: Var },
    BilinearUpsample { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    ConcatChannels { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MulScalar { x: Var, s: Var },
    Relu { x: Var },
    SumAll { x: Var },
    CrossEntropy(Box<CeRecord>),
}

struct ConvRecord {
    x: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    pad: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    /// im2col matrix of the input, kept for the two backward matmuls.
    cols: Vec<f64>,
}

struct CeRecord {
    logits: Var,
    labels: Vec<usize>,
    /// Per-pixel softmax probabilities, laid out like the logits.
    probs: Vec<f64>,
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul { .. } => "matmul",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::Conv2d(_) => "conv2d",
        Op::AvgPool2 { .. } => "avg_pool2",
        Op::BilinearUpsample { .. } => "bilinear_upsample",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::MulElem { .. } => "mul_elementwise",
        Op::Scale { .. } => "scale",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Relu { .. } => "relu",
        Op::SumAll { .. } => "sum_all",
        Op::CrossEntropy(_) => "cross_entropy",
    }
}

/// Row-major matmul: a is m*k, b is k*n, result m*n.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let n = oh * ow;
    let mut cols = vec![0.0; cin * kh * kw * n];
    for ci in 0..cin {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = src[ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    grad_x: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let n = oh * ow;
    for ci in 0..cin {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        grad_x[dst_row + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Corner-aligned source coordinate for bilinear interpolation.
fn bilerp_coord(out_i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let src = out_i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = src.floor() as usize;
    let lo = lo.min(in_len - 2);
    (lo, lo + 1, src - lo as f64)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Number of nodes whose operation carries the given name; used by tests
    /// to pin structural facts like "M refinement steps run M dual blocks".
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| op_name(&n.op) == name).count()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.nodes.push(Node { value, op, needs });
        self.grads.push(Vec::new());
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Introduces a parameter leaf; its gradient lands in the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_rank(ta, 2, "matmul lhs")?;
        check_rank(tb, 2, "matmul rhs")?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {m}x{k} vs {k2}x{n}"
            )));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            needs,
        ))
    }

    /// Row-wise softmax of a rank-2 tensor, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_rank(t, 2, "softmax_rows")?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        if c == 0 {
            return Err(Error::Shape("softmax_rows on zero-width rows".into()));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows { x }, needs))
    }

    /// 2-D cross-correlation of x [Cin,H,W] with kernel [Cout,Cin,kh,kw] and
    /// bias [Cout], zero padding. Output size must divide exactly:
    /// (H + 2*pad - kh) % stride == 0, same for width.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        check_rank(tx, 3, "conv2d input")?;
        check_rank(tk, 4, "conv2d kernel")?;
        check_rank(tb, 1, "conv2d bias")?;
        let (cin, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, kcin, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if tb.shape()[0] != cout {
            return Err(Error::Shape(format!(
                "conv2d bias has {} entries for {cout} output channels",
                tb.shape()[0]
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let span_h = (h + 2 * pad) as isize - kh as isize;
        let span_w = (w + 2 * pad) as isize - kw as isize;
        if span_h < 0 || span_w < 0 || span_h as usize % stride != 0 || span_w as usize % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let oh = span_h as usize / stride + 1;
        let ow = span_w as usize / stride + 1;

        let cols = im2col(tx.data(), cin, h, w, kh, kw, stride, pad, oh, ow);
        let rows = cin * kh * kw;
        let n = oh * ow;
        let mut out = matmul_raw(tk.data(), &cols, cout, rows, n);
        for co in 0..cout {
            let bv = tb.data()[co];
            for o in &mut out[co * n..(co + 1) * n] {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        let record = ConvRecord {
            x, kernel, bias, stride, pad, cin, h, w, cout, kh, kw, oh, ow, cols,
        };
        Ok(self.push(
            Tensor::new(vec![cout, oh, ow], out)?,
            Op::Conv2d(Box::new(record)),
            needs,
        ))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_rank(t, 3, "avg_pool2")?;
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ci * h + 2 * oy) * w + 2 * ox;
                    out[(ci * oh + oy) * ow + ox] =
                        0.25 * (t.data()[base] + t.data()[base + 1] + t.data()[base + w] + t.data()[base + w + 1]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool2 { x }, needs))
    }

    /// Corner-aligned bilinear upsampling of [C,H,W] to [C,out_h,out_w].
    /// Upscale only; output corners reproduce input corners exactly.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        check_rank(t, 3, "bilinear_upsample")?;
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if out_h < h || out_w < w {
            return Err(Error::Config(format!(
                "bilinear_upsample cannot downscale {h}x{w} to {out_h}x{out_w}"
            )));
        }
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1, fy) = bilerp_coord(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = bilerp_coord(ox, out_w, w);
                    let v00 = t.at3(ci, y0, x0);
                    let v01 = t.at3(ci, y0, x1);
                    let v10 = t.at3(ci, y1, x0);
                    let v11 = t.at3(ci, y1, x1);
                    out[(ci * out_h + oy) * out_w + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, out_h, out_w], out)?,
            Op::BilinearUpsample { x },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let want: usize = shape.iter().product();
        if want != t.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape(),
                shape
            )));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Usage(format!(
                "permute axes {axes:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
        let out = permute_data(t.data(), t.shape(), axes, &out_shape);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute { x, axes: axes.to_vec() },
            needs,
        ))
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Usage("concat_channels of an empty list".into()));
        }
        let first = self.value(xs[0]);
        check_rank(first, 3, "concat_channels")?;
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut total_c = 0;
        for &v in xs {
            let t = self.value(v);
            check_rank(t, 3, "concat_channels")?;
            if t.shape()[1] != h || t.shape()[2] != w {
                return Err(Error::Shape(format!(
                    "concat_channels spatial mismatch: {h}x{w} vs {}x{}",
                    t.shape()[1],
                    t.shape()[2]
                )));
            }
            total_c += t.shape()[0];
        }
        let mut out = Vec::with_capacity(total_c * h * w);
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(vec![total_c, h, w], out)?,
            Op::ConcatChannels { xs: xs.to_vec() },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "sub")
    }

    pub fn mul_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "mul")
    }

    fn zip_elementwise(&mut self, a: Var, b: Var, kind: &str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{kind} shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = match kind {
            "add" => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            "sub" => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            _ => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
        };
        let op = match kind {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::MulElem { a, b },
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(ta.shape().to_vec(), data)?, op, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// Multiplies every element of x by a one-element tensor s. The gradient
    /// flows to both factors, which is what the learned gate scalars need.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Shape(format!(
                "mul_scalar gate must be one element, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::MulScalar { x, s }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::SumAll { x }, needs)
    }

    /// Mean over pixels of -log softmax probability of the true class.
    /// Logits are [K,H,W]; labels run row-major over H*W with values in [0,K).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        check_rank(t, 3, "cross_entropy logits")?;
        let (k, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let npx = h * w;
        if labels.len() != npx {
            return Err(Error::Shape(format!(
                "cross_entropy got {} labels for {npx} pixels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; k * npx];
        let mut total = 0.0;
        for px in 0..npx {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(t.data()[c * npx + px]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (t.data()[c * npx + px] - m).exp();
                probs[c * npx + px] = e;
                sum += e;
            }
            for c in 0..k {
                probs[c * npx + px] /= sum;
            }
            total -= probs[labels[px] * npx + px].ln();
        }
        let loss = Tensor::scalar(total / npx as f64);
        let needs = self.needs(logits);
        let record = CeRecord { logits, labels: labels.to_vec(), probs };
        Ok(self.push(loss, Op::CrossEntropy(Box::new(record)), needs))
    }

    /// Reverse pass from a scalar loss. Parameter gradients are added into
    /// the store; call `store.zero_grad()` between batches.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward on a var from another tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs {
            return Ok(());
        }
        for i in 0..=loss.0 {
            if self.nodes[i].needs {
                let n = self.nodes[i].value.numel();
                self.grads[i].clear();
                self.grads[i].resize(n, 0.0);
            }
        }
        self.grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.dispatch_backward(i, &g, store);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs {
            return;
        }
        let g = &mut self.grads[v.0];
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn dispatch_backward(&mut self, i: usize, g: &[f64], store: &mut ParamStore) {
        match &self.nodes[i].op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a.0].needs {
                    // gA = G * B^T, computed as row dots to stay contiguous.
                    let bd = self.nodes[b.0].value.data();
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            ga[r * k + p] = acc;
                        }
                    }
                    self.add_grad(a, &ga);
                }
                if self.nodes[b.0].needs {
                    // gB = A^T * G.
                    let ad = self.nodes[a.0].value.data();
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let (r, c) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                    for (d, (yv, gv)) in gx[row * c..(row + 1) * c].iter_mut().zip(ys.iter().zip(gs)) {
                        *d = yv * (gv - dot);
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::Conv2d(rec) => {
                let (x, kernel, bias) = (rec.x, rec.kernel, rec.bias);
                let (cin, h, w) = (rec.cin, rec.h, rec.w);
                let (cout, kh, kw) = (rec.cout, rec.kh, rec.kw);
                let (oh, ow, stride, pad) = (rec.oh, rec.ow, rec.stride, rec.pad);
                let rows = cin * kh * kw;
                let n = oh * ow;
                if self.nodes[bias.0].needs {
                    let mut gb = vec![0.0; cout];
                    for (co, gb_co) in gb.iter_mut().enumerate() {
                        *gb_co = g[co * n..(co + 1) * n].iter().sum();
                    }
                    self.add_grad(bias, &gb);
                }
                if self.nodes[kernel.0].needs {
                    // gK = G * cols^T.
                    let cols = match &self.nodes[i].op {
                        Op::Conv2d(r) => &r.cols,
                        _ => unreachable!(),
                    };
                    let mut gk = vec![0.0; cout * rows];
                    for co in 0..cout {
                        let grow = &g[co * n..(co + 1) * n];
                        for p in 0..rows {
                            let crow = &cols[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gv, cv) in grow.iter().zip(crow) {
                                acc += gv * cv;
                            }
                            gk[co * rows + p] = acc;
                        }
                    }
                    self.add_grad(kernel, &gk);
                }
                if self.nodes[x.0].needs {
                    // grad cols = K^T * G, scattered back through the im2col map.
                    let kd = self.nodes[kernel.0].value.data();
                    let mut gcols = vec![0.0; rows * n];
                    for co in 0..cout {
                        let grow = &g[co * n..(co + 1) * n];
                        for p in 0..rows {
                            let kv = kd[co * rows + p];
                            let dst = &mut gcols[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += kv * gv;
                            }
                        }
                    }
                    let mut gx = vec![0.0; cin * h * w];
                    col2im_add(&gcols, &mut gx, cin, h, w, kh, kw, stride, pad, oh, ow);
                    self.add_grad(x, &gx);
                }
            }
            Op::AvgPool2 { x } => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = 0.25 * g[(ci * oh + oy) * ow + ox];
                            let base = (ci * h + 2 * oy) * w + 2 * ox;
                            gx[base] += gv;
                            gx[base + 1] += gv;
                            gx[base + w] += gv;
                            gx[base + w + 1] += gv;
                        }
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::BilinearUpsample { x } => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let os = self.nodes[i].value.shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (os[1], os[2]);
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..oh {
                        let (y0, y1, fy) = bilerp_coord(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = bilerp_coord(ox, ow, w);
                            let gv = g[(ci * oh + oy) * ow + ox];
                            gx[(ci * h + y0) * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                            gx[(ci * h + y0) * w + x1] += (1.0 - fy) * fx * gv;
                            gx[(ci * h + y1) * w + x0] += fy * (1.0 - fx) * gv;
                            gx[(ci * h + y1) * w + x1] += fy * fx * gv;
                        }
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::Reshape { x } => self.add_grad(*x, g),
            Op::Permute { x, axes } => {
                let (x, axes) = (*x, axes.clone());
                let in_shape = self.nodes[x.0].value.shape().to_vec();
                let out_shape = self.nodes[i].value.shape().to_vec();
                let gx = unpermute_data(g, &in_shape, &axes, &out_shape);
                self.add_grad(x, &gx);
            }
            Op::ConcatChannels { xs } => {
                let xs = xs.clone();
                let mut offset = 0;
                for v in xs {
                    let n = self.nodes[v.0].value.numel();
                    let slice = g[offset..offset + n].to_vec();
                    self.add_grad(v, &slice);
                    offset += n;
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Op::MulElem { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.add_grad(a, &ga);
                }
                if self.nodes[b.0].needs {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.add_grad(b, &gb);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(x, &gx);
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                if self.nodes[x.0].needs {
                    let sv = self.nodes[s.0].value.data()[0];
                    let gx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    self.add_grad(x, &gx);
                }
                if self.nodes[s.0].needs {
                    let dot: f64 = g
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    self.add_grad(s, &[dot]);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let n = self.nodes[x.0].value.numel();
                let gx = vec![g[0]; n];
                self.add_grad(x, &gx);
            }
            Op::CrossEntropy(rec) => {
                let logits = rec.logits;
                if self.nodes[logits.0].needs {
                    let (probs, labels) = match &self.nodes[i].op {
                        Op::CrossEntropy(r) => (&r.probs, &r.labels),
                        _ => unreachable!(),
                    };
                    let k = self.nodes[logits.0].value.shape()[0];
                    let npx = labels.len();
                    let inv = g[0] / npx as f64;
                    let mut gx = vec![0.0; k * npx];
                    for px in 0..npx {
                        for c in 0..k {
                            let y = if labels[px] == c { 1.0 } else { 0.0 };
                            gx[c * npx + px] = (probs[c * npx + px] - y) * inv;
                        }
                    }
                    self.add_grad(logits, &gx);
                }
            }
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data(data: &[f64], in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let out_strides = strides_of(out_shape);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; in_shape.len()];
    for &v in data {
        // out position d takes input axis axes[d].
        let mut out_flat = 0;
        for (d, &a) in axes.iter().enumerate() {
            out_flat += idx[a] * out_strides[d];
        }
        out[out_flat] = v;
        for d in (0..in_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn unpermute_data(g: &[f64], in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let out_strides = strides_of(out_shape);
    let mut gx = vec![0.0; g.len()];
    let mut idx = vec![0usize; in_shape.len()];
    for gx_v in gx.iter_mut() {
        let mut out_flat = 0;
        for (d, &a) in axes.iter().enumerate() {
            out_flat += idx[a] * out_strides[d];
        }
        *gx_v = g[out_flat];
        for d in (0..in_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    gx
}
