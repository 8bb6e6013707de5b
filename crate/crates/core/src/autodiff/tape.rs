//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node to the [`Tape`]; node ids are assigned in
//! creation order, so inputs always precede their consumers and a single
//! reverse sweep over the node list visits each node once.

use super::tensor::{matmul_nn, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    },
    Relu(Var),
    Gelu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ChannelBias {
        x: Var,
        b: Var,
        plane: usize,
    },
    RowBias {
        x: Var,
        b: Var,
        cols: usize,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumRows {
        x: Var,
        cols: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
        cols: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        k: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` for constants and nodes the loss does not reach.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Rows × columns view of a tensor: the last axis is the row.
fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&last, rest)) => (rest.iter().product(), last),
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected a 2-D tensor, got shape {shape:?}"),
        )),
    }
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Half-open input range pooled into output cell `i` of `out` cells over `len` inputs.
pub fn pool_bounds(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims("transpose", self.shape(x))?;
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![cols, rows], out)?,
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    /// Cross-correlation of a `[C×H×W]` input with `[O×C×kh×kw]` kernels and zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be positive"));
        }
        let (c, h, w) = match *self.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(TensorError::invalid(OP, format!("input must be C×H×W, got {s:?}"))),
        };
        let (o, kc, kh, kw) = match *self.shape(kernel) {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            ref s => {
                return Err(TensorError::invalid(
                    OP,
                    format!("kernels must be O×C×kh×kw, got {s:?}"),
                ))
            }
        };
        if kc != c {
            return Err(TensorError::mismatch(OP, self.shape(input), self.shape(kernel)));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::invalid(
                OP,
                format!("kernel {kh}×{kw} exceeds padded input {}×{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad: padding,
            out_h,
            out_w,
        };
        let cols = im2col(self.data(input), &geom);
        let q = c * kh * kw;
        let out = matmul_nn(self.data(kernel), &cols, o, q, out_h * out_w);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Tensor::new(vec![o, out_h, out_w], out)?,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adaptive average pooling of a `[C×H×W]` input to `[C×out_h×out_w]`.
    ///
    /// Output cell `(i, j)` averages rows `[⌊iH/oh⌋, ⌈(i+1)H/oh⌉)` and the
    /// analogous column range.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "adaptive_avg_pool2d";
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(TensorError::invalid(OP, format!("input must be C×H×W, got {s:?}"))),
        };
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid(OP, "output dims must be positive"));
        }
        if out_h > h || out_w > w {
            return Err(TensorError::invalid(
                OP,
                format!("output {out_h}×{out_w} larger than input {h}×{w}"),
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for i in 0..out_h {
                let (r0, r1) = pool_bounds(i, out_h, h);
                for j in 0..out_w {
                    let (c0, c1) = pool_bounds(j, out_w, w);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        for v in &plane[r * w + c0..r * w + c1] {
                            s += v;
                        }
                    }
                    out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, out_h, out_w], out)?,
            Op::AvgPool {
                x,
                c,
                h,
                w,
                out_h,
                out_w,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b[C]` to every spatial position of channel `c` of `x[C×…]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || self.shape(b) != [shape[0]] {
            return Err(TensorError::mismatch("add_channel_bias", shape, self.shape(b)));
        }
        let plane: usize = shape[1..].iter().product();
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(plane)
            .zip(bias)
            .flat_map(|(chunk, &bv)| chunk.iter().map(move |v| v + bv))
            .collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::ChannelBias { x, b, plane }, rg))
    }

    /// Adds `b[n]` to every row of `x[…×n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = as_rows(self.shape(x));
        if self.shape(b) != [cols] {
            return Err(TensorError::mismatch("add_row_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(v, bv)| v + bv))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::RowBias { x, b, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, vec![n])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = as_rows(self.shape(x));
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x, cols }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = as_rows(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TensorError::mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let xh = (row[j] - mean) * is;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = xh * g[j] + bt[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums along the last axis: `[m×n] → [m]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = as_rows(self.shape(x));
        let data = self.data(x).chunks(cols).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![rows], data).expect("rows > 0"),
            Op::SumRows { x, cols },
            rg,
        )
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("slice_cols", self.shape(x))?;
        if start >= end || end > cols {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("range {start}..{end} out of 0..{cols}"),
            ));
        }
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, end - start], data)?,
            Op::SliceCols { x, start, end, cols },
            rg,
        ))
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("slice_rows", self.shape(x))?;
        if start >= end || end > rows {
            return Err(TensorError::invalid(
                "slice_rows",
                format!("range {start}..{end} out of 0..{rows}"),
            ));
        }
        let data = self.data(x)[start * cols..end * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![end - start, cols], data)?,
            Op::SliceRows { x, start, cols },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::invalid("concat_cols", "no inputs"));
        };
        let (rows, _) = matrix_dims("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(TensorError::mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                data.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols { parts: widths },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::invalid("concat_rows", "no inputs"));
        };
        let (_, cols) = matrix_dims("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(TensorError::mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("gather_rows", self.shape(x))?;
        if idx.is_empty() {
            return Err(TensorError::invalid("gather_rows", "no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of 0..{rows}"),
            ));
        }
        let src = self.data(x);
        let data = idx
            .iter()
            .flat_map(|&i| src[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Picks elements of `x` by flat index into a new tensor of `shape`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::invalid("gather", format!("index {bad} out of 0..{n}")));
        }
        let src = self.data(x);
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[B×K]` (or `[K]`) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = as_rows(self.shape(logits));
        if labels.len() != rows {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter() {
                s += (v - max).exp();
            }
            let lse = max + s.ln();
            loss += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= rows as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                k,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
        }
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Reverse sweep seeded with upstream gradients for arbitrary nodes
    /// (a vector-Jacobian product). Seeds for the same node accumulate.
    pub fn backward_from(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(TensorError::mismatch(
                    "backward_from",
                    self.shape(*v),
                    &[g.len()],
                ));
            }
            top = top.max(v.0 + 1);
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            accumulate(&mut grads, *v, self.value(*v).len(), |acc| {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            });
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    accumulate(grads, a, m * k, |ga| matmul_nt_acc(g, self.data(b), m, n, k, ga));
                }
                if needs(b) {
                    accumulate(grads, b, k * n, |gb| matmul_tn_acc(self.data(a), g, m, k, n, gb));
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if needs(x) {
                    accumulate(grads, x, rows * cols, |gx| {
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[i * cols + j] += g[j * rows + i];
                            }
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let q = geom.c * geom.kh * geom.kw;
                let p = geom.out_h * geom.out_w;
                if needs(*kernel) {
                    accumulate(grads, *kernel, geom.o * q, |gk| {
                        matmul_nt_acc(g, cols, geom.o, p, q, gk)
                    });
                }
                if needs(*input) {
                    let mut gcols = vec![0.0; q * p];
                    matmul_tn_acc(self.data(*kernel), g, geom.o, q, p, &mut gcols);
                    accumulate(grads, *input, geom.c * geom.h * geom.w, |gi| {
                        col2im_acc(&gcols, geom, gi)
                    });
                }
            }
            &Op::AvgPool {
                x,
                c,
                h,
                w,
                out_h,
                out_w,
            } => {
                if needs(x) {
                    accumulate(grads, x, c * h * w, |gx| {
                        for ch in 0..c {
                            for i in 0..out_h {
                                let (r0, r1) = pool_bounds(i, out_h, h);
                                for j in 0..out_w {
                                    let (c0, c1) = pool_bounds(j, out_w, w);
                                    let share = g[(ch * out_h + i) * out_w + j]
                                        / ((r1 - r0) * (c1 - c0)) as f64;
                                    for r in r0..r1 {
                                        for cc in c0..c1 {
                                            gx[(ch * h + r) * w + cc] += share;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            &Op::Relu(x) => {
                if needs(x) {
                    let xv = self.data(x);
                    accumulate(grads, x, xv.len(), |gx| {
                        for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                            if v > 0.0 {
                                *a += gv;
                            }
                        }
                    });
                }
            }
            &Op::Gelu(x) => {
                if needs(x) {
                    let xv = self.data(x);
                    accumulate(grads, x, xv.len(), |gx| {
                        for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                            *a += gv * gelu_grad(v);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        accumulate(grads, v, g.len(), |gv| add_into(gv, g));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.len(), |ga| add_into(ga, g));
                }
                if needs(b) {
                    accumulate(grads, b, g.len(), |gb| {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x -= y;
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if needs(v) {
                        let ov = self.data(other);
                        accumulate(grads, v, g.len(), |gv| {
                            for ((x, &gg), &o) in gv.iter_mut().zip(g).zip(ov) {
                                *x += gg * o;
                            }
                        });
                    }
                }
            }
            &Op::Scale(x, c) => {
                if needs(x) {
                    accumulate(grads, x, g.len(), |gx| {
                        for (a, gv) in gx.iter_mut().zip(g) {
                            *a += c * gv;
                        }
                    });
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if needs(x) {
                    accumulate(grads, x, g.len(), |gx| add_into(gx, g));
                }
            }
            &Op::ChannelBias { x, b, plane } => {
                if needs(x) {
                    accumulate(grads, x, g.len(), |gx| add_into(gx, g));
                }
                if needs(b) {
                    accumulate(grads, b, len_of(b), |gb| {
                        for (acc, chunk) in gb.iter_mut().zip(g.chunks(plane)) {
                            *acc += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            &Op::RowBias { x, b, cols } => {
                if needs(x) {
                    accumulate(grads, x, g.len(), |gx| add_into(gx, g));
                }
                if needs(b) {
                    accumulate(grads, b, cols, |gb| {
                        for row in g.chunks(cols) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            &Op::Softmax { x, cols } => {
                if needs(x) {
                    let y = node.value.data();
                    accumulate(grads, x, g.len(), |gx| {
                        for ((gxr, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((a, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                                *a += yv * (gv - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                if needs(*gamma) {
                    accumulate(grads, *gamma, cols, |gg| {
                        for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((a, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                                *a += gv * xv;
                            }
                        }
                    });
                }
                if needs(*beta) {
                    accumulate(grads, *beta, cols, |gb| {
                        for gr in g.chunks(cols) {
                            add_into(gb, gr);
                        }
                    });
                }
                if needs(*x) {
                    let gam = self.data(*gamma);
                    accumulate(grads, *x, g.len(), |gx| {
                        let n = cols as f64;
                        for (r, (gxr, (gr, xr))) in gx
                            .chunks_mut(cols)
                            .zip(g.chunks(cols).zip(xhat.chunks(cols)))
                            .enumerate()
                        {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..cols {
                                let d = gr[j] * gam[j];
                                mean_d += d;
                                mean_dx += d * xr[j];
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            for j in 0..cols {
                                let d = gr[j] * gam[j];
                                gxr[j] += inv_std[r] * (d - mean_d - xr[j] * mean_dx);
                            }
                        }
                    });
                }
            }
            &Op::Sum(x) => {
                if needs(x) {
                    accumulate(grads, x, len_of(x), |gx| {
                        for a in gx.iter_mut() {
                            *a += g[0];
                        }
                    });
                }
            }
            &Op::Mean(x) => {
                if needs(x) {
                    let n = len_of(x);
                    accumulate(grads, x, n, |gx| {
                        let share = g[0] / n as f64;
                        for a in gx.iter_mut() {
                            *a += share;
                        }
                    });
                }
            }
            &Op::SumRows { x, cols } => {
                if needs(x) {
                    accumulate(grads, x, len_of(x), |gx| {
                        for (row, &gv) in gx.chunks_mut(cols).zip(g) {
                            for a in row {
                                *a += gv;
                            }
                        }
                    });
                }
            }
            &Op::SliceCols { x, start, end, cols } => {
                if needs(x) {
                    let w = end - start;
                    accumulate(grads, x, len_of(x), |gx| {
                        for (row, gr) in gx.chunks_mut(cols).zip(g.chunks(w)) {
                            add_into(&mut row[start..end], gr);
                        }
                    });
                }
            }
            &Op::SliceRows { x, start, cols } => {
                if needs(x) {
                    accumulate(grads, x, len_of(x), |gx| {
                        add_into(&mut gx[start * cols..start * cols + g.len()], g)
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if needs(p) {
                        accumulate(grads, p, len_of(p), |gp| {
                            for (row, gr) in gp.chunks_mut(c).zip(g.chunks(total)) {
                                add_into(row, &gr[offset..offset + c]);
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = len_of(p);
                    if needs(p) {
                        accumulate(grads, p, n, |gp| add_into(gp, &g[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx, cols } => {
                if needs(*x) {
                    let cols = *cols;
                    accumulate(grads, *x, len_of(*x), |gx| {
                        for (gr, &row) in g.chunks(cols).zip(idx) {
                            add_into(&mut gx[row * cols..(row + 1) * cols], gr);
                        }
                    });
                }
            }
            Op::Gather { x, idx } => {
                if needs(*x) {
                    accumulate(grads, *x, len_of(*x), |gx| {
                        for (&i, gv) in idx.iter().zip(g) {
                            gx[i] += gv;
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                k,
            } => {
                if needs(*logits) {
                    let k = *k;
                    let share = g[0] / labels.len() as f64;
                    accumulate(grads, *logits, probs.len(), |gl| {
                        for (r, (gr, pr)) in gl.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                            for (j, (a, p)) in gr.iter_mut().zip(pr).enumerate() {
                                let target = if j == labels[r] { 1.0 } else { 0.0 };
                                *a += share * (p - target);
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Output positions `o` along one axis whose input coordinate `o·stride + offset − pad`
/// falls inside `0..len`.
fn valid_range(offset: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = if len + pad > offset { (len + pad - offset - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        for r in 0..g.kh {
            let (y0, y1) = valid_range(r, g.pad, g.stride, g.h, g.out_h);
            for s in 0..g.kw {
                let (x0, x1) = valid_range(s, g.pad, g.stride, g.w, g.out_w);
                let row = ((c * g.kh + r) * g.kw + s) * p;
                for oy in y0..y1 {
                    let iy = oy * g.stride + r - g.pad;
                    let src = &input[(c * g.h + iy) * g.w..][..g.w];
                    let dst = &mut cols[row + oy * g.out_w..][x0..x1];
                    let ix0 = x0 * g.stride + s - g.pad;
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                    } else {
                        for (k, d) in dst.iter_mut().enumerate() {
                            *d = src[ix0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.c {
        for r in 0..g.kh {
            let (y0, y1) = valid_range(r, g.pad, g.stride, g.h, g.out_h);
            for s in 0..g.kw {
                let (x0, x1) = valid_range(s, g.pad, g.stride, g.w, g.out_w);
                let row = ((c * g.kh + r) * g.kw + s) * p;
                for oy in y0..y1 {
                    let iy = oy * g.stride + r - g.pad;
                    let dst = &mut out[(c * g.h + iy) * g.w..][..g.w];
                    let src = &cols[row + oy * g.out_w..][x0..x1];
                    let ix0 = x0 * g.stride + s - g.pad;
                    for (k, v) in src.iter().enumerate() {
                        dst[ix0 + k * g.stride] += v;
                    }
                }
            }
        }
    }
}
