use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Padding policy for [`Graph::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output length `ceil(L / stride)`; zero padding split with
    /// `pad_left = floor(total / 2)`.
    Same,
    /// No padding; output length `(L - K) / stride + 1`.
    Valid,
}

/// Output length and left padding of a 1-D cross-correlation.
pub fn conv_output_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv1d",
            detail: format!("stride {stride} and kernel {kernel} must be positive"),
        });
    }
    match padding {
        Padding::Valid => {
            if kernel > len {
                return Err(TensorError::Shape {
                    op: "conv1d",
                    axes: "kernel vs length",
                    detail: format!("kernel {kernel} exceeds unpadded length {len}"),
                });
            }
            Ok(((len - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad_left: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu(usize),
    MaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    Reshape(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<T>>,
}

/// Computation tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for the backward sweep.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0].to_f64() * y[0].to_f64();
        acc[1] += x[1].to_f64() * y[1].to_f64();
        acc[2] += x[2].to_f64() * y[2].to_f64();
        acc[3] += x[3].to_f64() * y[3].to_f64();
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x.to_f64() * y.to_f64();
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: f64, x: &[T], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi.to_f64();
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Receptive fields of one sample laid out as rows: `cols[j]` holds
/// `x[c, j*stride + kk - pad]` at `c*k + kk`, zero where that falls in
/// the padding. Row `j` lines up with weight row `w[o, .., ..]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c_in: usize, len: usize, k: usize, stride: usize, pad: usize, l_out: usize, cols: &mut [T]) {
    let width = c_in * k;
    for (j, row) in cols.chunks_exact_mut(width).enumerate().take(l_out) {
        let start = (j * stride) as isize - pad as isize;
        let k_lo = (-start).max(0) as usize;
        let k_hi = ((len as isize - start).min(k as isize)).max(0) as usize;
        for c in 0..c_in {
            let dst = &mut row[c * k..(c + 1) * k];
            if k_lo >= k_hi {
                dst.fill(T::default());
                continue;
            }
            dst[..k_lo].fill(T::default());
            dst[k_hi..].fill(T::default());
            let x0 = (start + k_lo as isize) as usize;
            dst[k_lo..k_hi].copy_from_slice(&x[c * len + x0..c * len + x0 + (k_hi - k_lo)]);
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is kept only when `requires_grad` is set.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_values(), requires_grad, Op::Leaf)
    }

    /// Records a leaf from borrowed data.
    pub fn leaf(&mut self, shape: &[usize], values: &[T], requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.is_empty() {
            return Err(TensorError::Shape {
                op: "leaf",
                axes: "values",
                detail: format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            });
        }
        Ok(self.push(shape.to_vec(), values.to_vec(), requires_grad, Op::Leaf))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        Ok(self.push(shape, value, requires_grad, op))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node, in `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].to_f64()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("graph node shape invariant")
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `out[b,o,j] = bias[o] + sum_{c,k} in[b,c,j*stride+k-pad_left] * w[o,c,k]`
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (b, c_in, len) = match self.shape(input) {
            [b, c, l] => (*b, *c, *l),
            s => {
                return Err(TensorError::Shape {
                    op: "conv1d",
                    axes: "input rank",
                    detail: format!("expected [B, C_in, L], got {s:?}"),
                })
            }
        };
        let (c_out, wc, k) = match self.shape(weight) {
            [o, c, k] => (*o, *c, *k),
            s => {
                return Err(TensorError::Shape {
                    op: "conv1d",
                    axes: "weight rank",
                    detail: format!("expected [C_out, C_in, K], got {s:?}"),
                })
            }
        };
        if wc != c_in {
            return Err(TensorError::Shape {
                op: "conv1d",
                axes: "C_in (input axis 1 vs weight axis 1)",
                detail: format!("input has {c_in} channels, weight expects {wc}"),
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(TensorError::Shape {
                op: "conv1d",
                axes: "C_out (bias axis 0 vs weight axis 0)",
                detail: format!("bias {:?}, weight has {c_out} outputs", self.shape(bias)),
            });
        }
        let (l_out, pad) = conv_output_len(len, k, stride, padding)?;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let bv = &self.nodes[bias.0].value;
        let width = c_in * k;
        let mut out = vec![T::default(); b * c_out * l_out];
        let mut cols = vec![T::default(); l_out * width];
        for bi in 0..b {
            im2col(&x[bi * c_in * len..][..c_in * len], c_in, len, k, stride, pad, l_out, &mut cols);
            for o in 0..c_out {
                let wr = &w[o * width..][..width];
                let b0 = bv[o].to_f64();
                let dst = &mut out[(bi * c_out + o) * l_out..][..l_out];
                for (d, col) in dst.iter_mut().zip(cols.chunks_exact(width)) {
                    *d = T::from_f64(b0 + dot(col, wr));
                }
            }
        }
        let rg = self.rg(&[input.0, weight.0, bias.0]);
        self.push_checked(
            "conv1d",
            vec![b, c_out, l_out],
            out,
            rg,
            Op::Conv1d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                pad_left: pad,
            },
        )
    }

    /// `out = input · Wᵀ + bias`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, f_in) = match self.shape(input) {
            [b, f] => (*b, *f),
            s => {
                return Err(TensorError::Shape {
                    op: "linear",
                    axes: "input rank",
                    detail: format!("expected [B, F_in], got {s:?}"),
                })
            }
        };
        let (f_out, wf) = match self.shape(weight) {
            [o, i] => (*o, *i),
            s => {
                return Err(TensorError::Shape {
                    op: "linear",
                    axes: "weight rank",
                    detail: format!("expected [F_out, F_in], got {s:?}"),
                })
            }
        };
        if wf != f_in {
            return Err(TensorError::Shape {
                op: "linear",
                axes: "F_in (input axis 1 vs weight axis 1)",
                detail: format!("input has {f_in} features, weight expects {wf}"),
            });
        }
        if self.shape(bias) != [f_out] {
            return Err(TensorError::Shape {
                op: "linear",
                axes: "F_out (bias axis 0 vs weight axis 0)",
                detail: format!("bias {:?}, weight has {f_out} outputs", self.shape(bias)),
            });
        }
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(b * f_out);
        for bi in 0..b {
            let xr = &x[bi * f_in..][..f_in];
            for o in 0..f_out {
                let v = bv[o].to_f64() + dot(xr, &w[o * f_in..][..f_in]);
                out.push(T::from_f64(v));
            }
        }
        let rg = self.rg(&[input.0, weight.0, bias.0]);
        self.push_checked(
            "linear",
            vec![b, f_out],
            out,
            rg,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let zero = T::default();
        let out = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| if v > zero { v } else { zero })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.rg(&[input.0]);
        self.push(shape, out, rg, Op::Relu(input.0))
    }

    /// Non-overlapping max pooling over the last axis of `[B, C, L]`.
    /// A ragged tail is padded with −∞ (`pad_left = floor(total / 2)`).
    pub fn max_pool1d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (b, c, len) = match self.shape(input) {
            [b, c, l] => (*b, *c, *l),
            s => {
                return Err(TensorError::Shape {
                    op: "max_pool1d",
                    axes: "input rank",
                    detail: format!("expected [B, C, L], got {s:?}"),
                })
            }
        };
        if window == 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool1d",
                detail: "window must be positive".into(),
            });
        }
        let l_out = len.div_ceil(window);
        let pad = (l_out * window - len) / 2;
        let x = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(b * c * l_out);
        let mut argmax = Vec::with_capacity(b * c * l_out);
        for row in x.chunks_exact(len) {
            for j in 0..l_out {
                let lo = (j * window).saturating_sub(pad);
                let hi = ((j + 1) * window - pad).min(len);
                let mut best = lo;
                for p in lo + 1..hi {
                    if row[p] > row[best] {
                        best = p;
                    }
                }
                out.push(row[best]);
                argmax.push(best as u32);
            }
        }
        let rg = self.rg(&[input.0]);
        Ok(self.push(
            vec![b, c, l_out],
            out,
            rg,
            Op::MaxPool {
                input: input.0,
                argmax,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[input.0].value.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                axes: "element count",
                detail: format!("{:?} cannot become {shape:?}", self.shape(input)),
            });
        }
        let value = self.nodes[input.0].value.clone();
        let rg = self.rg(&[input.0]);
        Ok(self.push(shape, value, rg, Op::Reshape(input.0)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, classes) = match self.shape(logits) {
            [b, c] => (*b, *c),
            s => {
                return Err(TensorError::Shape {
                    op: "softmax_cross_entropy",
                    axes: "logits rank",
                    detail: format!("expected [B, C], got {s:?}"),
                })
            }
        };
        if labels.len() != b {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                axes: "B (logits axis 0 vs labels)",
                detail: format!("{b} rows, {} labels", labels.len()),
            });
        }
        if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(TensorError::LabelOutOfRange {
                label,
                position,
                classes,
            });
        }
        let z = &self.nodes[logits.0].value;
        let mut probs = Vec::with_capacity(b * classes);
        let mut total = 0.0;
        for (row, &label) in z.chunks_exact(classes).zip(labels) {
            let (lse, p) = log_softmax_row(row);
            total += lse - row[label].to_f64();
            probs.extend(p);
        }
        let loss = total / b as f64;
        let rg = self.rg(&[logits.0]);
        self.push_checked(
            "softmax_cross_entropy",
            vec![1],
            vec![T::from_f64(loss)],
            rg,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean of squared differences over every entry.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "mse",
                axes: "all",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut sum = 0.0;
        for (x, y) in va.iter().zip(vb) {
            let d = x.to_f64() - y.to_f64();
            sum += d * d;
        }
        let loss = sum / va.len() as f64;
        let rg = self.rg(&[a.0, b.0]);
        self.push_checked("mse", vec![1], vec![T::from_f64(loss)], rg, Op::Mse(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "add",
                axes: "all",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        self.push_checked("add", shape, out, rg, Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|x| T::from_f64(x.to_f64() * factor))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push_checked("scale", shape, out, rg, Op::Scale(a.0, factor))
    }

    /// Reverse sweep from a scalar loss. Gradients of leaves that require
    /// them are added to whatever the leaf already holds.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&g) {
                            *a = T::from_f64(a.to_f64() + d);
                        }
                    }
                    None => node.grad = Some(g.iter().map(|&d| T::from_f64(d)).collect()),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                pad_left,
            } => self.conv1d_backward(id, g, grads, *input, *weight, *bias, *stride, *pad_left),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (b, f_in) = (self.nodes[*input].shape[0], self.nodes[*input].shape[1]);
                let f_out = node.shape[1];
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                if self.nodes[*bias].requires_grad {
                    let gb = grad_slot(grads, *bias, f_out);
                    for row in g.chunks_exact(f_out) {
                        for (a, d) in gb.iter_mut().zip(row) {
                            *a += d;
                        }
                    }
                }
                if self.nodes[*weight].requires_grad {
                    let gw = grad_slot(grads, *weight, f_out * f_in);
                    for bi in 0..b {
                        let xr = &x[bi * f_in..][..f_in];
                        for o in 0..f_out {
                            let go = g[bi * f_out + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut gw[o * f_in..][..f_in]);
                            }
                        }
                    }
                }
                if self.nodes[*input].requires_grad {
                    let gx = grad_slot(grads, *input, b * f_in);
                    for bi in 0..b {
                        for o in 0..f_out {
                            let go = g[bi * f_out + o];
                            if go != 0.0 {
                                axpy(go, &w[o * f_in..][..f_in], &mut gx[bi * f_in..][..f_in]);
                            }
                        }
                    }
                }
            }
            Op::Relu(input) => {
                if self.nodes[*input].requires_grad {
                    let x = &self.nodes[*input].value;
                    let gx = grad_slot(grads, *input, x.len());
                    let zero = T::default();
                    for ((a, &d), &xv) in gx.iter_mut().zip(g).zip(x) {
                        if xv > zero {
                            *a += d;
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.nodes[*input].requires_grad {
                    let len = self.nodes[*input].shape[2];
                    let l_out = node.shape[2];
                    let gx = grad_slot(grads, *input, self.nodes[*input].value.len());
                    for (row, (gr, am)) in g.chunks_exact(l_out).zip(argmax.chunks_exact(l_out)).enumerate() {
                        for (&d, &p) in gr.iter().zip(am) {
                            gx[row * len + p as usize] += d;
                        }
                    }
                }
            }
            Op::Reshape(input) => {
                if self.nodes[*input].requires_grad {
                    let gx = grad_slot(grads, *input, g.len());
                    for (a, d) in gx.iter_mut().zip(g) {
                        *a += d;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.nodes[*logits].requires_grad {
                    let classes = self.nodes[*logits].shape[1];
                    let scale = g[0] / labels.len() as f64;
                    let gz = grad_slot(grads, *logits, probs.len());
                    for (bi, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gz[bi * classes + c] += (probs[bi * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let scale = 2.0 * g[0] / va.len() as f64;
                if self.nodes[*a].requires_grad {
                    let ga = grad_slot(grads, *a, va.len());
                    for ((acc, x), y) in ga.iter_mut().zip(va).zip(vb) {
                        *acc += scale * (x.to_f64() - y.to_f64());
                    }
                }
                if self.nodes[*b].requires_grad {
                    let gb = grad_slot(grads, *b, vb.len());
                    for ((acc, x), y) in gb.iter_mut().zip(va).zip(vb) {
                        *acc -= scale * (x.to_f64() - y.to_f64());
                    }
                }
            }
            Op::Add(a, b) => {
                for &src in &[*a, *b] {
                    if self.nodes[src].requires_grad {
                        let gs = grad_slot(grads, src, g.len());
                        for (acc, d) in gs.iter_mut().zip(g) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.nodes[*a].requires_grad {
                    let ga = grad_slot(grads, *a, g.len());
                    for (acc, d) in ga.iter_mut().zip(g) {
                        *acc += d * factor;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    ) {
        let (b, c_in, len) = {
            let s = &self.nodes[input].shape;
            (s[0], s[1], s[2])
        };
        let k = self.nodes[weight].shape[2];
        let c_out = self.nodes[id].shape[1];
        let l_out = self.nodes[id].shape[2];
        let x = &self.nodes[input].value;
        let w = &self.nodes[weight].value;

        if self.nodes[bias].requires_grad {
            let gb = grad_slot(grads, bias, c_out);
            for bi in 0..b {
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += g[(bi * c_out + o) * l_out..][..l_out].iter().sum::<f64>();
                }
            }
        }
        let need_w = self.nodes[weight].requires_grad;
        let need_x = self.nodes[input].requires_grad;
        let mut gw = need_w.then(|| grads[weight].take().unwrap_or_else(|| vec![0.0; w.len()]));
        let mut gx = need_x.then(|| grads[input].take().unwrap_or_else(|| vec![0.0; x.len()]));

        let width = c_in * k;
        let mut cols = vec![T::default(); l_out * width];
        let mut gcols = vec![0.0f64; if need_x { l_out * width } else { 0 }];
        for bi in 0..b {
            let xs = &x[bi * c_in * len..][..c_in * len];
            if let Some(gw) = gw.as_mut() {
                im2col(xs, c_in, len, k, stride, pad, l_out, &mut cols);
                for o in 0..c_out {
                    let gr = &g[(bi * c_out + o) * l_out..][..l_out];
                    let gwr = &mut gw[o * width..][..width];
                    for (&go, col) in gr.iter().zip(cols.chunks_exact(width)) {
                        if go != 0.0 {
                            axpy(go, col, gwr);
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                gcols.fill(0.0);
                for o in 0..c_out {
                    let gr = &g[(bi * c_out + o) * l_out..][..l_out];
                    let wr = &w[o * width..][..width];
                    for (&go, gcol) in gr.iter().zip(gcols.chunks_exact_mut(width)) {
                        if go != 0.0 {
                            axpy(go, wr, gcol);
                        }
                    }
                }
                // scatter the column gradients back onto input positions
                let gxs = &mut gx[bi * c_in * len..][..c_in * len];
                for (j, gcol) in gcols.chunks_exact(width).enumerate() {
                    let start = (j * stride) as isize - pad as isize;
                    let k_lo = (-start).max(0) as usize;
                    let k_hi = ((len as isize - start).min(k as isize)).max(0) as usize;
                    if k_lo >= k_hi {
                        continue;
                    }
                    let x0 = (start + k_lo as isize) as usize;
                    for c in 0..c_in {
                        let src = &gcol[c * k + k_lo..c * k + k_hi];
                        for (a, d) in gxs[c * len + x0..].iter_mut().zip(src) {
                            *a += d;
                        }
                    }
                }
            }
        }
        if let Some(gw) = gw {
            grads[weight] = Some(gw);
        }
        if let Some(gx) = gx {
            grads[input] = Some(gx);
        }
    }
}

/// Output positions `j` whose tap `kk` lands inside `[0, len)`.
#[inline]
fn log_softmax_row<T: Scalar>(row: &[T]) -> (f64, Vec<f64>) {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax, max-subtracted.
pub(crate) fn softmax_rows<T: Scalar>(values: &[T], classes: usize) -> Vec<f64> {
    values
        .chunks_exact(classes)
        .flat_map(|row| log_softmax_row(row).1)
        .collect()
}
