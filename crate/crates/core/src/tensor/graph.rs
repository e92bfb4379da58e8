use super::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LOG_CLAMP: f32 = 1e-7;
const DICE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    UpsampleBilinear {
        input: Var,
        factor: usize,
    },
    AvgPool2 {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    ConcatChannels {
        lhs: Var,
        rhs: Var,
    },
    BroadcastChannels {
        input: Var,
    },
    /// Binary cross-entropy against a constant target, optionally restricted
    /// to pixels where `valid` is nonzero. Targets are plain data, so no
    /// gradient can flow into them.
    Bce {
        pred: Var,
        target: Tensor,
        valid: Option<Tensor>,
    },
    /// Dice loss against a constant target.
    Dice {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order (inputs always precede outputs) and
/// replays the chain rule in reverse. One graph serves one forward/backward
/// pass; drop it and start fresh for the next step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite values entered the graph");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- forward operations ----

    /// 2-D cross-correlation. `input` is `[C_in, H, W]`, `weight` is
    /// `[C_out, C_in, k, k]` with odd `k`, `bias` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        let rg = self.any_requires(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Fully connected layer: `input` `[D_in]`, `weight` `[D_out, D_in]`,
    /// `bias` `[D_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_requires(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Bilinear upsampling by an integer factor, align-corners = false.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::InvalidArgument(
                "upsample factor must be >= 1".into(),
            ));
        }
        let value = upsample_forward(self.value(input), factor)?;
        let rg = self.any_requires(&[input]);
        Ok(self.push(value, rg, Op::UpsampleBilinear { input, factor }))
    }

    /// Halves both spatial sides of a `[C,H,W]` tensor by averaging each
    /// 2x2 block; sides must be even. This is the downsampling primitive of
    /// the encoders (a stride-2 odd-kernel conv cannot meet the exact
    /// output-size contract on even inputs).
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let value = avg_pool2_forward(self.value(input))?;
        let rg = self.any_requires(&[input]);
        Ok(self.push(value, rg, Op::AvgPool2 { input }))
    }

    /// Elementwise addition; one side may be a scalar (1-element tensor).
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(lhs), self.value(rhs), "add", |a, b| a + b)?;
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Add { lhs, rhs }))
    }

    /// Elementwise multiplication; one side may be a scalar.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(lhs), self.value(rhs), "mul", |a, b| a * b)?;
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Mul { lhs, rhs }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input);
        let data = value.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(value.shape().to_vec(), data).expect("relu shape");
        let rg = self.any_requires(&[input]);
        self.push(out, rg, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input);
        let data = value.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let out = Tensor::new(value.shape().to_vec(), data).expect("sigmoid shape");
        let rg = self.any_requires(&[input]);
        self.push(out, rg, Op::Sigmoid { input })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&x| x as f64).sum();
        let rg = self.any_requires(&[input]);
        self.push(Tensor::scalar(total as f32), rg, Op::Sum { input })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let total: f64 = v.data().iter().map(|&x| x as f64).sum();
        let mean = total / v.numel() as f64;
        let rg = self.any_requires(&[input]);
        self.push(Tensor::scalar(mean as f32), rg, Op::Mean { input })
    }

    /// Concatenates two `[C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(TensorError::Shape(format!(
                "concat_channels expects [C,H,W] with equal spatial dims, got {sa:?} and {sb:?}"
            )));
        }
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let out = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data)?;
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(out, rg, Op::ConcatChannels { lhs, rhs }))
    }

    /// Expands a `[C]` vector to `[C, h, w]` by repeating each value over the
    /// spatial plane. Gradient sums the plane back per channel.
    pub fn broadcast_channels(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let v = self.value(input);
        if v.shape().len() != 1 {
            return Err(TensorError::Shape(format!(
                "broadcast_channels expects rank-1 input, got {:?}",
                v.shape()
            )));
        }
        let c = v.shape()[0];
        let mut data = Vec::with_capacity(c * h * w);
        for &x in v.data() {
            data.extend(std::iter::repeat(x).take(h * w));
        }
        let out = Tensor::new(vec![c, h, w], data)?;
        let rg = self.any_requires(&[input]);
        Ok(self.push(out, rg, Op::BroadcastChannels { input }))
    }

    /// Pixelwise binary cross-entropy averaged over pixels (or over the
    /// pixels marked valid). Probabilities are clamped to
    /// `[1e-7, 1 - 1e-7]` before the logs. Zero valid pixels yields loss 0.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor, valid: Option<&Tensor>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::Shape(format!(
                "bce shapes differ: pred {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        if let Some(v) = valid {
            if v.shape() != p.shape() {
                return Err(TensorError::Shape(format!(
                    "bce valid mask shape {:?} does not match pred {:?}",
                    v.shape(),
                    p.shape()
                )));
            }
        }
        let ones;
        let vmask = match valid {
            Some(v) => v.data(),
            None => {
                ones = vec![1.0f32; p.numel()];
                &ones
            }
        };
        let mut acc = 0.0f64;
        let mut count = 0.0f64;
        for ((&pi, &yi), &vi) in p.data().iter().zip(target.data()).zip(vmask) {
            if vi == 0.0 {
                continue;
            }
            let pc = pi.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP) as f64;
            let y = yi as f64;
            acc += vi as f64 * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            count += vi as f64;
        }
        let loss = if count > 0.0 {
            (-acc / count) as f32
        } else {
            0.0
        };
        let rg = self.any_requires(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Bce {
                pred,
                target: target.clone(),
                valid: valid.cloned(),
            },
        ))
    }

    /// Dice loss `1 - 2*sum(p*y) / (sum(p) + sum(y) + 1e-7)`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::Shape(format!(
                "dice shapes differ: pred {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut ysum = 0.0f64;
        for (&pi, &yi) in p.data().iter().zip(target.data()) {
            inter += pi as f64 * yi as f64;
            psum += pi as f64;
            ysum += yi as f64;
        }
        let loss = 1.0 - 2.0 * inter / (psum + ysum + DICE_EPS);
        let rg = self.any_requires(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            rg,
            Op::Dice {
                pred,
                target: target.clone(),
            },
        ))
    }

    // ---- backward ----

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Leaves created with `requires_grad = false` and nodes not on a path to
    /// the loss keep `grad = None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::InvalidArgument(
                "backward on an empty graph".into(),
            ));
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            let out_grad = node.grad.as_ref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => conv2d_backward(
                    before, *input, *weight, *bias, *stride, *padding, out_grad,
                ),
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => linear_backward(before, *input, *weight, *bias, out_grad),
                Op::UpsampleBilinear { input, factor } => {
                    upsample_backward(before, *input, *factor, out_grad)
                }
                Op::AvgPool2 { input } => avg_pool2_backward(before, *input, out_grad),
                Op::Add { lhs, rhs } => {
                    for side in [*lhs, *rhs] {
                        if before[side.0].requires_grad {
                            accumulate_broadcast(&mut before[side.0], out_grad, None);
                        }
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let (l, r) = (*lhs, *rhs);
                    if before[l.0].requires_grad {
                        let other = before[r.0].value.data().to_vec();
                        accumulate_broadcast(&mut before[l.0], out_grad, Some(&other));
                    }
                    if before[r.0].requires_grad {
                        let other = before[l.0].value.data().to_vec();
                        accumulate_broadcast(&mut before[r.0], out_grad, Some(&other));
                    }
                }
                Op::Relu { input } => {
                    let src = &mut before[input.0];
                    if src.requires_grad {
                        let mask: Vec<f32> = src
                            .value
                            .data()
                            .iter()
                            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                            .collect();
                        let g = ensure_grad(src);
                        for i in 0..g.len() {
                            g[i] += out_grad[i] * mask[i];
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data().to_vec();
                    let src = &mut before[input.0];
                    if src.requires_grad {
                        let g = ensure_grad(src);
                        for i in 0..g.len() {
                            g[i] += out_grad[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
                Op::Sum { input } => {
                    let go = out_grad[0];
                    let src = &mut before[input.0];
                    if src.requires_grad {
                        let g = ensure_grad(src);
                        g.iter_mut().for_each(|gi| *gi += go);
                    }
                }
                Op::Mean { input } => {
                    let src = &mut before[input.0];
                    if src.requires_grad {
                        let scale = out_grad[0] / src.value.numel() as f32;
                        let g = ensure_grad(src);
                        g.iter_mut().for_each(|gi| *gi += scale);
                    }
                }
                Op::ConcatChannels { lhs, rhs } => {
                    let (l, r) = (*lhs, *rhs);
                    let n_l = before[l.0].value.numel();
                    if before[l.0].requires_grad {
                        let g = ensure_grad(&mut before[l.0]);
                        for i in 0..n_l {
                            g[i] += out_grad[i];
                        }
                    }
                    if before[r.0].requires_grad {
                        let g = ensure_grad(&mut before[r.0]);
                        for (i, gi) in g.iter_mut().enumerate() {
                            *gi += out_grad[n_l + i];
                        }
                    }
                }
                Op::BroadcastChannels { input } => {
                    let plane = node.value.numel() / node.value.shape()[0];
                    let src = &mut before[input.0];
                    if src.requires_grad {
                        let g = ensure_grad(src);
                        for (c, gc) in g.iter_mut().enumerate() {
                            let base = c * plane;
                            let mut acc = 0.0f64;
                            for &go in &out_grad[base..base + plane] {
                                acc += go as f64;
                            }
                            *gc += acc as f32;
                        }
                    }
                }
                Op::Bce {
                    pred,
                    target,
                    valid,
                } => {
                    let go = out_grad[0];
                    let target = target.clone();
                    let valid = valid.clone();
                    let src = &mut before[pred.0];
                    if src.requires_grad {
                        let pvals = src.value.data().to_vec();
                        let count: f64 = match &valid {
                            Some(v) => v.data().iter().map(|&x| x as f64).sum(),
                            None => pvals.len() as f64,
                        };
                        if count > 0.0 {
                            let g = ensure_grad(src);
                            for i in 0..g.len() {
                                let vi = valid.as_ref().map_or(1.0, |v| v.data()[i]);
                                if vi == 0.0 {
                                    continue;
                                }
                                let pi = pvals[i];
                                // Clamp saturates: no gradient outside the
                                // clamp range.
                                if pi < LOG_CLAMP || pi > 1.0 - LOG_CLAMP {
                                    continue;
                                }
                                let y = target.data()[i] as f64;
                                let p = pi as f64;
                                let d = -(vi as f64) * (y / p - (1.0 - y) / (1.0 - p)) / count;
                                g[i] += go * d as f32;
                            }
                        }
                    }
                }
                Op::Dice { pred, target } => {
                    let go = out_grad[0];
                    let target = target.clone();
                    let src = &mut before[pred.0];
                    if src.requires_grad {
                        let pvals = src.value.data().to_vec();
                        let mut inter = 0.0f64;
                        let mut psum = 0.0f64;
                        let mut ysum = 0.0f64;
                        for (&pi, &yi) in pvals.iter().zip(target.data()) {
                            inter += pi as f64 * yi as f64;
                            psum += pi as f64;
                            ysum += yi as f64;
                        }
                        let num = 2.0 * inter;
                        let den = psum + ysum + DICE_EPS;
                        let g = ensure_grad(src);
                        for i in 0..g.len() {
                            let y = target.data()[i] as f64;
                            let d = -(2.0 * y * den - num) / (den * den);
                            g[i] += go * d as f32;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure_grad(node: &mut Node) -> &mut Vec<f32> {
    node.grad
        .get_or_insert_with(|| vec![0.0; node.value.numel()])
}

/// Gradient accumulation for add/mul where one side may be scalar.
/// `factor` carries the other operand's values for mul, None for add.
fn accumulate_broadcast(node: &mut Node, out_grad: &[f32], factor: Option<&[f32]>) {
    let n = node.value.numel();
    let g = ensure_grad(node);
    if n == out_grad.len() {
        match factor {
            None => {
                for i in 0..n {
                    g[i] += out_grad[i];
                }
            }
            Some(f) if f.len() == n => {
                for i in 0..n {
                    g[i] += out_grad[i] * f[i];
                }
            }
            // This side is full-size, the other operand is scalar.
            Some(f) => {
                let s = f[0];
                for i in 0..n {
                    g[i] += out_grad[i] * s;
                }
            }
        }
    } else {
        // This side is the scalar: reduce the output gradient.
        debug_assert_eq!(n, 1);
        let mut acc = 0.0f64;
        match factor {
            None => {
                for &go in out_grad {
                    acc += go as f64;
                }
            }
            Some(f) => {
                for (go, fi) in out_grad.iter().zip(f) {
                    acc += *go as f64 * *fi as f64;
                }
            }
        }
        g[0] += acc as f32;
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.is_scalar() {
        let s = b.data()[0];
        let data = a.data().iter().map(|&x| f(x, s)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if a.is_scalar() {
        let s = a.data()[0];
        let data = b.data().iter().map(|&y| f(s, y)).collect();
        return Tensor::new(b.shape().to_vec(), data);
    }
    Err(TensorError::Shape(format!(
        "{what}: shapes {:?} and {:?} are neither equal nor scalar-vs-tensor",
        a.shape(),
        b.shape()
    )))
}

// ---- conv2d ----

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 3 {
        return Err(TensorError::Shape(format!(
            "conv2d input must be [C,H,W], got {is:?}"
        )));
    }
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(TensorError::Shape(format!(
            "conv2d weight must be [C_out,C_in,k,k], got {ws:?}"
        )));
    }
    let (c_in, h, w) = (is[0], is[1], is[2]);
    let (c_out, k) = (ws[0], ws[2]);
    if ws[1] != c_in {
        return Err(TensorError::Shape(format!(
            "conv2d weight expects {} input channels, input has {}",
            ws[1], c_in
        )));
    }
    if bias.shape() != [c_out] {
        return Err(TensorError::Shape(format!(
            "conv2d bias must be [{}], got {:?}",
            c_out,
            bias.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(TensorError::InvalidArgument(format!(
            "conv2d kernel size must be odd, got {k}"
        )));
    }
    if stride < 1 {
        return Err(TensorError::InvalidArgument("stride must be >= 1".into()));
    }
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
        return Err(TensorError::Shape(format!(
            "conv2d output size not exact: input {h}x{w}, k={k}, stride={stride}, padding={padding}"
        )));
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k,
        h_out: (span_h - k) / stride + 1,
        w_out: (span_w - k) / stride + 1,
    })
}

/// Output-column range `[lo, hi)` for which `ox*stride + kx - padding`
/// stays inside `[0, w)`.
fn col_range(kx: usize, padding: usize, stride: usize, w: usize, w_out: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx + stride - 1) / stride
    };
    let max_ix = w as isize - 1 + padding as isize - kx as isize;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = ((max_ix as usize) / stride + 1).min(w_out);
    (lo.min(hi), hi)
}

/// Dot product in eight fixed accumulator lanes so the loop vectorizes
/// without changing results between runs.
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let av = &a[c * 8..c * 8 + 8];
        let bv = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += av[l] * bv[l];
        }
    }
    let mut s = 0.0f32;
    for l in 0..8 {
        s += acc[l];
    }
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Patch matrix [H_out*W_out, C_in*k*k] for stride-1 convolution: row n
/// holds the receptive field of output pixel n, zero-filled at borders.
/// The channel pyramid is deep while planes are small, so a long
/// contiguous per-pixel row is what keeps the inner loops vector-wide.
fn im2col_t(x: &[f32], d: &ConvDims, padding: usize) -> Vec<f32> {
    let k = d.k;
    let cols = d.c_in * k * k;
    let mut out = vec![0.0f32; d.h_out * d.w_out * cols];
    for oy in 0..d.h_out {
        for ci in 0..d.c_in {
            let in_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..k {
                let iy = (oy + ky) as isize - padding as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let in_row = &in_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                for kx in 0..k {
                    let (lo, hi) = col_range(kx, padding, 1, d.w, d.w_out);
                    if lo >= hi {
                        continue;
                    }
                    let col_idx = (ci * k + ky) * k + kx;
                    let base = lo + kx - padding;
                    let src = &in_row[base..base + (hi - lo)];
                    for (ox, sv) in (lo..hi).zip(src) {
                        out[(oy * d.w_out + ox) * cols + col_idx] = *sv;
                    }
                }
            }
        }
    }
    out
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = conv_dims(input, weight, bias, stride, padding)?;
    let x = input.data();
    let wts = weight.data();
    let mut out = vec![0.0f32; d.c_out * d.h_out * d.w_out];

    if stride == 1 {
        let cols = d.c_in * d.k * d.k;
        let n = d.h_out * d.w_out;
        let colt = im2col_t(x, &d, padding);
        for co in 0..d.c_out {
            let wrow = &wts[co * cols..(co + 1) * cols];
            let b = bias.data()[co];
            let plane = &mut out[co * n..(co + 1) * n];
            for (ov, patch) in plane.iter_mut().zip(colt.chunks_exact(cols)) {
                *ov = b + dot_lanes(wrow, patch);
            }
        }
        return Tensor::new(vec![d.c_out, d.h_out, d.w_out], out);
    }

    for co in 0..d.c_out {
        let plane = &mut out[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out];
        plane.fill(bias.data()[co]);
        for ci in 0..d.c_in {
            let in_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = wts[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = col_range(kx, padding, stride, d.w, d.w_out);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..d.h_out {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let out_row = &mut plane[oy * d.w_out..(oy + 1) * d.w_out];
                        for ox in lo..hi {
                            let ix = ox * stride + kx - padding;
                            out_row[ox] += wv * in_row[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.c_out, d.h_out, d.w_out], out)
}

fn conv2d_backward(
    nodes: &mut [Node],
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    out_grad: &[f32],
) {
    let d = conv_dims(
        &nodes[input.0].value,
        &nodes[weight.0].value,
        &nodes[bias.0].value,
        stride,
        padding,
    )
    .expect("shapes were validated in forward");

    if nodes[bias.0].requires_grad {
        let g = ensure_grad(&mut nodes[bias.0]);
        for co in 0..d.c_out {
            let mut acc = 0.0f64;
            for &go in &out_grad[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out] {
                acc += go as f64;
            }
            g[co] += acc as f32;
        }
    }

    if nodes[weight.0].requires_grad {
        let x = nodes[input.0].value.data().to_vec();
        let g = ensure_grad(&mut nodes[weight.0]);
        if stride == 1 {
            // dW[co] accumulates go[co][n]-weighted patch rows; the row is
            // the long contiguous axis.
            let cols = d.c_in * d.k * d.k;
            let n = d.h_out * d.w_out;
            let colt = im2col_t(&x, &d, padding);
            for co in 0..d.c_out {
                let go_plane = &out_grad[co * n..(co + 1) * n];
                let gw = &mut g[co * cols..(co + 1) * cols];
                for (&gv, patch) in go_plane.iter().zip(colt.chunks_exact(cols)) {
                    if gv == 0.0 {
                        continue;
                    }
                    for (gwv, cv) in gw.iter_mut().zip(patch) {
                        *gwv += gv * cv;
                    }
                }
            }
        } else {
            for co in 0..d.c_out {
                let go_plane = &out_grad[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out];
                for ci in 0..d.c_in {
                    let in_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            let (lo, hi) = col_range(kx, padding, stride, d.w, d.w_out);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = 0.0f32;
                            for oy in 0..d.h_out {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let in_row =
                                    &in_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                                let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                                for ox in lo..hi {
                                    acc += in_row[ox * stride + kx - padding] * go_row[ox];
                                }
                            }
                            g[((co * d.c_in + ci) * d.k + ky) * d.k + kx] += acc;
                        }
                    }
                }
            }
        }
    }

    if nodes[input.0].requires_grad {
        let wts = nodes[weight.0].value.data().to_vec();
        let g = ensure_grad(&mut nodes[input.0]);
        if stride == 1 {
            // Patch-space gradient first (dcol[n] = sum_co go[co][n] * W[co]),
            // then the scatter-add transpose of im2col_t.
            let k = d.k;
            let cols = d.c_in * k * k;
            let n = d.h_out * d.w_out;
            let mut dcolt = vec![0.0f32; n * cols];
            for co in 0..d.c_out {
                let go_plane = &out_grad[co * n..(co + 1) * n];
                let wrow = &wts[co * cols..(co + 1) * cols];
                for (&gv, dpatch) in go_plane.iter().zip(dcolt.chunks_exact_mut(cols)) {
                    if gv == 0.0 {
                        continue;
                    }
                    for (dv, wv) in dpatch.iter_mut().zip(wrow) {
                        *dv += gv * wv;
                    }
                }
            }
            for oy in 0..d.h_out {
                for ci in 0..d.c_in {
                    let g_plane = &mut g[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let g_row = &mut g_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for kx in 0..k {
                            let (lo, hi) = col_range(kx, padding, 1, d.w, d.w_out);
                            if lo >= hi {
                                continue;
                            }
                            let col_idx = (ci * k + ky) * k + kx;
                            let base = lo + kx - padding;
                            for ox in lo..hi {
                                g_row[base + ox - lo] += dcolt[(oy * d.w_out + ox) * cols + col_idx];
                            }
                        }
                    }
                }
            }
        } else {
            for co in 0..d.c_out {
                let go_plane = &out_grad[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out];
                for ci in 0..d.c_in {
                    let g_plane = &mut g[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            let wv = wts[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = col_range(kx, padding, stride, d.w, d.w_out);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..d.h_out {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let g_row =
                                    &mut g_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                                let go_row = &go_plane[oy * d.w_out..(oy + 1) * d.w_out];
                                for ox in lo..hi {
                                    g_row[ox * stride + kx - padding] += wv * go_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---- linear ----

fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 1 || ws.len() != 2 || ws[1] != is[0] || bias.shape() != [ws[0]] {
        return Err(TensorError::Shape(format!(
            "linear expects input [D_in], weight [D_out,D_in], bias [D_out]; got {:?}, {:?}, {:?}",
            is,
            ws,
            bias.shape()
        )));
    }
    let (d_out, d_in) = (ws[0], ws[1]);
    let mut out = vec![0.0f32; d_out];
    for o in 0..d_out {
        let row = &weight.data()[o * d_in..(o + 1) * d_in];
        let mut acc = 0.0f64;
        for (wv, xv) in row.iter().zip(input.data()) {
            acc += *wv as f64 * *xv as f64;
        }
        out[o] = (acc + bias.data()[o] as f64) as f32;
    }
    Tensor::new(vec![d_out], out)
}

fn linear_backward(nodes: &mut [Node], input: Var, weight: Var, bias: Var, out_grad: &[f32]) {
    let d_in = nodes[input.0].value.numel();
    let d_out = out_grad.len();

    if nodes[bias.0].requires_grad {
        let g = ensure_grad(&mut nodes[bias.0]);
        for o in 0..d_out {
            g[o] += out_grad[o];
        }
    }
    if nodes[weight.0].requires_grad {
        let x = nodes[input.0].value.data().to_vec();
        let g = ensure_grad(&mut nodes[weight.0]);
        for o in 0..d_out {
            let go = out_grad[o];
            let row = &mut g[o * d_in..(o + 1) * d_in];
            for (gv, xv) in row.iter_mut().zip(&x) {
                *gv += go * xv;
            }
        }
    }
    if nodes[input.0].requires_grad {
        let w = nodes[weight.0].value.data().to_vec();
        let g = ensure_grad(&mut nodes[input.0]);
        for o in 0..d_out {
            let go = out_grad[o];
            let row = &w[o * d_in..(o + 1) * d_in];
            for (gv, wv) in g.iter_mut().zip(row) {
                *gv += go * wv;
            }
        }
    }
}

// ---- bilinear upsampling ----

/// Source taps for one output axis position under align-corners = false.
fn bilinear_axis_taps(out_len: usize, factor: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) / factor as f32 - 0.5).clamp(0.0, in_len as f32 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

fn upsample_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let is = input.shape();
    if is.len() != 3 {
        return Err(TensorError::Shape(format!(
            "upsample expects [C,h,w], got {is:?}"
        )));
    }
    let (c, h, w) = (is[0], is[1], is[2]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_axis_taps(oh, factor, h);
    let tx = bilinear_axis_taps(ow, factor, w);
    let x = input.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        let in_plane = &x[ci * h * w..(ci + 1) * h * w];
        let out_plane = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &in_plane[y0 * w..y0 * w + w];
            let r1 = &in_plane[y1 * w..y1 * w + w];
            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
                let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
                out_row[ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn upsample_backward(nodes: &mut [Node], input: Var, factor: usize, out_grad: &[f32]) {
    let src = &mut nodes[input.0];
    if !src.requires_grad {
        return;
    }
    let is = src.value.shape().to_vec();
    let (c, h, w) = (is[0], is[1], is[2]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_axis_taps(oh, factor, h);
    let tx = bilinear_axis_taps(ow, factor, w);
    let g = ensure_grad(src);
    for ci in 0..c {
        let g_plane = &mut g[ci * h * w..(ci + 1) * h * w];
        let go_plane = &out_grad[ci * oh * ow..(ci + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let go_row = &go_plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let go = go_row[ox];
                g_plane[y0 * w + x0] += go * (1.0 - wy) * (1.0 - wx);
                g_plane[y0 * w + x1] += go * (1.0 - wy) * wx;
                g_plane[y1 * w + x0] += go * wy * (1.0 - wx);
                g_plane[y1 * w + x1] += go * wy * wx;
            }
        }
    }
}

fn avg_pool2_forward(input: &Tensor) -> Result<Tensor> {
    let is = input.shape();
    if is.len() != 3 || is[1] % 2 != 0 || is[2] % 2 != 0 || is[1] == 0 || is[2] == 0 {
        return Err(TensorError::Shape(format!(
            "avg_pool2 needs [C,H,W] with even nonzero sides, got {is:?}"
        )));
    }
    let (c, h, w) = (is[0], is[1], is[2]);
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut data = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let out_plane = &mut data[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out_plane[oy * ow + ox] =
                    0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], data)
}

fn avg_pool2_backward(nodes: &mut [Node], input: Var, out_grad: &[f32]) {
    let src = &mut nodes[input.0];
    if !src.requires_grad {
        return;
    }
    let is = src.value.shape().to_vec();
    let (c, h, w) = (is[0], is[1], is[2]);
    let (oh, ow) = (h / 2, w / 2);
    let g = ensure_grad(src);
    for ci in 0..c {
        let g_plane = &mut g[ci * h * w..(ci + 1) * h * w];
        let go_plane = &out_grad[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let go = 0.25 * go_plane[oy * ow + ox];
                g_plane[2 * oy * w + 2 * ox] += go;
                g_plane[2 * oy * w + 2 * ox + 1] += go;
                g_plane[(2 * oy + 1) * w + 2 * ox] += go;
                g_plane[(2 * oy + 1) * w + 2 * ox + 1] += go;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn avg_pool2_forward_matches_block_means() {
        let mut g = Graph::new();
        let x = g.leaf(
            t(&[1, 2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]),
            false,
        );
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(y).shape(), [1, 1, 2]);
        assert_eq!(g.value(y).data(), [2.5, 4.5]);
    }

    #[test]
    fn avg_pool2_rejects_odd_sides() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 4]), false);
        assert!(g.avg_pool2(x).is_err());
    }

    #[test]
    fn avg_pool2_backward_spreads_quarter_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2], 1.0), true);
        let y = g.avg_pool2(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), [0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn conv2d_scaling_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 3, 3], 1.0), false);
        let w = g.leaf(t(&[1, 1, 1, 1], &[2.0]), false);
        let b = g.leaf(t(&[1], &[0.0]), false);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..9).map(|i| i as f32).collect();
        let x = g.leaf(t(&[1, 3, 3], &data), false);
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let w = g.leaf(t(&[1, 1, 3, 3], &kernel), false);
        let b = g.leaf(t(&[1], &[0.0]), false);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(&[3, 1, 3, 3]), false); // wrong c_in
        let b = g.leaf(Tensor::zeros(&[3]), false);
        assert!(g.conv2d(x, w, b, 1, 1).is_err());

        let w_even = g.leaf(Tensor::zeros(&[3, 2, 2, 2]), false);
        let b3 = g.leaf(Tensor::zeros(&[3]), false);
        assert!(g.conv2d(x, w_even, b3, 1, 0).is_err());

        // (4 + 0 - 3) % 2 != 0: output size not exact
        let w_ok = g.leaf(Tensor::zeros(&[3, 2, 3, 3]), false);
        assert!(g.conv2d(x, w_ok, b3, 2, 0).is_err());
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25).collect();
        let x = g.leaf(t(&[1, 3, 4], &data), false);
        let y = g.upsample_bilinear(x, 1).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn upsample_constant_field() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1], &[5.0]), false);
        let y = g.upsample_bilinear(x, 4).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_rejects_zero_factor() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 2]), false);
        assert!(g.upsample_bilinear(x, 0).is_err());
    }

    #[test]
    fn pointwise_basics() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.0, -1.0, 2.0]), false);
        let s = g.sigmoid(x);
        assert!((g.value(s).data()[0] - 0.5).abs() < 1e-7);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let m = g.mean(x);
        assert!((g.value(m).item().unwrap() - (1.0 / 3.0)).abs() < 1e-6);
        let four = g.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), false);
        let m4 = g.mean(four);
        assert_eq!(g.value(m4).item().unwrap(), 2.5);
    }

    #[test]
    fn add_mul_broadcast_rules() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let s = g.leaf(Tensor::scalar(10.0), false);
        let y = g.add(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 12.0, 13.0, 14.0]);
        let z = g.mul(s, x).unwrap();
        assert_eq!(g.value(z).data(), &[10.0, 20.0, 30.0, 40.0]);

        let bad = g.leaf(Tensor::zeros(&[3]), false);
        assert!(g.add(x, bad).is_err());
        assert!(g.mul(x, bad).is_err());
    }

    #[test]
    fn mean_backward_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[5], 3.0), true);
        let loss = g.mean(x);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert!(grad.iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn quadratic_backward() {
        // loss = sum(x*x), x = [1, -2] -> grad = [2, -4]
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unreachable_grads_stay_absent() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let unused = g.leaf(Tensor::full(&[2], 1.0), true);
        let frozen = g.leaf(Tensor::full(&[2], 1.0), false);
        let y = g.add(x, frozen).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(unused).is_none());
        assert!(g.grad(frozen).is_none());
    }

    #[test]
    fn backward_linearity_in_scale() {
        // grad of a*f(x) equals a * grad of f(x)
        let run = |a: f32| {
            let mut g = Graph::new();
            let x = g.leaf(t(&[3], &[0.4, -0.7, 1.3]), true);
            let s = g.sigmoid(x);
            let f = g.sum(s);
            let c = g.constant(Tensor::scalar(a));
            let loss = g.mul(f, c).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let g1 = run(1.0);
        let g3 = run(3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_and_split_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 2, 2], 1.0), true);
        let b = g.leaf(Tensor::full(&[2, 2, 2], 2.0), true);
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2, 2]);
        let two = g.constant(Tensor::scalar(2.0));
        let scaled = g.mul(c, two).unwrap();
        let loss = g.sum(scaled);
        g.backward(loss).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 2.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn broadcast_channels_roundtrip() {
        let mut g = Graph::new();
        let v = g.leaf(t(&[2], &[1.5, -0.5]), true);
        let b = g.broadcast_channels(v, 2, 3).unwrap();
        assert_eq!(g.value(b).shape(), &[2, 2, 3]);
        assert!(g.value(b).data()[..6].iter().all(|&x| x == 1.5));
        let loss = g.sum(b);
        g.backward(loss).unwrap();
        // each channel value contributes to 6 output cells
        assert_eq!(g.grad(v).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(t(&[4], &[0.3, -1.2, 0.8, 2.2]), true);
            let s = g.sigmoid(x);
            let r = g.relu(s);
            let loss = g.mean(r);
            g.backward(loss).unwrap();
            (
                g.value(loss).item().unwrap().to_bits(),
                g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
