//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! whose inputs do not require gradients are evaluated but not recorded, so a
//! tape built only from constants costs nothing at backward time.

use super::dense::Tensor;
use super::kernels::{self, ConvGeom, PoolGeom};
use super::scalar::{count, Scalar};
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Relu,
    Abs,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op maps onto the left one.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// Right operand is `[nb, c, 1, 1]` against a left `[n, c, h, w]`.
    PerChannel { nb: usize, c: usize, plane: usize },
}

impl Broadcast {
    #[inline]
    fn rhs_index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::PerChannel { nb, c, plane } => {
                let nc = i / plane;
                if nb == 1 {
                    nc % c
                } else {
                    nc
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    AdaptiveAvgPool {
        input: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    Upsample {
        input: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    PadReplicate {
        input: Var,
        planes: usize,
        from: (usize, usize),
        pad: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Unary {
        input: Var,
        kind: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
        bcast: Broadcast,
    },
    Concat {
        inputs: Vec<Var>,
        batch: usize,
        plane: usize,
        channels: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
}

struct Record {
    out: Var,
    op: Op,
}

/// Recorded forward computation plus per-value gradient buffers.
pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    records: Vec<Record>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self {
            values: Vec::new(),
            requires_grad: Vec::new(),
            grads: Vec::new(),
            records: Vec::new(),
        }
    }
}

impl Tape {
    /// Single-precision tape; use `Tape::<f64>::default()` for double.
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Tape<T> {
    /// Adds a leaf value. Gradients are accumulated for leaves created with
    /// `requires_grad` and for everything computed from them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Number of recorded (differentiable) operations.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Accumulated gradient of `v`; zeros when `v` requires gradients but
    /// nothing has flowed into it yet, `None` when it never requires them.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let shape = self.values[v.0].shape().to_vec();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape mirrors value"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn clear(&mut self) {
        self.values.clear();
        self.requires_grad.clear();
        self.grads.clear();
        self.records.clear();
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn emit(&mut self, value: Tensor<T>, inputs: &[Var], op: Op) -> Var {
        let track = inputs.iter().any(|v| self.requires_grad[v.0]);
        let out = self.push(value, track);
        if track {
            self.records.push(Record { out, op });
        }
        out
    }

    /// Replays the tape in reverse from a one-element `root`, accumulating
    /// into the gradient buffers of every value that requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let numel = self.values[root.0].numel();
        if numel != 1 {
            return Err(Error::shape("backward", "root element count", 1, numel));
        }
        if !self.requires_grad[root.0] {
            return Ok(());
        }
        // intermediate buffers start fresh; only leaves accumulate across calls
        for record in &self.records {
            self.grads[record.out.0] = None;
        }
        accumulate(&mut self.grads, &self.requires_grad, root, vec![T::one()]);
        for record in self.records.iter().rev() {
            let Some(mut grad_out) = self.grads[record.out.0].take() else {
                continue;
            };
            flush_subnormal(&mut grad_out);
            backward_op(
                &record.op,
                record.out,
                &self.values,
                &self.requires_grad,
                &grad_out,
                &mut self.grads,
            );
            self.grads[record.out.0] = Some(grad_out);
        }
        Ok(())
    }

    // ---- convolution and pooling -------------------------------------------

    /// 2-D cross-correlation with zero padding. `kernel` is
    /// `[out_ch, in_ch, kh, kw]`, `bias` is `[out_ch]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = self.value(input).dims4(OP)?;
        let (cout, kcin, kh, kw) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape(OP, "kernel rank", 4, s.len())),
        };
        if kcin != cin {
            return Err(Error::shape(OP, "input channels", kcin, cin));
        }
        if self.value(bias).numel() != cout {
            return Err(Error::shape(OP, "bias length", cout, self.value(bias).numel()));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::invalid(
                OP,
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new([n, cout, geom.oh, geom.ow], data)?;
        Ok(self.emit(
            value,
            &[input, kernel, bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    fn pool_geom(&self, op: &'static str, input: Var, window: usize, stride: usize, padding: usize) -> Result<PoolGeom> {
        let (n, c, h, w) = self.value(input).dims4(op)?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid(op, "window and stride must be positive"));
        }
        if padding >= window {
            return Err(Error::invalid(op, "padding must be smaller than the window"));
        }
        if h + 2 * padding < window || w + 2 * padding < window {
            return Err(Error::invalid(
                op,
                format!("window {window} larger than input {h}x{w}"),
            ));
        }
        Ok(PoolGeom {
            planes: n * c,
            h,
            w,
            window,
            stride,
            pad: padding,
            oh: (h + 2 * padding - window) / stride + 1,
            ow: (w + 2 * padding - window) / stride + 1,
        })
    }

    /// Max pooling. Padded cells never win; gradient goes to the first
    /// maximal element in scan order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.pool_geom("maxpool2d", input, window, stride, padding)?;
        let (n, c, _, _) = self.value(input).dims4("maxpool2d")?;
        let (data, argmax) = kernels::maxpool_forward(self.value(input).data(), &geom);
        let value = Tensor::new([n, c, geom.oh, geom.ow], data)?;
        Ok(self.emit(value, &[input], Op::MaxPool { input, argmax }))
    }

    /// Average pooling over the in-bounds part of each window.
    pub fn avgpool2d(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.pool_geom("avgpool2d", input, window, stride, padding)?;
        let (n, c, _, _) = self.value(input).dims4("avgpool2d")?;
        let data = kernels::avgpool_forward(self.value(input).data(), &geom);
        let value = Tensor::new([n, c, geom.oh, geom.ow], data)?;
        Ok(self.emit(value, &[input], Op::AvgPool { input, geom }))
    }

    pub fn adaptive_avgpool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "adaptive_avgpool2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(OP, "output extent must be positive"));
        }
        if out_h > h || out_w > w {
            return Err(Error::invalid(
                OP,
                format!("output {out_h}x{out_w} larger than input {h}x{w}"),
            ));
        }
        let data = kernels::adaptive_avgpool_forward(self.value(input).data(), n * c, (h, w), (out_h, out_w));
        let value = Tensor::new([n, c, out_h, out_w], data)?;
        Ok(self.emit(
            value,
            &[input],
            Op::AdaptiveAvgPool {
                input,
                planes: n * c,
                from: (h, w),
                to: (out_h, out_w),
            },
        ))
    }

    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        self.adaptive_avgpool2d(input, 1, 1)
    }

    /// Bilinear upsampling with corner alignment.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "upsample_bilinear";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if out_h < h || out_w < w {
            return Err(Error::invalid(
                OP,
                format!("cannot downscale {h}x{w} to {out_h}x{out_w}; use pooling"),
            ));
        }
        let data = kernels::upsample_bilinear_forward(self.value(input).data(), n * c, (h, w), (out_h, out_w));
        let value = Tensor::new([n, c, out_h, out_w], data)?;
        Ok(self.emit(
            value,
            &[input],
            Op::Upsample {
                input,
                planes: n * c,
                from: (h, w),
                to: (out_h, out_w),
            },
        ))
    }

    /// Pads every plane by repeating its border values.
    pub fn pad_replicate(&mut self, input: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("pad_replicate")?;
        let data = kernels::pad_replicate_forward(self.value(input).data(), n * c, (h, w), pad);
        let value = Tensor::new([n, c, h + 2 * pad, w + 2 * pad], data)?;
        Ok(self.emit(
            value,
            &[input],
            Op::PadReplicate {
                input,
                planes: n * c,
                from: (h, w),
                pad,
            },
        ))
    }

    /// Affine map `y = x·Wᵀ + b` on the flattened trailing extents of `input`.
    /// `weight` is `[out, in]`; the result is `[batch, out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "fully_connected";
        let shape = self.shape(input);
        let batch = *shape.first().ok_or_else(|| Error::invalid(OP, "input has no batch axis"))?;
        let fan_in: usize = shape[1..].iter().product();
        let (fan_out, w_in) = match *self.shape(weight) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape(OP, "weight rank", 2, s.len())),
        };
        if w_in != fan_in {
            return Err(Error::shape(OP, "input features", w_in, fan_in));
        }
        if self.value(bias).numel() != fan_out {
            return Err(Error::shape(OP, "bias length", fan_out, self.value(bias).numel()));
        }
        let mut data = vec![T::zero(); batch * fan_out];
        for row in data.chunks_exact_mut(fan_out) {
            row.copy_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut data,
            T::one(),
        );
        let value = Tensor::new([batch, fan_out], data)?;
        Ok(self.emit(
            value,
            &[input, weight, bias],
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                fan_in,
                fan_out,
            },
        ))
    }

    // ---- elementwise ---------------------------------------------------------

    fn unary(&mut self, input: Var, kind: Unary) -> Var {
        let f: fn(T, T) -> T = match kind {
            Unary::Neg => |x, _| -x,
            Unary::Scale(_) => |x, s| x * s,
            Unary::AddScalar(_) => |x, s| x + s,
            Unary::Sigmoid => |x, _| sigmoid(x),
            Unary::Relu => |x, _| x.max(T::zero()),
            Unary::Abs => |x, _| x.abs(),
            Unary::Square => |x, _| x * x,
            Unary::Sqrt => |x, _| x.sqrt(),
        };
        let s = match kind {
            Unary::Scale(s) | Unary::AddScalar(s) => T::of(s),
            _ => T::zero(),
        };
        let value = self.value(input).map(|x| f(x, s));
        self.emit(value, &[input], Op::Unary { input, kind })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Unary::Scale(factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, Unary::AddScalar(offset))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Square root; the gradient at zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        Ok(self.unary(x, Unary::Sqrt))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if let ([n, c, h, w], [nb, cb, 1, 1]) = (sa, sb) {
            if cb != c {
                return Err(Error::shape(op, "broadcast channels", *c, *cb));
            }
            if *nb != 1 && nb != n {
                return Err(Error::shape(op, "broadcast batch", *n, *nb));
            }
            return Ok(Broadcast::PerChannel {
                nb: *nb,
                c: *c,
                plane: h * w,
            });
        }
        let dim = sa
            .iter()
            .zip(sb)
            .position(|(x, y)| x != y)
            .unwrap_or(sa.len().min(sb.len()));
        Err(Error::shape(
            op,
            format!("axis {dim} of {sa:?} vs {sb:?}"),
            sa.get(dim).copied().unwrap_or(0),
            sb.get(dim).copied().unwrap_or(0),
        ))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let bcast = self.broadcast(op, a, b)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = match bcast {
            Broadcast::Same => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
            _ => xa
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, xb[bcast.rhs_index(i)]))
                .collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.emit(value, &[a, b], Op::Binary { a, b, kind, bcast }))
    }

    /// `a + b`; `b` may be a per-channel `[1|n, c, 1, 1]` tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Binary::Div)
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| Error::invalid(OP, "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4(OP)?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4(OP)?;
            for (name, e, a) in [("batch", n, vn), ("height", h, vh), ("width", w, vw)] {
                if e != a {
                    return Err(Error::shape(OP, name, e, a));
                }
            }
            channels.push(vc);
        }
        let plane = h * w;
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                data.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new([n, total, h, w], data)?;
        Ok(self.emit(
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                batch: n,
                plane,
                channels,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.emit(value, &[input], Op::Reshape { input }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.emit(value, &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).mean());
        self.emit(value, &[input], Op::Mean { input })
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], requires_grad: &[bool], v: Var, g: Vec<T>) {
    if !requires_grad[v.0] {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Subnormal gradients carry no useful signal and slow the arithmetic down
/// by orders of magnitude once a saturated unit starts producing them.
fn flush_subnormal<T: Scalar>(grad: &mut [T]) {
    for g in grad.iter_mut() {
        if g.is_subnormal() {
            *g = T::zero();
        }
    }
}

fn backward_op<T: Scalar>(
    op: &Op,
    out: Var,
    values: &[Tensor<T>],
    rg: &[bool],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| values[v.0].data();
    match op {
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let res = kernels::conv2d_backward(val(*input), val(*kernel), g, geom, [rg[input.0], rg[kernel.0], rg[bias.0]]);
            for (v, grad) in [(*input, res.input), (*kernel, res.kernel), (*bias, res.bias)] {
                if let Some(grad) = grad {
                    accumulate(grads, rg, v, grad);
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            let mut gi = vec![T::zero(); values[input.0].numel()];
            for (&idx, &go) in argmax.iter().zip(g) {
                gi[idx as usize] += go;
            }
            accumulate(grads, rg, *input, gi);
        }
        Op::AvgPool { input, geom } => {
            accumulate(grads, rg, *input, kernels::avgpool_backward(g, geom));
        }
        Op::AdaptiveAvgPool {
            input,
            planes,
            from,
            to,
        } => {
            accumulate(grads, rg, *input, kernels::adaptive_avgpool_backward(g, *planes, *from, *to));
        }
        Op::Upsample {
            input,
            planes,
            from,
            to,
        } => {
            accumulate(grads, rg, *input, kernels::upsample_bilinear_backward(g, *planes, *from, *to));
        }
        Op::PadReplicate {
            input,
            planes,
            from,
            pad,
        } => {
            accumulate(grads, rg, *input, kernels::pad_replicate_backward(g, *planes, *from, *pad));
        }
        Op::Linear {
            input,
            weight,
            bias,
            batch,
            fan_in,
            fan_out,
        } => {
            if rg[input.0] {
                let mut gi = vec![T::zero(); batch * fan_in];
                kernels::gemm(*batch, *fan_out, *fan_in, g, false, val(*weight), false, &mut gi, T::zero());
                accumulate(grads, rg, *input, gi);
            }
            if rg[weight.0] {
                let mut gw = vec![T::zero(); fan_out * fan_in];
                kernels::gemm(*fan_out, *batch, *fan_in, g, true, val(*input), false, &mut gw, T::zero());
                accumulate(grads, rg, *weight, gw);
            }
            if rg[bias.0] {
                let mut gb = vec![T::zero(); *fan_out];
                for row in g.chunks_exact(*fan_out) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                accumulate(grads, rg, *bias, gb);
            }
        }
        Op::Unary { input, kind } => {
            let x = val(*input);
            let y = values[out.0].data();
            let zero = T::zero();
            let gi: Vec<T> = match *kind {
                Unary::Neg => g.iter().map(|&v| -v).collect(),
                Unary::Scale(s) => {
                    let s = T::of(s);
                    g.iter().map(|&v| v * s).collect()
                }
                Unary::AddScalar(_) => g.to_vec(),
                Unary::Sigmoid => g.iter().zip(y).map(|(&go, &s)| go * s * (T::one() - s)).collect(),
                Unary::Relu => g.iter().zip(x).map(|(&go, &xi)| if xi > zero { go } else { zero }).collect(),
                Unary::Abs => g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xi)| {
                        if xi > zero {
                            go
                        } else if xi < zero {
                            -go
                        } else {
                            zero
                        }
                    })
                    .collect(),
                Unary::Square => g.iter().zip(x).map(|(&go, &xi)| (xi + xi) * go).collect(),
                Unary::Sqrt => g
                    .iter()
                    .zip(y)
                    .map(|(&go, &yi)| if yi > zero { go / (yi + yi) } else { zero })
                    .collect(),
            };
            accumulate(grads, rg, *input, gi);
        }
        Op::Binary { a, b, kind, bcast } => {
            let (xa, xb) = (val(*a), val(*b));
            let rhs = |i: usize| xb[bcast.rhs_index(i)];
            if rg[a.0] {
                let ga: Vec<T> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &go)| go * rhs(i)).collect(),
                    Binary::Div => g.iter().enumerate().map(|(i, &go)| go / rhs(i)).collect(),
                };
                accumulate(grads, rg, *a, ga);
            }
            if rg[b.0] {
                let mut gb = vec![T::zero(); xb.len()];
                for (i, &go) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => go,
                        Binary::Sub => -go,
                        Binary::Mul => go * xa[i],
                        Binary::Div => {
                            let y = rhs(i);
                            -go * xa[i] / (y * y)
                        }
                    };
                    gb[bcast.rhs_index(i)] += d;
                }
                accumulate(grads, rg, *b, gb);
            }
        }
        Op::Concat {
            inputs,
            batch,
            plane,
            channels,
        } => {
            let total: usize = channels.iter().sum();
            let mut offset = 0;
            for (&v, &c) in inputs.iter().zip(channels) {
                if rg[v.0] {
                    let mut gi = Vec::with_capacity(batch * c * plane);
                    for b in 0..*batch {
                        let start = (b * total + offset) * plane;
                        gi.extend_from_slice(&g[start..start + c * plane]);
                    }
                    accumulate(grads, rg, v, gi);
                }
                offset += c;
            }
        }
        Op::Reshape { input } => accumulate(grads, rg, *input, g.to_vec()),
        Op::Sum { input } => {
            accumulate(grads, rg, *input, vec![g[0]; values[input.0].numel()]);
        }
        Op::Mean { input } => {
            let n = values[input.0].numel();
            accumulate(grads, rg, *input, vec![g[0] / count::<T>(n); n]);
        }
    }
}
