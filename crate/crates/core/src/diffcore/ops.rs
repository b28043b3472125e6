//! The closed set of differentiable operations, each with a forward pass that
//! returns an [`OpRecord`] and an exact reverse-mode backward pass.

use std::str::FromStr;

use rand::Rng as _;

use super::kernels::{self, ConvGeom, RoiWindow};
use super::tensor::{Real, Tensor};
use crate::error::{AodError, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Affine,
    Relu,
    Dropout,
    Conv2d,
    MaxPool2d,
    SoftmaxXent,
    SmoothL1,
    EltwiseMax,
    Concat,
    RoiPool,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Affine,
        OpKind::Relu,
        OpKind::Dropout,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::SoftmaxXent,
        OpKind::SmoothL1,
        OpKind::EltwiseMax,
        OpKind::Concat,
        OpKind::RoiPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Affine => "affine",
            OpKind::Relu => "relu",
            OpKind::Dropout => "dropout",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::SoftmaxXent => "softmax_xent",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::EltwiseMax => "eltwise_max",
            OpKind::Concat => "concat",
            OpKind::RoiPool => "roi_pool",
        }
    }
}

impl FromStr for OpKind {
    type Err = AodError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| AodError::Contract(format!("unknown op kind `{s}`")))
    }
}

/// An op together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// inputs `[x (n), W (m x n), b (m)]`
    Affine,
    Relu,
    /// `mask_seed` keys the Bernoulli mask in train mode.
    Dropout { rate: f64, mode: Mode, mask_seed: u64 },
    /// inputs `[x (C x H x W), W (O x C x k x k), b (O)]`, stride 1
    Conv2d { pad: usize },
    /// non-overlapping `size x size` windows
    MaxPool2d { size: usize },
    /// input `[logits]`; output is the scalar loss `-ln softmax(logits)[target]`
    SoftmaxXent { target: usize },
    /// input `[d]`; output `sum_i smooth_l1(d_i)`
    SmoothL1,
    EltwiseMax,
    Concat,
    /// input `[fm (C x H x W)]`; the window is in feature cells
    RoiPool { window: RoiWindow },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Affine => OpKind::Affine,
            Op::Relu => OpKind::Relu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::SmoothL1 => OpKind::SmoothL1,
            Op::EltwiseMax => OpKind::EltwiseMax,
            Op::Concat => OpKind::Concat,
            Op::RoiPool { .. } => OpKind::RoiPool,
        }
    }
}

/// Everything backward needs to know about one forward evaluation.
#[derive(Clone, Debug)]
pub struct OpRecord<R> {
    pub op: Op,
    pub saved: Vec<Tensor<R>>,
    pub argmax: Vec<usize>,
    pub input_shapes: Vec<Vec<usize>>,
    pub output_shape: Vec<usize>,
}

fn shape_err(op: OpKind, msg: impl std::fmt::Display) -> AodError {
    AodError::Shape(format!("{}: {}", op.name(), msg))
}

fn arity<R>(op: OpKind, inputs: &[&Tensor<R>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// Inverted-dropout scale factors: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<R: Real>(rng: &mut Rng, n: usize, rate: f64) -> Vec<R> {
    if rate <= 0.0 {
        return vec![R::one(); n];
    }
    let keep = R::of(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { R::zero() } else { keep })
        .collect()
}

/// Softmax with the max subtracted for stability.
pub fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let m = logits.iter().copied().fold(R::neg_infinity(), R::max);
    let e: Vec<R> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: R = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[inline]
pub fn smooth_l1<R: Real>(d: R) -> R {
    let a = d.abs();
    if a < R::one() {
        R::of(0.5) * d * d
    } else {
        a - R::of(0.5)
    }
}

#[inline]
pub fn smooth_l1_grad<R: Real>(d: R) -> R {
    if d.abs() < R::one() {
        d
    } else {
        d.signum()
    }
}

pub fn forward<R: Real>(op: &Op, inputs: &[&Tensor<R>]) -> Result<(Tensor<R>, OpRecord<R>)> {
    let kind = op.kind();
    for t in inputs {
        t.ensure_finite(kind.name())?;
    }
    let input_shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut saved = Vec::new();
    let mut argmax = Vec::new();

    let out = match op {
        Op::Affine => {
            arity(kind, inputs, 3)?;
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let n = x.len();
            if w.shape().len() != 2 || w.shape()[1] != n || b.len() != w.shape()[0] {
                return Err(shape_err(
                    kind,
                    format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let mut out = vec![R::zero(); b.len()];
            kernels::affine(w.data(), b.data(), x.data(), &mut out);
            saved.push(x.clone());
            saved.push(w.clone());
            Tensor::from_vec(out)
        }
        Op::Relu => {
            arity(kind, inputs, 1)?;
            let x = inputs[0];
            let data = x.data().iter().map(|&v| v.max(R::zero())).collect();
            saved.push(x.clone());
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Dropout {
            rate,
            mode,
            mask_seed,
        } => {
            arity(kind, inputs, 1)?;
            if !(0.0..1.0).contains(rate) {
                return Err(AodError::Contract(format!("dropout rate {rate} not in [0, 1)")));
            }
            let x = inputs[0];
            let mask = match mode {
                Mode::Eval => vec![R::one(); x.len()],
                Mode::Train => {
                    let mut rng = crate::rng::stream_rng(*mask_seed, &[]);
                    dropout_mask(&mut rng, x.len(), *rate)
                }
            };
            let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            saved.push(Tensor::new(x.shape().to_vec(), mask)?);
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Conv2d { pad } => {
            arity(kind, inputs, 3)?;
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || b.len() != ws[0] {
                return Err(shape_err(kind, format!("x {xs:?}, W {ws:?}, b {:?}", b.shape())));
            }
            if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
                return Err(shape_err(kind, "kernel larger than padded input"));
            }
            let g = ConvGeom {
                in_c: xs[0],
                in_h: xs[1],
                in_w: xs[2],
                out_c: ws[0],
                k: ws[2],
                pad: *pad,
            };
            let mut col = vec![R::zero(); g.patch() * g.positions()];
            kernels::im2col(&g, x.data(), &mut col);
            let mut out = vec![R::zero(); g.out_c * g.positions()];
            kernels::conv_forward(&g, w.data(), b.data(), &col, &mut out);
            saved.push(Tensor::new(vec![g.patch(), g.positions()], col)?);
            saved.push(w.clone());
            Tensor::new(vec![g.out_c, g.out_h(), g.out_w()], out)?
        }
        Op::MaxPool2d { size } => {
            arity(kind, inputs, 1)?;
            let x = inputs[0];
            let xs = x.shape();
            if xs.len() != 3 || *size == 0 || xs[1] < *size || xs[2] < *size {
                return Err(shape_err(kind, format!("x {xs:?}, size {size}")));
            }
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            let n = c * (h / size) * (w / size);
            let mut out = vec![R::zero(); n];
            argmax = vec![0; n];
            kernels::maxpool_forward(x.data(), c, h, w, *size, &mut out, &mut argmax);
            Tensor::new(vec![c, h / size, w / size], out)?
        }
        Op::SoftmaxXent { target } => {
            arity(kind, inputs, 1)?;
            let logits = inputs[0];
            if *target >= logits.len() {
                return Err(shape_err(kind, format!("target {target} >= {}", logits.len())));
            }
            let probs = softmax(logits.data());
            let m = logits.data().iter().copied().fold(R::neg_infinity(), R::max);
            let lse = m + logits.data().iter().map(|&v| (v - m).exp()).sum::<R>().ln();
            let loss = lse - logits.data()[*target];
            saved.push(Tensor::from_vec(probs));
            Tensor::scalar(loss)
        }
        Op::SmoothL1 => {
            arity(kind, inputs, 1)?;
            let d = inputs[0];
            saved.push(d.clone());
            Tensor::scalar(d.data().iter().map(|&v| smooth_l1(v)).sum())
        }
        Op::EltwiseMax => {
            if inputs.is_empty() {
                return Err(shape_err(kind, "no inputs"));
            }
            let shape = inputs[0].shape();
            if inputs.iter().any(|t| t.shape() != shape) {
                return Err(shape_err(kind, "inputs differ in shape"));
            }
            let n = inputs[0].len();
            let mut out = inputs[0].data().to_vec();
            // argmax holds the winning input index per coordinate
            argmax = vec![0; n];
            for (k, t) in inputs.iter().enumerate().skip(1) {
                for (i, &v) in t.data().iter().enumerate() {
                    if v > out[i] {
                        out[i] = v;
                        argmax[i] = k;
                    }
                }
            }
            Tensor::new(shape.to_vec(), out)?
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(shape_err(kind, "no inputs"));
            }
            let data: Vec<R> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::from_vec(data)
        }
        Op::RoiPool { window } => {
            arity(kind, inputs, 1)?;
            let fm = inputs[0];
            let s = fm.shape();
            if s.len() != 3 {
                return Err(shape_err(kind, format!("feature map shape {s:?}")));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let win = window;
            if win.grid_h == 0 || win.grid_w == 0 {
                return Err(shape_err(kind, "empty grid"));
            }
            if win.y0 >= win.y1 || win.x0 >= win.x1 || win.y1 > h || win.x1 > w {
                return Err(AodError::DegenerateRoi);
            }
            let n = win.grid_h * win.grid_w * c;
            let mut out = vec![R::zero(); n];
            argmax = vec![0; n];
            kernels::roi_pool_forward(fm.data(), c, h, w, win, &mut out, &mut argmax);
            Tensor::new(vec![win.grid_h, win.grid_w, c], out)?
        }
    };

    out.ensure_finite(kind.name())?;
    let record = OpRecord {
        op: op.clone(),
        saved,
        argmax,
        input_shapes,
        output_shape: out.shape().to_vec(),
    };
    Ok((out, record))
}

pub fn backward<R: Real>(record: &OpRecord<R>, upstream: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
    let kind = record.op.kind();
    if upstream.shape() != record.output_shape.as_slice() {
        return Err(shape_err(
            kind,
            format!(
                "upstream {:?} does not match output {:?}",
                upstream.shape(),
                record.output_shape
            ),
        ));
    }
    let dy = upstream.data();
    let zeros = |i: usize| Tensor::<R>::zeros(&record.input_shapes[i]);

    let grads = match &record.op {
        Op::Affine => {
            let (x, w) = (&record.saved[0], &record.saved[1]);
            let mut dx = zeros(0);
            let mut dw = zeros(1);
            kernels::affine_t_accum(w.data(), dy, dx.data_mut());
            kernels::outer_accum(dy, x.data(), dw.data_mut());
            let db = Tensor::new(record.input_shapes[2].clone(), dy.to_vec())?;
            vec![dx, dw, db]
        }
        Op::Relu => {
            let x = &record.saved[0];
            let mut dx = zeros(0);
            for ((g, &xi), &u) in dx.data_mut().iter_mut().zip(x.data()).zip(dy) {
                *g = if xi > R::zero() { u } else { R::zero() };
            }
            vec![dx]
        }
        Op::Dropout { .. } => {
            let mask = &record.saved[0];
            let data = dy.iter().zip(mask.data()).map(|(&u, &m)| u * m).collect();
            vec![Tensor::new(record.input_shapes[0].clone(), data)?]
        }
        Op::Conv2d { pad } => {
            let (col, w) = (&record.saved[0], &record.saved[1]);
            let (xs, ws) = (&record.input_shapes[0], &record.input_shapes[1]);
            let g = ConvGeom {
                in_c: xs[0],
                in_h: xs[1],
                in_w: xs[2],
                out_c: ws[0],
                k: ws[2],
                pad: *pad,
            };
            let mut dw = zeros(1);
            let mut db = zeros(2);
            let mut dcol = vec![R::zero(); col.len()];
            kernels::conv_backward(&g, w.data(), col.data(), dy, dw.data_mut(), db.data_mut(), Some(&mut dcol));
            let mut dx = zeros(0);
            kernels::col2im_accum(&g, &dcol, dx.data_mut());
            vec![dx, dw, db]
        }
        Op::MaxPool2d { .. } | Op::RoiPool { .. } => {
            let mut dx = zeros(0);
            kernels::scatter_argmax(&record.argmax, dy, dx.data_mut());
            vec![dx]
        }
        Op::SoftmaxXent { target } => {
            let probs = record.saved[0].data();
            let mut d: Vec<R> = probs.iter().map(|&p| p * dy[0]).collect();
            d[*target] -= dy[0];
            vec![Tensor::new(record.input_shapes[0].clone(), d)?]
        }
        Op::SmoothL1 => {
            let d = record.saved[0].data();
            let g = d.iter().map(|&v| smooth_l1_grad(v) * dy[0]).collect();
            vec![Tensor::new(record.input_shapes[0].clone(), g)?]
        }
        Op::EltwiseMax => {
            let mut out: Vec<Tensor<R>> = (0..record.input_shapes.len()).map(zeros).collect();
            for (i, (&k, &u)) in record.argmax.iter().zip(dy).enumerate() {
                out[k].data_mut()[i] = u;
            }
            out
        }
        Op::Concat => {
            let mut off = 0;
            let mut out = Vec::with_capacity(record.input_shapes.len());
            for s in &record.input_shapes {
                let n: usize = s.iter().product();
                out.push(Tensor::new(s.clone(), dy[off..off + n].to_vec())?);
                off += n;
            }
            out
        }
    };
    for g in &grads {
        g.ensure_finite(kind.name())?;
    }
    Ok(grads)
}
