//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it runs; [`Tape::backward`] walks
//! the record in reverse and returns gradients for every node that requires
//! one. Only the operations needed by the hypernetwork and its loss exist.

mod check;
pub mod kernels;

use crate::ccc::{convolve_full, crop_full, ConvMode, UV_LIMIT};
use crate::error::{Error, Result};
use kernels::{ConvDims, NormGrads, NormGroups, NormSaved};

pub use check::{grad_check, GradCheckConfig, GradCheckReport};
pub use kernels::NORM_EPS;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv3x3 { x: Var, w: Var, b: Option<Var> },
    LeakyRelu { x: Var, slope: f64 },
    Norm { x: Var, gamma: Var, beta: Var, groups: NormGroups, fixed: bool, saved: NormSaved },
    MaxPool2 { x: Var, idx: Vec<usize> },
    Upsample2 { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { a: Var, b: Var },
    GroupMax { x: Var, idx: Vec<usize> },
    Gather { x: Var, rows: Vec<usize> },
    Slice { x: Var, offset: usize },
    ConvSame { x: Var, k: Var },
    Softmax { x: Var },
    Expectation { p: Var, centers: Vec<f64> },
    UvToRgb { uv: Var },
    Dot { a: Var, b: Var },
    L2Norm { x: Var },
    Sum { x: Var },
    SumSquares { x: Var },
    Acos { x: Var },
    SobelEnergy { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` if `v` does not
    /// require a gradient or does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn dims4(t: &Tensor, op: &str) -> Result<[usize; 4]> {
    match t.shape[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape(format!("{op} expects NCHW input, got {:?}", t.shape))),
    }
}

fn square(t: &Tensor, op: &str) -> Result<usize> {
    match t.shape[..] {
        [h, w] if h == w => Ok(h),
        _ => Err(Error::Shape(format!("{op} expects a square 2-D array, got {:?}", t.shape))),
    }
}

fn flip(x: &[f64]) -> Vec<f64> {
    x.iter().rev().copied().collect()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// An input node; gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// 3x3 convolution, stride 1, zero padding. `x: [N, Ci, H, W]`,
    /// `w: [Co, Ci, 3, 3]`, optional `b: [Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, ci, h, wd] = dims4(self.value(x), "conv3x3")?;
        let ws = self.value(w).shape.clone();
        if ws.len() != 4 || ws[1] != ci || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Shape(format!("conv3x3 weight {ws:?} does not fit {ci} input channels")));
        }
        let co = ws[0];
        if let Some(b) = b {
            if self.value(b).shape != [co] {
                return Err(Error::Shape(format!("conv3x3 bias must be [{co}]")));
            }
        }
        let d = ConvDims { n, ci, co, h, w: wd };
        let out = kernels::conv3x3_forward(&self.value(x).data, &self.value(w).data, b.map(|b| self.value(b).data.as_slice()), &d);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(Tensor { shape: vec![n, co, h, wd], data: out }, Op::Conv3x3 { x, w, b }, &parents))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var, op: &str) -> Result<[usize; 4]> {
        let s = dims4(self.value(x), op)?;
        if self.value(gamma).shape != [s[1]] || self.value(beta).shape != [s[1]] {
            return Err(Error::Shape(format!("{op}: scale/shift must be [{}]", s[1])));
        }
        Ok(s)
    }

    /// Batch normalization with batch statistics. Returns the output plus the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.norm(x, gamma, beta, NormGroups::Batch)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let s = self.check_affine(x, gamma, beta, "batch_norm")?;
        if mean.len() != s[1] || var.len() != s[1] {
            return Err(Error::Shape("batch_norm: running statistics do not match channels".into()));
        }
        let (y, saved) = kernels::norm_forward_fixed(&self.value(x).data, s, mean, var, &self.value(gamma).data, &self.value(beta).data);
        let op = Op::Norm {
            x,
            gamma,
            beta,
            groups: NormGroups::Batch,
            fixed: true,
            saved,
        };
        Ok(self.push(Tensor { shape: s.to_vec(), data: y }, op, &[x, gamma, beta]))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        Ok(self.norm(x, gamma, beta, NormGroups::Instance)?.0)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, groups: NormGroups) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let s = self.check_affine(x, gamma, beta, "norm")?;
        let (y, saved) = kernels::norm_forward(&self.value(x).data, s, groups, &self.value(gamma).data, &self.value(beta).data);
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let op = Op::Norm {
            x,
            gamma,
            beta,
            groups,
            fixed: false,
            saved,
        };
        Ok((self.push(Tensor { shape: s.to_vec(), data: y }, op, &[x, gamma, beta]), mean, var))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2 needs even spatial size, got {h}x{w}")));
        }
        let (data, idx) = kernels::maxpool2(&self.value(x).data, n * c, h, w);
        Ok(self.push(Tensor { shape: vec![n, c, h / 2, w / 2], data }, Op::MaxPool2 { x, idx }, &[x]))
    }

    /// 2x bilinear upsampling (half-pixel centers, clamped edges).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "upsample2")?;
        let data = kernels::upsample2(&self.value(x).data, n * c, h, w);
        Ok(self.push(Tensor { shape: vec![n, c, 2 * h, 2 * w], data }, Op::Upsample2 { x }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: ta.shape.clone(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * c).collect(),
        };
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// Concatenation along the channel axis of two NCHW arrays.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.value(a), "concat")?;
        let [nb, cb, hb, wb] = dims4(self.value(b), "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape("concat: batch and spatial sizes differ".into()));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data[s * cb * hw..(s + 1) * cb * hw]);
        }
        Ok(self.push(Tensor { shape: vec![n, ca + cb, h, w], data }, Op::Concat { a, b }, &[a, b]))
    }

    /// Elementwise maximum over consecutive groups of `group` rows along the
    /// first axis: `[B*group, ...] -> [B, ...]`. Ties go to the earliest row,
    /// except that `+0.0` wins over `-0.0` so the result does not depend on
    /// row order.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape.first().copied().unwrap_or(0);
        if group == 0 || rows % group != 0 {
            return Err(Error::Shape(format!("group_max: {rows} rows not divisible into groups of {group}")));
        }
        let b = rows / group;
        let row_len = t.numel() / rows.max(1);
        let mut data = Vec::with_capacity(b * row_len);
        let mut idx = Vec::with_capacity(b * row_len);
        for g in 0..b {
            for k in 0..row_len {
                let mut best = g * group * row_len + k;
                for j in 1..group {
                    let c = (g * group + j) * row_len + k;
                    let (v, bv) = (t.data[c], t.data[best]);
                    if v > bv || (v == bv && bv.is_sign_negative() && v.is_sign_positive()) {
                        best = c;
                    }
                }
                data.push(t.data[best]);
                idx.push(best);
            }
        }
        let mut shape = t.shape.clone();
        shape[0] = b;
        Ok(self.push(Tensor { shape, data }, Op::GroupMax { x, idx }, &[x]))
    }

    /// Selects rows along the first axis.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let total = t.shape.first().copied().unwrap_or(0);
        if let Some(&r) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Shape(format!("gather: row {r} out of {total}")));
        }
        let row_len = t.numel() / total.max(1);
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&t.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = t.shape.clone();
        shape[0] = rows.len();
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, rows: rows.to_vec() }, &[x]))
    }

    /// A contiguous range of the flattened array, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let t = self.value(x);
        if offset + len > t.numel() {
            return Err(Error::Shape(format!("slice {offset}+{len} exceeds {}", t.numel())));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data[offset..offset + len].to_vec(),
        };
        Ok(self.push(value, Op::Slice { x, offset }, &[x]))
    }

    /// Same-size linear convolution of two `n x n` arrays with the kernel
    /// centered at `(n/2, n/2)`.
    pub fn conv_same(&mut self, x: Var, k: Var) -> Result<Var> {
        let n = square(self.value(x), "conv_same")?;
        same_shape(self.value(x), self.value(k), "conv_same")?;
        let full = convolve_full(&self.value(x).data, &self.value(k).data, n, ConvMode::Fft)?;
        let data = crop_full(&full, n, n / 2);
        Ok(self.push(Tensor { shape: vec![n, n], data }, Op::ConvSame { x, k }, &[x, k]))
    }

    /// Softmax over every element.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: crate::ccc::softmax(&t.data),
        };
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// `(sum_ij p_ij c_j, sum_ij p_ij c_i)` for an `n x n` weight map and
    /// `n` axis coordinates.
    pub fn expectation(&mut self, p: Var, centers: &[f64]) -> Result<Var> {
        let n = square(self.value(p), "expectation")?;
        if centers.len() != n {
            return Err(Error::Shape(format!("expectation: {} centers for {n} bins", centers.len())));
        }
        let d = &self.value(p).data;
        let (mut u, mut v) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                u += d[i * n + j] * centers[j];
                v += d[i * n + j] * centers[i];
            }
        }
        let op = Op::Expectation {
            p,
            centers: centers.to_vec(),
        };
        Ok(self.push(Tensor { shape: vec![2], data: vec![u, v] }, op, &[p]))
    }

    /// Maps a `[2]` log-chroma pair to the unit RGB vector with that chroma.
    pub fn uv_to_rgb(&mut self, uv: Var) -> Result<Var> {
        let t = self.value(uv);
        if t.shape != [2] {
            return Err(Error::Shape(format!("uv_to_rgb expects [2], got {:?}", t.shape)));
        }
        let (u, v) = (t.data[0], t.data[1]);
        if !(u.abs() <= UV_LIMIT && v.abs() <= UV_LIMIT) {
            return Err(Error::Domain(format!("log-chroma ({u}, {v}) out of range")));
        }
        let rgb = crate::ccc::uv_to_rgb(u, v)?.rgb();
        Ok(self.push(Tensor { shape: vec![3], data: rgb.to_vec() }, Op::UvToRgb { uv }, &[uv]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "dot")?;
        let s = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }, &[a, b]))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(s), Op::L2Norm { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x }, &[x])
    }

    /// Elementwise arccos of inputs clamped to `[-1 + 1e-7, 1 - 1e-7]`.
    pub fn acos(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| clamp_cos(v).acos()).collect(),
        };
        self.push(value, Op::Acos { x }, &[x])
    }

    /// Sum of squared horizontal and vertical Sobel responses over the valid
    /// region of a 2-D map.
    pub fn sobel_energy(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [h, w] = t.shape[..] else {
            return Err(Error::Shape(format!("sobel_energy expects 2-D input, got {:?}", t.shape)));
        };
        let (ru, rv) = kernels::sobel_responses(&t.data, h, w);
        let s = ru.iter().chain(&rv).map(|v| v * v).sum();
        Ok(self.push(Tensor::scalar(s), Op::SobelEnergy { x }, &[x]))
    }

    /// Which piece of every piecewise operation the recorded values fall on:
    /// leaky ReLU signs, pooling and group winners, and arccos clamping. Two
    /// tapes built by the same graph builder with equal patterns lie on the
    /// same smooth piece.
    pub(crate) fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => out.extend(self.value(*x).data.iter().map(|&v| usize::from(v > 0.0))),
                Op::MaxPool2 { idx, .. } | Op::GroupMax { idx, .. } => out.extend_from_slice(idx),
                Op::Acos { x } => out.extend(self.value(*x).data.iter().map(|&v| {
                    if v >= 1.0 - ACOS_CLAMP {
                        2
                    } else if v <= -1.0 + ACOS_CLAMP {
                        0
                    } else {
                        1
                    }
                })),
                _ => {}
            }
        }
        out
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// requires one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::NonScalarOutput(out.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients(grads));
        }
        grads[output.0] = Some(Tensor {
            shape: out.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = &g.data;
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:block) => {
                self.accumulate(grads, $v, |$d: &mut [f64]| $body)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 { x, w, b } => {
                let [n, ci, h, wd] = dims4(self.value(*x), "").expect("checked in forward");
                let co = self.value(*w).shape[0];
                let d = ConvDims { n, ci, co, h, w: wd };
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                let mut dx = self.fresh(*x);
                let mut dw = self.fresh(*w);
                let mut db = b.and_then(|b| self.fresh(b));
                kernels::conv3x3_backward(xv, wv, gd, &d, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                self.add_into(grads, *x, dx);
                self.add_into(grads, *w, dw);
                if let Some(b) = b {
                    self.add_into(grads, *b, db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.value(*x).data;
                acc!(*x, |d| {
                    for k in 0..d.len() {
                        d[k] += if xv[k] > 0.0 { gd[k] } else { slope * gd[k] };
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                fixed,
                saved,
            } => {
                let s = dims4(self.value(*x), "").expect("checked in forward");
                let mut dx = self.fresh(*x);
                let mut dg = self.fresh(*gamma);
                let mut dbt = self.fresh(*beta);
                let gr = NormGrads {
                    dx: dx.as_deref_mut(),
                    dgamma: dg.as_deref_mut(),
                    dbeta: dbt.as_deref_mut(),
                };
                kernels::norm_backward(gd, s, *groups, *fixed, &self.value(*gamma).data, saved, gr);
                self.add_into(grads, *x, dx);
                self.add_into(grads, *gamma, dg);
                self.add_into(grads, *beta, dbt);
            }
            Op::MaxPool2 { x, idx } | Op::GroupMax { x, idx } => {
                acc!(*x, |d| {
                    for (k, &src) in idx.iter().enumerate() {
                        d[src] += gd[k];
                    }
                });
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = dims4(self.value(*x), "").expect("checked in forward");
                acc!(*x, |d| {
                    kernels::upsample2_backward(gd, n * c, h, w, d);
                });
            }
            Op::Add { a, b } => {
                acc!(*a, |d| {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                });
                acc!(*b, |d| {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                });
            }
            Op::Sub { a, b } => {
                acc!(*a, |d| {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                });
                acc!(*b, |d| {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d -= g);
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc!(*a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * bv[k];
                    }
                });
                acc!(*b, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * av[k];
                    }
                });
            }
            Op::Div { a, b } => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc!(*a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] / bv[k];
                    }
                });
                acc!(*b, |d| {
                    for k in 0..d.len() {
                        d[k] -= gd[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::Scale { x, c } => {
                acc!(*x, |d| {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += c * g);
                });
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = dims4(self.value(*a), "").expect("checked in forward");
                let cb = self.value(*b).shape[1];
                let hw = h * w;
                let per = (ca + cb) * hw;
                acc!(*a, |d| {
                    for s in 0..n {
                        for k in 0..ca * hw {
                            d[s * ca * hw + k] += gd[s * per + k];
                        }
                    }
                });
                acc!(*b, |d| {
                    for s in 0..n {
                        for k in 0..cb * hw {
                            d[s * cb * hw + k] += gd[s * per + ca * hw + k];
                        }
                    }
                });
            }
            Op::Gather { x, rows } => {
                let row_len = g.numel() / rows.len().max(1);
                acc!(*x, |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        for e in 0..row_len {
                            d[r * row_len + e] += gd[k * row_len + e];
                        }
                    }
                });
            }
            Op::Slice { x, offset } => {
                acc!(*x, |d| {
                    d[*offset..offset + gd.len()].iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                });
            }
            Op::ConvSame { x, k } => {
                let n = self.value(*x).shape[0];
                let off = n - 1 - n / 2;
                let (xv, kv) = (&self.value(*x).data, &self.value(*k).data);
                acc!(*x, |d| {
                    let full = convolve_full(gd, &flip(kv), n, ConvMode::Fft).expect("square shapes");
                    d.iter_mut().zip(crop_full(&full, n, off)).for_each(|(d, v)| *d += v);
                });
                acc!(*k, |d| {
                    let full = convolve_full(gd, &flip(xv), n, ConvMode::Fft).expect("square shapes");
                    d.iter_mut().zip(crop_full(&full, n, off)).for_each(|(d, v)| *d += v);
                });
            }
            Op::Softmax { x } => {
                let p = &node.value.data;
                let s: f64 = p.iter().zip(gd).map(|(p, g)| p * g).sum();
                acc!(*x, |d| {
                    for k in 0..d.len() {
                        d[k] += p[k] * (gd[k] - s);
                    }
                });
            }
            Op::Expectation { p, centers } => {
                let n = centers.len();
                acc!(*p, |d| {
                    for i in 0..n {
                        for j in 0..n {
                            d[i * n + j] += gd[0] * centers[j] + gd[1] * centers[i];
                        }
                    }
                });
            }
            Op::UvToRgb { uv } => {
                let [r, gr, b] = [node.value.data[0], node.value.data[1], node.value.data[2]];
                let du = -gd[0] * r * (1.0 - r * r) + gd[1] * gr * r * r + gd[2] * b * r * r;
                let dv = gd[0] * r * b * b + gd[1] * gr * b * b - gd[2] * b * (1.0 - b * b);
                acc!(*uv, |d| {
                    d[0] += du;
                    d[1] += dv;
                });
            }
            Op::Dot { a, b } => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc!(*a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[0] * bv[k];
                    }
                });
                acc!(*b, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[0] * av[k];
                    }
                });
            }
            Op::L2Norm { x } => {
                let norm = node.value.data[0];
                let xv = &self.value(*x).data;
                if norm > 0.0 {
                    acc!(*x, |d| {
                        for k in 0..d.len() {
                            d[k] += gd[0] * xv[k] / norm;
                        }
                    });
                }
            }
            Op::Sum { x } => {
                acc!(*x, |d| {
                    d.iter_mut().for_each(|d| *d += gd[0]);
                });
            }
            Op::SumSquares { x } => {
                let xv = &self.value(*x).data;
                acc!(*x, |d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * gd[0] * xv[k];
                    }
                });
            }
            Op::Acos { x } => {
                let xv = &self.value(*x).data;
                acc!(*x, |d| {
                    for k in 0..d.len() {
                        let c = clamp_cos(xv[k]);
                        if c == xv[k] {
                            d[k] -= gd[k] / (1.0 - c * c).sqrt();
                        }
                    }
                });
            }
            Op::SobelEnergy { x } => {
                let [h, w] = self.value(*x).shape[..] else { unreachable!() };
                let (ru, rv) = kernels::sobel_responses(&self.value(*x).data, h, w);
                let ow = w.saturating_sub(2);
                acc!(*x, |d| {
                    for (k, (su, sv)) in ru.iter().zip(&rv).enumerate() {
                        let (i, j) = (k / ow, k % ow);
                        for a in 0..3 {
                            for b in 0..3 {
                                d[(i + a) * w + j + b] +=
                                    2.0 * gd[0] * (su * kernels::SOBEL_U[a][b] + sv * kernels::SOBEL_U[b][a]);
                            }
                        }
                    }
                });
            }
        }
    }
}

impl Tape {
    /// Runs `f` on the gradient buffer of `v`, creating it if needed.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
        f(&mut t.data);
    }

    /// A zeroed buffer for `v`'s gradient, or `None` if it is not needed.
    fn fresh(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0]
            .requires_grad
            .then(|| vec![0.0; self.nodes[v.0].value.numel()])
    }

    fn add_into(&self, grads: &mut [Option<Tensor>], v: Var, buf: Option<Vec<f64>>) {
        if let Some(buf) = buf {
            self.accumulate(grads, v, |d| d.iter_mut().zip(buf).for_each(|(d, b)| *d += b));
        }
    }
}

pub const ACOS_CLAMP: f64 = 1e-7;

fn clamp_cos(v: f64) -> f64 {
    v.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn dot_gradients_swap() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.param(t(&[3], &[-4.0, 5.0, 0.5]));
        let d = tape.dot(x, y).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(x).unwrap().data(), tape.value(y).data());
        assert_eq!(g.get(y).unwrap().data(), tape.value(x).data());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput(s)) if s == vec![2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn max_pool_and_upsample_fixtures() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);
        let c = tape.constant(t(&[1, 2, 2, 2], &[3.0; 8]));
        let u = tape.upsample2(c).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 2, 4, 4]);
        assert!(tape.value(u).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn group_max_prefers_positive_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[-0.0, 0.0]));
        let m = tape.group_max(x, 2).unwrap();
        assert!(tape.value(m).data()[0].is_sign_positive());
        let y = tape.constant(t(&[2, 1], &[0.0, -0.0]));
        let m = tape.group_max(y, 2).unwrap();
        assert!(tape.value(m).data()[0].is_sign_positive());
    }

    #[test]
    fn normalization_statistics() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 37 % 23) as f64).sin() * 3.0 + 1.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let gamma = tape.constant(t(&[3], &[1.0; 3]));
        let beta = tape.constant(t(&[3], &[0.0; 3]));
        let (bn, _, _) = tape.batch_norm(x, gamma, beta).unwrap();
        let inn = tape.instance_norm(x, gamma, beta).unwrap();
        let stats = |vals: Vec<f64>| {
            let k = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / k;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k;
            (m, v)
        };
        for c in 0..3 {
            let vals = (0..2).flat_map(|b| tape.value(bn).data()[(b * 3 + c) * 20..(b * 3 + c + 1) * 20].to_vec()).collect();
            let (m, v) = stats(vals);
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-3, "{m} {v}");
            for b in 0..2 {
                let (m, v) = stats(tape.value(inn).data()[(b * 3 + c) * 20..(b * 3 + c + 1) * 20].to_vec());
                assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-3);
            }
        }
    }
}
