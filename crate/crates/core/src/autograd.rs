//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node that transitively depends on a parameter leaf.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like its value if nothing flowed.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf treated as constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward expects a scalar loss"
        );
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            grads[id] = Some(g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [h, w, c] => (h * w, *c),
        [n] => (1, *n),
        other => {
            let c = *other.last().unwrap_or(&1);
            (t.len() / c.max(1), c)
        }
    }
}

/// Convolution geometry on height × width × channels inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

fn im2col(x: &[f64], h: usize, w: usize, c: usize, g: ConvGeometry) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = g.output_size(h, w);
    let k = g.kernel;
    let cols_w = k * k * c;
    let mut cols = vec![0.0; oh * ow * cols_w];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * cols_w..(oy * ow + ox + 1) * cols_w];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f64], h: usize, w: usize, c: usize, g: ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.output_size(h, w);
    let k = g.kernel;
    let cols_w = k * k * c;
    let mut x = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * cols_w..(oy * ow + ox + 1) * cols_w];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * k + kx) * c;
                    for (d, s) in x[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Numerically stable `ln(sigmoid(z))`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one logit against a binary target, with its derivative.
pub(crate) fn focal_term(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (z, sign, a) = if positive {
        (logit, 1.0, alpha)
    } else {
        (-logit, -1.0, 1.0 - alpha)
    };
    let s = sigmoid(z);
    let ls = log_sigmoid(z);
    let one_minus = 1.0 - s;
    let loss = -a * one_minus.powf(gamma) * ls;
    let dz = a * one_minus.powf(gamma) * (gamma * s * ls - one_minus);
    (loss, dz * sign)
}

/// How the per-element regression penalty is computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    /// Huber-style smooth L1 with transition point `beta`.
    SmoothL1 { beta: f64 },
    L1,
}

impl Penalty {
    fn eval(self, d: f64) -> (f64, f64) {
        match self {
            Penalty::SmoothL1 { beta } if d.abs() < beta => (0.5 * d * d / beta, d / beta),
            Penalty::SmoothL1 { beta } => (d.abs() - 0.5 * beta, d.signum()),
            Penalty::L1 => (d.abs(), if d == 0.0 { 0.0 } else { d.signum() }),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let out = (*v).clone().reshape(shape)?;
        let in_shape = v.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&in_shape).expect("reshape"))]),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |x, y| x * y)),
                    need[1].then(|| g.zip_map(&a, |x, y| x * y)),
                ]
            }),
        ))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v * k);
        self.tape
            .push(out, &[self], Box::new(move |g, _| vec![Some(g.map(|v| v * k))]))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v + k);
        self.tape
            .push(out, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]),
        )
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| 2.0 * gv * xv))]),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let n = x.len().max(1) as f64;
        let shape = x.shape().to_vec();
        self.tape.push(
            Tensor::scalar(x.sum() / n),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0] / n))]),
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(other)?.square().mean())
    }

    /// Adds a length-`c` vector to every row of a `p × c` (or `h × w × c`) value.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.value(), row.value());
        let (p, c) = as_matrix(&x);
        if r.len() != c {
            return Err(Error::shape("add_row", &[c], r.shape()));
        }
        let mut out = (*x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let r_shape = r.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self, row],
            Box::new(move |g, need| {
                let gr = need[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for i in 0..p {
                        for (a, v) in acc.iter_mut().zip(g.row(i, c)) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(r_shape.clone(), acc)
                });
                vec![Some(g.clone()), gr]
            }),
        ))
    }

    /// `self · other` for `m × k` and `k × n` matrices.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &[k, n], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            &[self, other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `self · otherᵀ` for `m × k` and `n × k` matrices.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[n, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            &[self, other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), false, &mut d, false);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, a.data(), false, &mut d, false);
                    Tensor::from_parts(vec![n, k], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Row-wise softmax of an `m × n` matrix.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = as_matrix(&x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = x.row(i, n);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|o| *o /= z);
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), out));
        let y2 = y.clone();
        Ok(self.tape.push(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y2.row(i, n);
                    let gr = g.row(i, n);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(y2.shape().to_vec(), d))]
            }),
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        if start > end || end > n {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{end} out of range for {n} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&x.row(i, n)[start..end]);
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, w], out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + end].copy_from_slice(g.row(i, w));
                }
                vec![Some(Tensor::from_parts(vec![m, n], d))]
            }),
        ))
    }

    /// Concatenates along the last axis. Inputs share every other dimension.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead: Vec<usize> = values[0].shape()[..values[0].rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", &lead, &s[..s.len() - 1]));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(v.row(i, w));
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.push(
            Tensor::from_parts(shape, out),
            parts,
            Box::new(move |g, need| {
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    if need[k] {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g.row(i, total)[offset..offset + w]);
                        }
                        res.push(Some(Tensor::from_parts(shapes[k].clone(), d)));
                    } else {
                        res.push(None);
                    }
                    offset += w;
                }
                res
            }),
        ))
    }

    /// 2-D convolution of an `h × w × c_in` input with weights
    /// `c_out × k × k × c_in` and bias `c_out`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, geom: ConvGeometry) -> Result<Var<'t>> {
        let (x, wt, b) = (self.value(), weight.value(), bias.value());
        let (h, w, c) = x.dims3()?;
        let ws = wt.shape();
        if ws.len() != 4 || ws[1] != geom.kernel || ws[2] != geom.kernel || ws[3] != c {
            return Err(Error::shape(
                "conv2d weight",
                &[ws.first().copied().unwrap_or(0), geom.kernel, geom.kernel, c],
                ws,
            ));
        }
        let co = ws[0];
        if b.len() != co {
            return Err(Error::shape("conv2d bias", &[co], b.shape()));
        }
        if h + 2 * geom.padding < geom.kernel || w + 2 * geom.padding < geom.kernel {
            return Err(Error::InvalidArgument("conv2d input smaller than kernel".into()));
        }
        let kk = geom.kernel * geom.kernel * c;
        let pointwise = geom.kernel == 1 && geom.stride == 1 && geom.padding == 0;
        let (cols, oh, ow) = if pointwise {
            (x.data().to_vec(), h, w)
        } else {
            im2col(x.data(), h, w, c, geom)
        };
        let p = oh * ow;
        let mut out = vec![0.0; p * co];
        gemm(p, kk, co, &cols, false, wt.data(), true, &mut out, false);
        for row in out.chunks_mut(co) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let w_shape = ws.to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(vec![oh, ow, co], out),
            &[self, weight, bias],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut dcols = vec![0.0; p * kk];
                    gemm(p, co, kk, g.data(), false, wt.data(), false, &mut dcols, false);
                    let d = if pointwise {
                        dcols
                    } else {
                        col2im(&dcols, h, w, c, geom)
                    };
                    Tensor::from_parts(vec![h, w, c], d)
                });
                let gw = need[1].then(|| {
                    let mut dw = vec![0.0; co * kk];
                    gemm(co, p, kk, g.data(), true, &cols, false, &mut dw, false);
                    Tensor::from_parts(w_shape.clone(), dw)
                });
                let gb = need[2].then(|| {
                    let mut db = vec![0.0; co];
                    for row in g.data().chunks(co) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::from_parts(vec![co], db)
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Nearest-neighbour resize of an `h × w × c` map to `out_h × out_w`.
    pub fn upsample_nearest(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (h, w, c) = x.dims3()?;
        let map = move |o: usize, n_out: usize, n_in: usize| ((o * n_in) / n_out).min(n_in - 1);
        let mut out = vec![0.0; out_h * out_w * c];
        for oy in 0..out_h {
            let iy = map(oy, out_h, h);
            for ox in 0..out_w {
                let ix = map(ox, out_w, w);
                let src = (iy * w + ix) * c;
                out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c]
                    .copy_from_slice(&x.data()[src..src + c]);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![out_h, out_w, c], out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; h * w * c];
                for oy in 0..out_h {
                    let iy = map(oy, out_h, h);
                    for ox in 0..out_w {
                        let ix = map(ox, out_w, w);
                        let dst = (iy * w + ix) * c;
                        for (dv, gv) in d[dst..dst + c]
                            .iter_mut()
                            .zip(&g.data()[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c])
                        {
                            *dv += gv;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![h, w, c], d))]
            }),
        ))
    }

    /// Mean over positions of a `p × c` (or `h × w × c`) value, giving `c`.
    pub fn mean_rows(self) -> Var<'t> {
        let x = self.value();
        let (p, c) = as_matrix(&x);
        let mut acc = vec![0.0; c];
        for i in 0..p {
            for (a, v) in acc.iter_mut().zip(x.row(i, c)) {
                *a += v;
            }
        }
        let inv = 1.0 / p.max(1) as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        let shape = x.shape().to_vec();
        self.tape.push(
            Tensor::from_parts(vec![c], acc),
            &[self],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(p * c);
                for _ in 0..p {
                    d.extend(g.data().iter().map(|v| v * inv));
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        )
    }

    /// `Σ p·ln(p / max(q, floor))` for two distributions of equal length.
    pub fn kl_divergence(self, q: Var<'t>, floor: f64) -> Result<Var<'t>> {
        let (pv, qv) = (self.value(), q.value());
        if pv.len() != qv.len() {
            return Err(Error::shape("kl_divergence", pv.shape(), qv.shape()));
        }
        let mut total = 0.0;
        for (&p, &qq) in pv.data().iter().zip(qv.data()) {
            if p > 0.0 {
                total += p * (p / qq.max(floor)).ln();
            }
        }
        Ok(self.tape.push(
            Tensor::scalar(total),
            &[self, q],
            Box::new(move |g, need| {
                let s = g.data()[0];
                let gp = need[0].then(|| {
                    pv.zip_map(&qv, |p, qq| {
                        if p > 0.0 {
                            s * ((p / qq.max(floor)).ln() + 1.0)
                        } else {
                            0.0
                        }
                    })
                });
                let gq = need[1].then(|| {
                    pv.zip_map(&qv, |p, qq| if qq > floor { -s * p / qq } else { 0.0 })
                });
                vec![gp, gq]
            }),
        ))
    }

    /// Straight-through gather: the output holds `codebook[indices[i]]` at
    /// row `i`. The upstream gradient is copied unchanged to `self` and
    /// scatter-added into the selected codebook rows.
    pub fn straight_through_gather(self, codebook: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
        let (x, z) = (self.value(), codebook.value());
        let (p, c) = as_matrix(&x);
        let (k, cz) = z.dims2()?;
        if c != cz || indices.len() != p {
            return Err(Error::shape("straight_through_gather", &[p, cz], &[indices.len(), c]));
        }
        let mut out = Vec::with_capacity(p * c);
        for &i in indices {
            if i >= k {
                return Err(Error::InvalidArgument(format!("slot index {i} >= {k}")));
            }
            out.extend_from_slice(z.row(i, c));
        }
        let idx = indices.to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, codebook],
            Box::new(move |g, need| {
                let gz = need[1].then(|| {
                    let mut d = vec![0.0; k * c];
                    for (row, &i) in idx.iter().enumerate() {
                        for (dv, gv) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(row, c)) {
                            *dv += gv;
                        }
                    }
                    Tensor::from_parts(vec![k, c], d)
                });
                vec![Some(g.clone()), gz]
            }),
        ))
    }

    /// Standardizes all elements to zero mean and unit (population)
    /// variance. The standard deviation is floored at `floor`; below the
    /// floor it is treated as a constant. Returns `(values, mean, std)`.
    pub fn standardize(self, floor: f64) -> (Var<'t>, f64, f64) {
        let x = self.value();
        let n = x.len().max(1) as f64;
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let raw_std = var.sqrt();
        let floored = raw_std < floor;
        let std = if floored { floor } else { raw_std };
        let y = x.map(|v| (v - mean) / std);
        let y_rc = Rc::new(y.clone());
        let var = self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let gm = g.mean();
                let d = if floored {
                    g.map(|gv| (gv - gm) / std)
                } else {
                    let gy = g
                        .data()
                        .iter()
                        .zip(y_rc.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n;
                    g.zip_map(&y_rc, |gv, yv| (gv - gm - yv * gy) / std)
                };
                vec![Some(d)]
            }),
        );
        (var, mean, std)
    }

    /// Sigmoid focal loss summed over elements. `targets` holds 1 for
    /// positives, 0 for negatives; elements with `weights` 0 are ignored.
    pub fn sigmoid_focal_loss(
        self,
        targets: &[f64],
        weights: &[f64],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var<'t>> {
        let x = self.value();
        if targets.len() != x.len() || weights.len() != x.len() {
            return Err(Error::shape("sigmoid_focal_loss", x.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        let mut dx = vec![0.0; x.len()];
        for (i, &logit) in x.data().iter().enumerate() {
            if weights[i] == 0.0 {
                continue;
            }
            let (l, d) = focal_term(logit, targets[i] > 0.5, alpha, gamma);
            total += weights[i] * l;
            dx[i] = weights[i] * d;
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::scalar(total),
            &[self],
            Box::new(move |g, _| {
                let s = g.data()[0];
                vec![Some(Tensor::from_parts(
                    shape.clone(),
                    dx.iter().map(|v| v * s).collect(),
                ))]
            }),
        ))
    }

    /// Regression penalty summed over elements where `mask` is nonzero.
    pub fn masked_penalty(self, target: &[f64], mask: &[f64], penalty: Penalty) -> Result<Var<'t>> {
        let x = self.value();
        if target.len() != x.len() || mask.len() != x.len() {
            return Err(Error::shape("masked_penalty", x.shape(), &[target.len()]));
        }
        let mut total = 0.0;
        let mut dx = vec![0.0; x.len()];
        for (i, &v) in x.data().iter().enumerate() {
            if mask[i] == 0.0 {
                continue;
            }
            let (l, d) = penalty.eval(v - target[i]);
            total += mask[i] * l;
            dx[i] = mask[i] * d;
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::scalar(total),
            &[self],
            Box::new(move |g, _| {
                let s = g.data()[0];
                vec![Some(Tensor::from_parts(
                    shape.clone(),
                    dx.iter().map(|v| v * s).collect(),
                ))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn assert_grads<F>(inputs: Vec<Tensor>, f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let report = check_gradients(&inputs, f, GradCheckOptions::default()).unwrap();
        for (i, e) in report.relative_errors.iter().enumerate() {
            assert!(*e < 1e-6, "input {i}: relative error {e}");
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut r = rng();
        for geom in [
            ConvGeometry::same(3, 1),
            ConvGeometry::same(3, 2),
            ConvGeometry::same(1, 1),
        ] {
            let x = Tensor::randn(&[5, 4, 3], &mut r);
            let w = Tensor::randn(&[2, geom.kernel, geom.kernel, 3], &mut r);
            let b = Tensor::randn(&[2], &mut r);
            assert_grads(vec![x, w, b], move |_, v| {
                Ok(v[0].conv2d(v[1], v[2], geom)?.square().sum())
            });
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut r = rng();
        let geom = ConvGeometry::same(3, 2);
        let x = Tensor::randn(&[5, 6, 2], &mut r);
        let w = Tensor::randn(&[3, 3, 3, 2], &mut r);
        let b = Tensor::randn(&[3], &mut r);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), tape.constant(b.clone()), geom)
            .unwrap()
            .value();
        let (oh, ow) = geom.output_size(5, 6);
        assert_eq!(y.shape(), &[oh, ow, 3]);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..3 {
                    let mut acc = b.data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += w.data()[((o * 3 + ky) * 3 + kx) * 2 + ci]
                                    * x.data()[((iy as usize) * 6 + ix as usize) * 2 + ci];
                            }
                        }
                    }
                    let got = y.data()[(oy * ow + ox) * 3 + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_softmax_slice_concat_gradients() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], &mut r);
        let b = Tensor::randn(&[5, 4], &mut r);
        let c = Tensor::randn(&[4, 2], &mut r);
        assert_grads(vec![a, b, c], |_, v| {
            let s = v[0].matmul_nt(v[1])?.softmax_rows()?;
            let left = s.slice_cols(0, 2)?;
            let right = s.slice_cols(2, 5)?;
            let joined = Var::concat_last(&[right, left])?;
            let proj = v[0].matmul(v[2])?;
            Ok(joined.slice_cols(0, 2)?.mul(proj)?.sum())
        });
    }

    #[test]
    fn standardize_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 2], &mut r);
        let t = Tensor::randn(&[2, 3, 2], &mut r);
        assert_grads(vec![x, t], |_, v| {
            let (s, _, _) = v[0].standardize(1e-6);
            Ok(s.mul(v[1])?.sum())
        });
    }

    #[test]
    fn kl_and_mean_rows_gradients() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], &mut r);
        let b = Tensor::randn(&[2, 4], &mut r);
        assert_grads(vec![a, b], |_, v| {
            let p = v[0].mean_rows().reshape(&[1, 4])?.softmax_rows()?;
            let q = v[1].mean_rows().reshape(&[1, 4])?.softmax_rows()?;
            p.kl_divergence(q, 1e-12)
        });
    }

    #[test]
    fn upsample_add_row_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 2], &mut r);
        let row = Tensor::randn(&[2], &mut r);
        let t = Tensor::randn(&[4, 5, 2], &mut r);
        assert_grads(vec![x, row, t], |_, v| {
            let u = v[0].add_row(v[1])?.upsample_nearest(4, 5)?;
            Ok(u.mul(v[2])?.sum())
        });
    }

    #[test]
    fn focal_and_penalty_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[6], &mut r);
        let targets = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let weights = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let reg_t: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
        let mask = [1.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_grads(vec![x], move |_, v| {
            let a = v[0].sigmoid_focal_loss(&targets, &weights, 0.25, 2.0)?;
            let b = v[0].masked_penalty(&reg_t, &mask, Penalty::SmoothL1 { beta: 1.0 / 9.0 })?;
            let c = v[0].scale(0.5).masked_penalty(&reg_t, &mask, Penalty::L1)?;
            Ok(a.add(b)?.add(c)?)
        });
    }

    #[test]
    fn backward_accumulates_shared_uses() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y);
        let gx = g.get(x).unwrap();
        assert_eq!(gx.data(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let p = tape.param(Tensor::scalar(2.0));
        let y = x.mul(p).unwrap().sum();
        let g = tape.backward(y);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[3.0]);
    }
}
