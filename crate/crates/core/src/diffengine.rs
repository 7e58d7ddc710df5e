//! A small reverse-mode tape over image operators.
//!
//! Nodes are evaluated eagerly as they are pushed, so builders can read
//! intermediate values (job-start baselines, argmin choices) while they wire
//! the graph. [`Tape::forward`] re-evaluates everything after leaf values
//! change. Scalars are `1x1x1` images; binary ops accept a scalar on either
//! side and broadcast it, nothing else broadcasts.

use std::sync::Arc;

use crate::cem::CemOperator;
use crate::error::{Error, Result};
use crate::imagekit::{conv2d, conv2d_adjoint, downsample, upsample, BoundaryMode, Image, Rect};
use crate::kernel::Kernel;

pub type NodeId = usize;

/// Default negative slope for [`Tape::leaky_relu`].
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Const,
    /// Same kernel on every channel.
    Conv2d { input: NodeId, kernel: Arc<Kernel<f64>>, mode: BoundaryMode },
    /// Periodic multi-channel convolution. `weights` is a flat
    /// `cout x cin x k x k` node, `bias` a flat `cout` node.
    ConvLayer { input: NodeId, weights: NodeId, bias: NodeId, cout: usize, ksize: usize },
    Downsample { input: NodeId, factor: usize },
    Upsample { input: NodeId, factor: usize },
    CemLinear { input: NodeId, op: Arc<CemOperator<f64>> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    LeakyRelu(NodeId, f64),
    /// Straight-through inside `[0, 1]`, zero gradient outside.
    Clip(NodeId),
    Concat(Vec<NodeId>),
    Slice { input: NodeId, rect: Rect, c0: usize, c1: usize },
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    /// `min_k ||input - candidates[k]||^2`; `choice` is the argmin picked by
    /// the latest evaluation, lowest index on ties.
    MinDistance { input: NodeId, candidates: Arc<Vec<Vec<f64>>>, choice: usize },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Image<f64>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Image<f64>>>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::GraphShape(msg.into())
}

fn is_scalar(img: &Image<f64>) -> bool {
    img.dims() == (1, 1, 1)
}

fn scalar_img(v: f64) -> Image<f64> {
    Image::filled(1, 1, 1, v)
}

fn binary_dims(a: &Image<f64>, b: &Image<f64>, what: &str) -> Result<(usize, usize, usize)> {
    if a.same_dims(b) || is_scalar(b) {
        Ok(a.dims())
    } else if is_scalar(a) {
        Ok(b.dims())
    } else {
        Err(shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())))
    }
}

fn binary_map(a: &Image<f64>, b: &Image<f64>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Image<f64>> {
    let (w, h, c) = binary_dims(a, b, what)?;
    let n = w * h * c;
    let pick = |img: &Image<f64>, i: usize| if img.len() == 1 { img.data()[0] } else { img.data()[i] };
    let data = (0..n).map(|i| f(pick(a, i), pick(b, i))).collect();
    Image::from_vec(w, h, c, data)
}

/// Folds a broadcast gradient back onto an operand's shape.
fn reduce_to(grad: Image<f64>, target: &Image<f64>) -> Image<f64> {
    if is_scalar(target) && !is_scalar(&grad) {
        scalar_img(grad.sum())
    } else {
        grad
    }
}

/// Periodic multi-channel convolution plus bias; the forward rule of [`Op::ConvLayer`].
pub fn conv_layer_forward(
    x: &Image<f64>,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    ksize: usize,
) -> Image<f64> {
    let (w, h, cin) = x.dims();
    let c = (ksize / 2) as isize;
    let mut out = Image::zeros(w, h, cout);
    for o in 0..cout {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = x.plane(i);
            for a in 0..ksize {
                for b in 0..ksize {
                    let wt = weights[((o * cin + i) * ksize + a) * ksize + b];
                    if wt == 0.0 {
                        continue;
                    }
                    let dy = a as isize - c;
                    let dx = b as isize - c;
                    for yy in 0..h {
                        let sy = (yy as isize - dy).rem_euclid(h as isize) as usize;
                        let row = &src[sy * w..(sy + 1) * w];
                        let dst = &mut plane[yy * w..(yy + 1) * w];
                        for (xx, d) in dst.iter_mut().enumerate() {
                            let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                            *d += wt * row[sx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d weights, d bias)`.
fn conv_layer_backward(
    x: &Image<f64>,
    weights: &[f64],
    g: &Image<f64>,
    cout: usize,
    ksize: usize,
) -> (Image<f64>, Vec<f64>, Vec<f64>) {
    let (w, h, cin) = x.dims();
    let c = (ksize / 2) as isize;
    let mut gx = Image::zeros(w, h, cin);
    let mut gw = vec![0.0; weights.len()];
    let gb: Vec<f64> = (0..cout).map(|o| g.plane(o).iter().sum()).collect();
    for o in 0..cout {
        let gp = g.plane(o);
        for i in 0..cin {
            let src = x.plane(i);
            for a in 0..ksize {
                for b in 0..ksize {
                    let widx = ((o * cin + i) * ksize + a) * ksize + b;
                    let wt = weights[widx];
                    let dy = a as isize - c;
                    let dx = b as isize - c;
                    let mut acc = 0.0;
                    let dst = gx.plane_mut(i);
                    for yy in 0..h {
                        let sy = (yy as isize - dy).rem_euclid(h as isize) as usize;
                        for xx in 0..w {
                            let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                            let gv = gp[yy * w + xx];
                            acc += gv * src[sy * w + sx];
                            dst[sy * w + sx] += wt * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn value(&self, id: NodeId) -> &Image<f64> {
        &self.nodes[id].value
    }

    /// The single sample of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data()[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Image<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(shape_err(format!("node {id} does not exist yet")))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for i in inputs_of(&op) {
            self.check_id(i)?;
        }
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            other => inputs_of(other).iter().any(|&i| self.nodes[i].needs_grad),
        };
        let mut op = op;
        let value = self.eval(&mut op)?;
        self.nodes.push(Node { op, value, needs_grad });
        Ok(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Image<f64>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: true });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Image<f64>) -> NodeId {
        self.nodes.push(Node { op: Op::Const, value, needs_grad: false });
        self.nodes.len() - 1
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(scalar_img(v))
    }

    /// Replaces a leaf's value; call [`Self::forward`] afterwards.
    pub fn set_value(&mut self, id: NodeId, value: Image<f64>) -> Result<()> {
        self.check_id(id)?;
        let node = &mut self.nodes[id];
        if !matches!(node.op, Op::Leaf | Op::Const) {
            return Err(shape_err(format!("node {id} is computed, not an input")));
        }
        if !node.value.same_dims(&value) {
            return Err(shape_err(format!("node {id}: {:?} vs {:?}", node.value.dims(), value.dims())));
        }
        node.value = value;
        Ok(())
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: Arc<Kernel<f64>>, mode: BoundaryMode) -> Result<NodeId> {
        self.push(Op::Conv2d { input, kernel, mode })
    }

    pub fn conv_layer(&mut self, input: NodeId, weights: NodeId, bias: NodeId, cout: usize, ksize: usize) -> Result<NodeId> {
        self.push(Op::ConvLayer { input, weights, bias, cout, ksize })
    }

    pub fn downsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::Downsample { input, factor })
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::Upsample { input, factor })
    }

    pub fn cem_linear(&mut self, input: NodeId, op: Arc<CemOperator<f64>>) -> Result<NodeId> {
        self.push(Op::CemLinear { input, op })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Offset(a, c))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub fn clip(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Clip(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Spatial crop of channels `c0..c1`.
    pub fn slice(&mut self, input: NodeId, rect: Rect, c0: usize, c1: usize) -> Result<NodeId> {
        self.push(Op::Slice { input, rect, c0, c1 })
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ReduceSum(a))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ReduceMean(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }

    pub fn min_distance(&mut self, input: NodeId, candidates: Arc<Vec<Vec<f64>>>) -> Result<NodeId> {
        self.push(Op::MinDistance { input, candidates, choice: 0 })
    }

    /// `sum |a|`
    pub fn l1(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.abs(a)?;
        self.reduce_sum(t)
    }

    /// `sum a^2`
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.square(a)?;
        self.reduce_sum(t)
    }

    /// `a - mean(a)`
    pub fn center(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.reduce_mean(a)?;
        self.sub(a, m)
    }

    /// Population variance over every sample of `a`.
    pub fn variance(&mut self, a: NodeId) -> Result<NodeId> {
        let c = self.center(a)?;
        let s = self.square(c)?;
        self.reduce_mean(s)
    }

    fn eval(&self, op: &mut Op) -> Result<Image<f64>> {
        let v = |id: NodeId| &self.nodes[id].value;
        Ok(match op {
            Op::Leaf | Op::Const => unreachable!("inputs are pushed directly"),
            Op::Conv2d { input, kernel, mode } => conv2d(v(*input), kernel, *mode),
            Op::ConvLayer { input, weights, bias, cout, ksize } => {
                let (wv, bv) = (v(*weights), v(*bias));
                let cin = v(*input).channels();
                let need = *cout * cin * *ksize * *ksize;
                if *ksize % 2 == 0 || wv.len() != need || bv.len() != *cout {
                    return Err(shape_err(format!(
                        "conv layer {cin}->{cout} k{ksize}: {} weights, {} biases",
                        wv.len(),
                        bv.len()
                    )));
                }
                conv_layer_forward(v(*input), wv.data(), bv.data(), *cout, *ksize)
            }
            Op::Downsample { input, factor } => {
                downsample(v(*input), *factor).map_err(|e| shape_err(e.to_string()))?
            }
            Op::Upsample { input, factor } => {
                if *factor == 0 {
                    return Err(shape_err("upsample factor 0"));
                }
                upsample(v(*input), *factor)
            }
            Op::CemLinear { input, op } => op.cem_linear(v(*input)).map_err(|e| shape_err(e.to_string()))?,
            Op::Add(a, b) => binary_map(v(*a), v(*b), "add", |x, y| x + y)?,
            Op::Sub(a, b) => binary_map(v(*a), v(*b), "sub", |x, y| x - y)?,
            Op::Mul(a, b) => binary_map(v(*a), v(*b), "mul", |x, y| x * y)?,
            Op::Div(a, b) => binary_map(v(*a), v(*b), "div", |x, y| x / y)?,
            Op::Scale(a, s) => v(*a).scale(*s),
            Op::Offset(a, c) => v(*a).map(|x| x + *c),
            Op::LeakyRelu(a, s) => v(*a).map(|x| if x >= 0.0 { x } else { *s * x }),
            Op::Clip(a) => v(*a).clip01(),
            Op::Concat(parts) => {
                let imgs: Vec<&Image<f64>> = parts.iter().map(|&p| v(p)).collect();
                Image::concat_channels(&imgs).map_err(|e| shape_err(e.to_string()))?
            }
            Op::Slice { input, rect, c0, c1 } => {
                let src = v(*input);
                if c0 >= c1 || *c1 > src.channels() || !rect.fits_in(src.width(), src.height()) {
                    return Err(shape_err(format!(
                        "slice {rect:?} channels {c0}..{c1} of {:?}",
                        src.dims()
                    )));
                }
                Image::from_fn(rect.width, rect.height, *c1 - *c0, |c, y, x| {
                    src.get(c + *c0, y + rect.y, x + rect.x)
                })
            }
            Op::ReduceSum(a) => scalar_img(v(*a).sum()),
            Op::ReduceMean(a) => {
                let x = v(*a);
                if x.is_empty() {
                    return Err(shape_err("mean of an empty raster"));
                }
                scalar_img(x.sum() / x.len() as f64)
            }
            Op::Abs(a) => v(*a).map(f64::abs),
            Op::Square(a) => v(*a).map(|x| x * x),
            Op::Sqrt(a) => v(*a).map(f64::sqrt),
            Op::MinDistance { input, candidates, choice } => {
                let x = v(*input).data();
                if candidates.is_empty() {
                    return Err(shape_err("min-distance over an empty candidate set"));
                }
                let mut best = (f64::INFINITY, 0usize);
                for (k, cand) in candidates.iter().enumerate() {
                    if cand.len() != x.len() {
                        return Err(shape_err(format!("candidate {k} has {} samples, input {}", cand.len(), x.len())));
                    }
                    let d: f64 = x.iter().zip(cand).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                *choice = best.1;
                scalar_img(best.0)
            }
        })
    }

    /// Re-evaluates every computed node in order.
    pub fn forward(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf | Op::Const) {
                continue;
            }
            let mut op = self.nodes[id].op.clone();
            let value = self.eval(&mut op)?;
            let node = &mut self.nodes[id];
            node.op = op;
            node.value = value;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Image<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot(&mut self, id: NodeId) -> &mut Image<f64> {
        let (w, h, c) = self.nodes[id].value.dims();
        self.grads[id].get_or_insert_with(|| Image::zeros(w, h, c))
    }

    /// Populates gradients of `root` with respect to every node that depends
    /// on a leaf. `root` must be scalar.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check_id(root)?;
        if !is_scalar(&self.nodes[root].value) {
            return Err(shape_err(format!("backward root has dims {:?}", self.nodes[root].value.dims())));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root].needs_grad {
            return Ok(());
        }
        self.grads[root] = Some(scalar_img(1.0));
        for id in (0..=root).rev() {
            let Some(g) = self.grads[id].clone() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.backprop(id, &op, g)?;
        }
        Ok(())
    }

    fn backprop(&mut self, id: NodeId, op: &Op, g: Image<f64>) -> Result<()> {
        let val = |t: &Self, n: NodeId| t.nodes[n].value.clone();
        match op {
            Op::Leaf | Op::Const => {}
            Op::Conv2d { input, kernel, mode } => {
                let gi = conv2d_adjoint(&g, kernel, *mode);
                self.accumulate(*input, gi);
            }
            Op::ConvLayer { input, weights, bias, cout, ksize } => {
                let x = &self.nodes[*input].value;
                let w = self.nodes[*weights].value.data();
                let (gx, gw, gb) = conv_layer_backward(x, w, &g, *cout, *ksize);
                let wdims = self.nodes[*weights].value.dims();
                let bdims = self.nodes[*bias].value.dims();
                self.accumulate(*input, gx);
                self.accumulate(*weights, Image::from_vec(wdims.0, wdims.1, wdims.2, gw)?);
                self.accumulate(*bias, Image::from_vec(bdims.0, bdims.1, bdims.2, gb)?);
            }
            Op::Downsample { input, factor } => self.accumulate(*input, upsample(&g, *factor)),
            Op::Upsample { input, factor } => self.accumulate(*input, downsample(&g, *factor)?),
            Op::CemLinear { input, op } => {
                let gi = op.cem_adjoint(&g)?;
                self.accumulate(*input, gi);
            }
            Op::Add(a, b) => {
                let (av, bv) = (val(self, *a), val(self, *b));
                self.accumulate(*a, reduce_to(g.clone(), &av));
                self.accumulate(*b, reduce_to(g, &bv));
            }
            Op::Sub(a, b) => {
                let (av, bv) = (val(self, *a), val(self, *b));
                self.accumulate(*a, reduce_to(g.clone(), &av));
                self.accumulate(*b, reduce_to(g.scale(-1.0), &bv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(self, *a), val(self, *b));
                let ga = binary_map(&g, &bv, "mul grad", |gg, y| gg * y)?;
                let gb = binary_map(&g, &av, "mul grad", |gg, x| gg * x)?;
                self.accumulate(*a, reduce_to(ga, &av));
                self.accumulate(*b, reduce_to(gb, &bv));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(self, *a), val(self, *b));
                let ga = binary_map(&g, &bv, "div grad", |gg, y| gg / y)?;
                let q = binary_map(&av, &bv, "div grad", |x, y| -x / (y * y))?;
                let gb = binary_map(&g, &q, "div grad", |gg, qq| gg * qq)?;
                self.accumulate(*a, reduce_to(ga, &av));
                self.accumulate(*b, reduce_to(gb, &bv));
            }
            Op::Scale(a, s) => self.accumulate(*a, g.scale(*s)),
            Op::Offset(a, _) => self.accumulate(*a, g),
            Op::LeakyRelu(a, s) => {
                let x = val(self, *a);
                let gi = g.zip_map(&x, |gg, xx| if xx >= 0.0 { gg } else { *s * gg })?;
                self.accumulate(*a, gi);
            }
            Op::Clip(a) => {
                let x = val(self, *a);
                let gi = g.zip_map(&x, |gg, xx| if (0.0..=1.0).contains(&xx) { gg } else { 0.0 })?;
                self.accumulate(*a, gi);
            }
            Op::Concat(parts) => {
                let mut c = 0;
                for &p in parts {
                    let n = self.nodes[p].value.channels();
                    let (w, h) = (g.width(), g.height());
                    let part = Image::from_vec(w, h, n, g.data()[c * w * h..(c + n) * w * h].to_vec())?;
                    self.accumulate(p, part);
                    c += n;
                }
            }
            Op::Slice { input, rect, c0, .. } => {
                if !self.nodes[*input].needs_grad {
                    return Ok(());
                }
                let slot = self.grad_slot(*input);
                for c in 0..g.channels() {
                    for y in 0..rect.height {
                        for x in 0..rect.width {
                            let i = slot.index(c + *c0, y + rect.y, x + rect.x);
                            slot.data_mut()[i] += g.get(c, y, x);
                        }
                    }
                }
            }
            Op::ReduceSum(a) => {
                let (w, h, c) = self.nodes[*a].value.dims();
                self.accumulate(*a, Image::filled(w, h, c, g.data()[0]));
            }
            Op::ReduceMean(a) => {
                let (w, h, c) = self.nodes[*a].value.dims();
                let n = (w * h * c) as f64;
                self.accumulate(*a, Image::filled(w, h, c, g.data()[0] / n));
            }
            Op::Abs(a) => {
                let x = val(self, *a);
                let gi = g.zip_map(&x, |gg, xx| if xx > 0.0 { gg } else if xx < 0.0 { -gg } else { 0.0 })?;
                self.accumulate(*a, gi);
            }
            Op::Square(a) => {
                let x = val(self, *a);
                let gi = g.zip_map(&x, |gg, xx| 2.0 * xx * gg)?;
                self.accumulate(*a, gi);
            }
            Op::Sqrt(a) => {
                let r = self.nodes[id].value.clone();
                let gi = g.zip_map(&r, |gg, rr| if rr > 0.0 { 0.5 * gg / rr } else { 0.0 })?;
                self.accumulate(*a, gi);
            }
            Op::MinDistance { input, candidates, choice } => {
                let x = val(self, *input);
                let cand = &candidates[*choice];
                let s = 2.0 * g.data()[0];
                let data = x.data().iter().zip(cand).map(|(a, b)| s * (a - b)).collect();
                let (w, h, c) = x.dims();
                self.accumulate(*input, Image::from_vec(w, h, c, data)?);
            }
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Const => vec![],
        Op::Conv2d { input, .. }
        | Op::Downsample { input, .. }
        | Op::Upsample { input, .. }
        | Op::CemLinear { input, .. }
        | Op::Slice { input, .. }
        | Op::MinDistance { input, .. } => vec![*input],
        Op::ConvLayer { input, weights, bias, .. } => vec![*input, *weights, *bias],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Offset(a, _)
        | Op::LeakyRelu(a, _)
        | Op::Clip(a)
        | Op::ReduceSum(a)
        | Op::ReduceMean(a)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Sqrt(a) => vec![*a],
        Op::Concat(parts) => parts.clone(),
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Builds the objective `build(tape, leaf)` around a copy of `leaf` and
/// checks its gradient coordinate by coordinate.
pub fn grad_check<F>(build: F, leaf: &Image<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |img: Image<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.leaf(img);
        let root = build(&mut t, l)?;
        Ok(t.scalar_value(root))
    };
    let mut tape = Tape::new();
    let l = tape.leaf(leaf.clone());
    let root = build(&mut tape, l)?;
    tape.backward(root)?;
    let (w, h, c) = leaf.dims();
    let analytic = tape.grad(l).cloned().unwrap_or_else(|| Image::zeros(w, h, c)).into_vec();
    let mut numeric = Vec::with_capacity(leaf.len());
    let mut worst = (0.0f64, 0usize);
    for i in 0..leaf.len() {
        let mut plus = leaf.clone();
        plus.data_mut()[i] += step;
        let mut minus = leaf.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i];
        let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
        tol,
        passed: worst.0 <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::bicubic_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_tape_returns_constant() {
        let mut t = Tape::new();
        let c = t.scalar(3.25);
        t.forward().unwrap();
        assert_eq!(t.scalar_value(c), 3.25);
    }

    #[test]
    fn l1_is_hand_sum() {
        let mut t = Tape::new();
        let u = t.constant(Image::from_vec(2, 1, 1, vec![-1.5, 0.25]).unwrap());
        let r = t.l1(u).unwrap();
        assert_eq!(t.scalar_value(r), 1.75);
    }

    #[test]
    fn sum_gradient_is_ones_and_square_gradient_is_double() {
        let u = random_image(4, 3, 2, 1);
        let mut t = Tape::new();
        let l = t.leaf(u.clone());
        let s = t.reduce_sum(l).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(l).unwrap().data().iter().all(|&g| g == 1.0));

        let mut t = Tape::new();
        let l = t.leaf(u.clone());
        let s = t.sum_squares(l).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(l).unwrap().max_abs_diff(&u.scale(2.0)).unwrap() <= 1e-12);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let l = t.leaf(random_image(2, 2, 1, 2));
        assert!(matches!(t.backward(l), Err(Error::GraphShape(_))));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(random_image(2, 2, 1, 3));
        let b = t.leaf(random_image(3, 2, 1, 4));
        assert!(matches!(t.add(a, b), Err(Error::GraphShape(_))));
    }

    #[test]
    fn forward_tracks_new_leaf_values() {
        let mut t = Tape::new();
        let l = t.leaf(Image::filled(2, 2, 1, 1.0));
        let s = t.sum_squares(l).unwrap();
        t.set_value(l, Image::filled(2, 2, 1, 2.0)).unwrap();
        t.forward().unwrap();
        assert_eq!(t.scalar_value(s), 16.0);
    }

    #[test]
    fn backward_leaves_values_unchanged() {
        let mut t = Tape::new();
        let l = t.leaf(random_image(6, 6, 1, 5));
        let sq = t.square(l).unwrap();
        let r = t.reduce_mean(sq).unwrap();
        let before: Vec<Image<f64>> = (0..t.len()).map(|i| t.value(i).clone()).collect();
        t.backward(r).unwrap();
        for (i, v) in before.iter().enumerate() {
            assert_eq!(t.value(i), v);
        }
        for i in [l, sq] {
            assert_eq!(t.grad(i).unwrap().dims(), t.value(i).dims());
        }
    }

    #[test]
    fn linear_graph_checks_to_rounding() {
        let k = Arc::new(bicubic_kernel::<f64>(2));
        let rep = grad_check(
            |t, l| {
                let c = t.conv2d(l, k.clone(), BoundaryMode::Periodic)?;
                let d = t.downsample(c, 2)?;
                let s = t.scale(d, 1.7)?;
                t.reduce_sum(s)
            },
            &random_image(6, 6, 1, 6),
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }

    #[test]
    fn five_op_graph_matches_finite_differences() {
        let k = Arc::new(Kernel::gaussian(0.8, 1).unwrap());
        let w = random_image(6, 6, 1, 8);
        let rep = grad_check(
            |t, l| {
                let c = t.conv2d(l, k.clone(), BoundaryMode::Replicate)?;
                let a = t.leaky_relu(c, LEAKY_SLOPE)?;
                let wn = t.constant(w.clone());
                let m = t.mul(a, wn)?;
                let sq = t.square(m)?;
                t.reduce_sum(sq)
            },
            &random_image(6, 6, 1, 7),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }

    #[test]
    fn every_elementwise_op_checks() {
        let x = random_image(6, 6, 2, 9).map(|v| 0.5 + 0.4 * v);
        let rep = grad_check(
            |t, l| {
                let up = t.upsample(l, 2)?;
                let dn = t.downsample(up, 2)?;
                let s = t.sqrt(dn)?;
                let sl = t.slice(s, Rect::new(1, 1, 4, 3), 0, 2)?;
                let cat = t.concat(&[sl, sl])?;
                let v = t.variance(cat)?;
                let a = t.abs(l)?;
                let o = t.offset(a, 0.3)?;
                let q = t.div(o, v)?;
                let cl = t.clip(q)?;
                t.reduce_mean(cl)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }

    #[test]
    fn conv_layer_checks_for_input_and_weights() {
        let x = random_image(5, 4, 2, 10);
        let w = random_image(3 * 2 * 9, 1, 1, 11);
        let b = random_image(3, 1, 1, 12);
        let rep = grad_check(
            |t, l| {
                let wn = t.constant(w.clone());
                let bn = t.constant(b.clone());
                let c = t.conv_layer(l, wn, bn, 3, 3)?;
                t.sum_squares(c)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
        let rep = grad_check(
            |t, l| {
                let xn = t.constant(x.clone());
                let bn = t.constant(b.clone());
                let c = t.conv_layer(xn, l, bn, 3, 3)?;
                t.sum_squares(c)
            },
            &w,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }

    #[test]
    fn cem_linear_backward_is_adjoint() {
        let op = Arc::new(CemOperator::new(bicubic_kernel(2), 2, 16, 16, BoundaryMode::Replicate).unwrap());
        let w = random_image(16, 16, 1, 13);
        let rep = grad_check(
            |t, l| {
                let p = t.cem_linear(l, op.clone())?;
                let wn = t.constant(w.clone());
                let m = t.mul(p, wn)?;
                t.reduce_sum(m)
            },
            &random_image(16, 16, 1, 14),
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }

    #[test]
    fn clip_is_straight_through_inside_only() {
        let x = Image::from_vec(3, 1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        let mut t = Tape::new();
        let l = t.leaf(x);
        let c = t.clip(l).unwrap();
        let s = t.reduce_sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(l).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn min_distance_follows_forward_argmin() {
        let cands = Arc::new(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        let mut t = Tape::new();
        let l = t.leaf(Image::from_vec(2, 1, 1, vec![0.9, 0.8]).unwrap());
        let d = t.min_distance(l, cands).unwrap();
        assert!((t.scalar_value(d) - 0.05).abs() < 1e-15);
        assert!(matches!(t.node(d).op, Op::MinDistance { choice: 1, .. }));
        t.backward(d).unwrap();
        let g = t.grad(l).unwrap().data();
        assert!((g[0] + 0.2).abs() < 1e-12 && (g[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn gradients_of_a_sum_add_up() {
        let x = random_image(4, 4, 1, 15);
        let grad_of = |f: &dyn Fn(&mut Tape, NodeId) -> Result<NodeId>| {
            let mut t = Tape::new();
            let l = t.leaf(x.clone());
            let r = f(&mut t, l).unwrap();
            t.backward(r).unwrap();
            t.grad(l).unwrap().clone()
        };
        let f1 = |t: &mut Tape, l| t.sum_squares(l);
        let f2 = |t: &mut Tape, l| t.l1(l);
        let both = |t: &mut Tape, l| {
            let a = t.sum_squares(l)?;
            let b = t.l1(l)?;
            t.add(a, b)
        };
        let sum = grad_of(&f1).add(&grad_of(&f2)).unwrap();
        assert_eq!(grad_of(&both), sum);
    }
}
