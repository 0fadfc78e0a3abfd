//! Define-by-run reverse-mode autodiff on f64 tensors.
//!
//! Gradient matching differentiates a function of gradients, so the
//! backward pass cannot be a one-shot accumulation: [`Graph::grad`] builds
//! the gradient as new graph nodes, and every backward rule is expressed
//! through the same primitive ops. Calling `grad` on a value that was
//! itself produced by `grad` therefore yields exact second-order
//! derivatives.
//!
//! Conventions: tensors are `ArrayD<f64>`, images and activations are
//! NCHW, convolutions are stride-1 valid (padding is an explicit op),
//! scalars are 0-dimensional arrays.

use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, Axis, Ix4, IxDyn};

use crate::resize::ResizePlan;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    PowConst(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ClampUnit(Var),
    SumAll(Var),
    BroadcastAll(Var),
    Dot(Var, Var),
    MulScalarVar(Var, Var),
    Conv2d(Var, Var),
    PadZero(Var, [usize; 4]),
    CropSpatial(Var, [usize; 4]),
    FlipHw(Var),
    Swap01(Var),
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    BiasAdd(Var, Var),
    SumNhw(Var),
    BroadcastNhw(Var),
    Resize(Var, usize, bool),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// A growable tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    plans: Vec<Arc<ResizePlan>>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers a resize plan for use by [`Graph::resize`] nodes.
    pub fn register_plan(&mut self, plan: Arc<ResizePlan>) -> usize {
        self.plans.push(plan);
        self.plans.len() - 1
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable constant.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// Elementwise power with a constant exponent.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| pow_eval(x, p));
        let ng = self.needs(a);
        self.push(v, Op::PowConst(a, p), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// min(max(x, 0), 1) with zero gradient outside the open interval.
    pub fn clamp_unit(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(0.0, 1.0));
        let ng = self.needs(a);
        self.push(v, Op::ClampUnit(a), ng)
    }

    /// Sum of all elements, as a 0-dim scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar(self.nodes[a.0].value.sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Fills `shape` with a scalar node's value.
    pub fn broadcast_all(&mut self, s: Var, shape: &[usize]) -> Var {
        let sv = self.scalar_value(s);
        let v = ArrayD::from_elem(IxDyn(shape), sv);
        let ng = self.needs(s);
        self.push(v, Op::BroadcastAll(s), ng)
    }

    /// Sum of elementwise products; shapes must match.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = scalar(
            self.nodes[a.0]
                .value
                .iter()
                .zip(self.nodes[b.0].value.iter())
                .map(|(x, y)| x * y)
                .sum(),
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Dot(a, b), ng)
    }

    /// Tensor times a 0-dim scalar node.
    pub fn mul_scalar_var(&mut self, t: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[t.0].value.mapv(|x| x * sv);
        let ng = self.needs(t) || self.needs(s);
        self.push(v, Op::MulScalarVar(t, s), ng)
    }

    /// Stride-1 valid convolution: x [N,Ci,H,W] * k [Co,Ci,kh,kw].
    pub fn conv2d(&mut self, x: Var, k: Var) -> Var {
        let v = conv2d_valid(&self.nodes[x.0].value, &self.nodes[k.0].value);
        let ng = self.needs(x) || self.needs(k);
        self.push(v, Op::Conv2d(x, k), ng)
    }

    /// Zero-pads the spatial axes by [top, bottom, left, right].
    pub fn pad_zero(&mut self, x: Var, pad: [usize; 4]) -> Var {
        let v = pad_zero_values(&self.nodes[x.0].value, pad);
        let ng = self.needs(x);
        self.push(v, Op::PadZero(x, pad), ng)
    }

    /// Removes [top, bottom, left, right] from the spatial axes.
    pub fn crop_spatial(&mut self, x: Var, cut: [usize; 4]) -> Var {
        let v = crop_values(&self.nodes[x.0].value, cut);
        let ng = self.needs(x);
        self.push(v, Op::CropSpatial(x, cut), ng)
    }

    pub fn flip_hw(&mut self, x: Var) -> Var {
        let v = flip_hw_values(&self.nodes[x.0].value);
        let ng = self.needs(x);
        self.push(v, Op::FlipHw(x), ng)
    }

    /// Swaps the first two axes of a 4-d tensor.
    pub fn swap01(&mut self, x: Var) -> Var {
        let v = swap01_values(&self.nodes[x.0].value);
        let ng = self.needs(x);
        self.push(v, Op::Swap01(x), ng)
    }

    /// [N, C·r², H, W] -> [N, C, rH, rW].
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let v = pixel_shuffle_values(&self.nodes[x.0].value, r);
        let ng = self.needs(x);
        self.push(v, Op::PixelShuffle(x, r), ng)
    }

    /// [N, C, rH, rW] -> [N, C·r², H, W]; exact inverse of pixel_shuffle.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let v = pixel_unshuffle_values(&self.nodes[x.0].value, r);
        let ng = self.needs(x);
        self.push(v, Op::PixelUnshuffle(x, r), ng)
    }

    /// Adds a per-channel bias b [C] to x [N,C,H,W].
    pub fn bias_add(&mut self, x: Var, b: Var) -> Var {
        let v = bias_add_values(&self.nodes[x.0].value, &self.nodes[b.0].value);
        let ng = self.needs(x) || self.needs(b);
        self.push(v, Op::BiasAdd(x, b), ng)
    }

    /// Reduces [N,C,H,W] to per-channel sums [C].
    pub fn sum_nhw(&mut self, x: Var) -> Var {
        let v = sum_nhw_values(&self.nodes[x.0].value);
        let ng = self.needs(x);
        self.push(v, Op::SumNhw(x), ng)
    }

    fn broadcast_nhw(&mut self, b: Var, shape: &[usize]) -> Var {
        let v = broadcast_nhw_values(&self.nodes[b.0].value, shape);
        let ng = self.needs(b);
        self.push(v, Op::BroadcastNhw(b), ng)
    }

    /// Applies a registered resize plan (or its transpose).
    pub fn resize(&mut self, x: Var, plan_id: usize, transpose: bool) -> Var {
        let plan = self.plans[plan_id].clone();
        let v = if transpose {
            plan.apply_nchw_transpose(&self.nodes[x.0].value)
        } else {
            plan.apply_nchw(&self.nodes[x.0].value)
        };
        let ng = self.needs(x);
        self.push(v, Op::Resize(x, plan_id, transpose), ng)
    }

    /// Same-padded stride-1 convolution for odd kernel sizes.
    pub fn conv2d_same(&mut self, x: Var, k: Var) -> Var {
        let ks = self.shape(k);
        let (kh, kw) = (ks[2], ks[3]);
        let padded = self.pad_zero(x, [kh / 2, kh / 2, kw / 2, kw / 2]);
        self.conv2d(padded, k)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let n = self.nodes[a.0].value.len() as f64;
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        let s = self.sum_all(sq);
        self.scale(s, 1.0 / n)
    }

    /// Builds gradient nodes of a scalar `output` with respect to `wrt`.
    ///
    /// Returns one Var per requested leaf; vars with no path to the output
    /// get a zero constant of their shape. The returned nodes participate
    /// in the graph, so they can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        debug_assert_eq!(self.nodes[output.0].value.len(), 1, "grad needs a scalar output");

        // Reverse topological order of the subgraph that needs gradients.
        let order = self.topo_order(output);
        let mut adjoint: Vec<Option<Var>> = vec![None; self.nodes.len()];
        let seed = self.constant(scalar(1.0));
        adjoint[output.0] = Some(seed);

        for &id in order.iter().rev() {
            let a = match adjoint[id] {
                Some(a) => a,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(x, y) => {
                    self.accumulate(&mut adjoint, x, a);
                    self.accumulate(&mut adjoint, y, a);
                }
                Op::Sub(x, y) => {
                    self.accumulate(&mut adjoint, x, a);
                    let neg = self.scale(a, -1.0);
                    self.accumulate(&mut adjoint, y, neg);
                }
                Op::Mul(x, y) => {
                    if self.needs(x) {
                        let gx = self.mul(a, y);
                        self.accumulate(&mut adjoint, x, gx);
                    }
                    if self.needs(y) {
                        let gy = self.mul(a, x);
                        self.accumulate(&mut adjoint, y, gy);
                    }
                }
                Op::Scale(x, c) => {
                    let gx = self.scale(a, c);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::AddScalar(x) => {
                    self.accumulate(&mut adjoint, x, a);
                }
                Op::PowConst(x, p) => {
                    if self.needs(x) {
                        let xp = self.pow_const(x, p - 1.0);
                        let scaled = self.scale(xp, p);
                        let gx = self.mul(a, scaled);
                        self.accumulate(&mut adjoint, x, gx);
                    }
                }
                Op::Relu(x) => {
                    if self.needs(x) {
                        let mask = self.constant(self.nodes[x.0].value.mapv(|v| {
                            if v > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }));
                        let gx = self.mul(a, mask);
                        self.accumulate(&mut adjoint, x, gx);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(x) {
                        let s = Var(id);
                        let neg = self.scale(s, -1.0);
                        let one_minus = self.add_scalar(neg, 1.0);
                        let ds = self.mul(s, one_minus);
                        let gx = self.mul(a, ds);
                        self.accumulate(&mut adjoint, x, gx);
                    }
                }
                Op::ClampUnit(x) => {
                    if self.needs(x) {
                        let mask = self.constant(self.nodes[x.0].value.mapv(|v| {
                            if v > 0.0 && v < 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }));
                        let gx = self.mul(a, mask);
                        self.accumulate(&mut adjoint, x, gx);
                    }
                }
                Op::SumAll(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let gx = self.broadcast_all(a, &shape);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::BroadcastAll(s) => {
                    let gs = self.sum_all(a);
                    self.accumulate(&mut adjoint, s, gs);
                }
                Op::Dot(x, y) => {
                    if self.needs(x) {
                        let gx = self.mul_scalar_var(y, a);
                        self.accumulate(&mut adjoint, x, gx);
                    }
                    if self.needs(y) {
                        let gy = self.mul_scalar_var(x, a);
                        self.accumulate(&mut adjoint, y, gy);
                    }
                }
                Op::MulScalarVar(t, s) => {
                    if self.needs(t) {
                        let gt = self.mul_scalar_var(a, s);
                        self.accumulate(&mut adjoint, t, gt);
                    }
                    if self.needs(s) {
                        let gs = self.dot(a, t);
                        self.accumulate(&mut adjoint, s, gs);
                    }
                }
                Op::Conv2d(x, k) => {
                    let ks = self.nodes[k.0].value.shape().to_vec();
                    let (kh, kw) = (ks[2], ks[3]);
                    if self.needs(x) {
                        let padded = self.pad_zero(a, [kh - 1, kh - 1, kw - 1, kw - 1]);
                        let flipped = self.flip_hw(k);
                        let swapped = self.swap01(flipped);
                        let gx = self.conv2d(padded, swapped);
                        self.accumulate(&mut adjoint, x, gx);
                    }
                    if self.needs(k) {
                        let xs = self.swap01(x);
                        let gs = self.swap01(a);
                        let gk_raw = self.conv2d(xs, gs);
                        let gk = self.swap01(gk_raw);
                        self.accumulate(&mut adjoint, k, gk);
                    }
                }
                Op::PadZero(x, pad) => {
                    let gx = self.crop_spatial(a, pad);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::CropSpatial(x, cut) => {
                    let gx = self.pad_zero(a, cut);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::FlipHw(x) => {
                    let gx = self.flip_hw(a);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::Swap01(x) => {
                    let gx = self.swap01(a);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::PixelShuffle(x, r) => {
                    let gx = self.pixel_unshuffle(a, r);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::PixelUnshuffle(x, r) => {
                    let gx = self.pixel_shuffle(a, r);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::BiasAdd(x, b) => {
                    if self.needs(x) {
                        self.accumulate(&mut adjoint, x, a);
                    }
                    if self.needs(b) {
                        let gb = self.sum_nhw(a);
                        self.accumulate(&mut adjoint, b, gb);
                    }
                }
                Op::SumNhw(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let gx = self.broadcast_nhw(a, &shape);
                    self.accumulate(&mut adjoint, x, gx);
                }
                Op::BroadcastNhw(b) => {
                    let gb = self.sum_nhw(a);
                    self.accumulate(&mut adjoint, b, gb);
                }
                Op::Resize(x, plan_id, transpose) => {
                    let gx = self.resize(a, plan_id, !transpose);
                    self.accumulate(&mut adjoint, x, gx);
                }
            }
        }

        wrt.iter()
            .map(|v| match adjoint[v.0] {
                Some(g) => g,
                None => {
                    let shape = self.nodes[v.0].value.raw_dim();
                    self.constant(ArrayD::zeros(shape))
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adjoint: &mut [Option<Var>], target: Var, contrib: Var) {
        if !self.needs(target) {
            return;
        }
        adjoint[target.0] = Some(match adjoint[target.0] {
            Some(existing) => self.add(existing, contrib),
            None => contrib,
        });
    }

    fn topo_order(&self, output: Var) -> Vec<usize> {
        let mut visited = vec![false; self.nodes.len()];
        let mut order = Vec::new();
        // Iterative DFS; second visit emits the node.
        let mut stack = vec![(output.0, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                order.push(id);
                continue;
            }
            if visited[id] || !self.nodes[id].needs_grad {
                continue;
            }
            visited[id] = true;
            stack.push((id, true));
            for p in self.parents(id) {
                if !visited[p.0] && self.nodes[p.0].needs_grad {
                    stack.push((p.0, false));
                }
            }
        }
        order
    }

    fn parents(&self, id: usize) -> Vec<Var> {
        match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b)
            | Op::MulScalarVar(a, b) | Op::Conv2d(a, b) | Op::BiasAdd(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::PowConst(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::ClampUnit(a)
            | Op::SumAll(a)
            | Op::BroadcastAll(a)
            | Op::PadZero(a, _)
            | Op::CropSpatial(a, _)
            | Op::FlipHw(a)
            | Op::Swap01(a)
            | Op::PixelShuffle(a, _)
            | Op::PixelUnshuffle(a, _)
            | Op::SumNhw(a)
            | Op::BroadcastNhw(a)
            | Op::Resize(a, _, _) => vec![*a],
        }
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn pow_eval(x: f64, p: f64) -> f64 {
    if p == 0.5 {
        x.sqrt()
    } else if p == -0.5 {
        1.0 / x.sqrt()
    } else if p == -1.0 {
        1.0 / x
    } else if p == 2.0 {
        x * x
    } else if p == 1.0 {
        x
    } else {
        x.powf(p)
    }
}

fn as4(x: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    x.view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

/// im2col + GEMM convolution, stride 1, no padding.
pub fn conv2d_valid(x: &ArrayD<f64>, k: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = as4(x);
    let k4 = as4(k);
    let (n, ci, h, w) = x4.dim();
    let (co, ci2, kh, kw) = k4.dim();
    assert_eq!(ci, ci2, "channel mismatch: input {ci}, kernel {ci2}");
    assert!(h >= kh && w >= kw, "kernel {kh}x{kw} larger than input {h}x{w}");
    let (ho, wo) = (h - kh + 1, w - kw + 1);

    let k_std = k4.as_standard_layout();
    let kmat = k_std.to_shape((co, ci * kh * kw)).expect("kernel reshape");

    let mut out = Array4::<f64>::zeros((n, co, ho, wo));
    let x_std = x4.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");

    let mut col = Array2::<f64>::zeros((ci * kh * kw, ho * wo));
    for ni in 0..n {
        if kh == 1 && kw == 1 {
            for c in 0..ci {
                let base = ((ni * ci) + c) * h * w;
                col.row_mut(c)
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(&xs[base..base + h * w]);
            }
        } else {
            for c in 0..ci {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = (c * kh + dy) * kw + dx;
                        let dst = col.row_mut(row);
                        let dst_slice = dst.into_slice().unwrap();
                        for y in 0..ho {
                            let base = (((ni * ci) + c) * h + (y + dy)) * w + dx;
                            dst_slice[y * wo..(y + 1) * wo]
                                .copy_from_slice(&xs[base..base + wo]);
                        }
                    }
                }
            }
        }
        let res = kmat.dot(&col);
        let res4 = res.to_shape((co, ho, wo)).expect("output reshape");
        out.index_axis_mut(Axis(0), ni).assign(&res4);
    }
    out.into_dyn()
}

fn pad_zero_values(x: &ArrayD<f64>, pad: [usize; 4]) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, c, h, w) = x4.dim();
    let [t, b, l, r] = pad;
    let mut out = Array4::<f64>::zeros((n, c, h + t + b, w + l + r));
    out.slice_mut(ndarray::s![.., .., t..t + h, l..l + w]).assign(&x4);
    out.into_dyn()
}

fn crop_values(x: &ArrayD<f64>, cut: [usize; 4]) -> ArrayD<f64> {
    let x4 = as4(x);
    let (_, _, h, w) = x4.dim();
    let [t, b, l, r] = cut;
    x4.slice(ndarray::s![.., .., t..h - b, l..w - r]).to_owned().into_dyn()
}

fn flip_hw_values(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = as4(x);
    x4.slice(ndarray::s![.., .., ..;-1, ..;-1]).to_owned().into_dyn()
}

fn swap01_values(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = as4(x);
    x4.permuted_axes([1, 0, 2, 3]).as_standard_layout().to_owned().into_dyn()
}

fn pixel_shuffle_values(x: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, crr, h, w) = x4.dim();
    assert_eq!(crr % (r * r), 0, "channels {crr} not divisible by r^2");
    let c = crr / (r * r);
    let mut out = Array4::<f64>::zeros((n, c, h * r, w * r));
    for ni in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for xw in 0..w {
                            out[(ni, ch, y * r + dy, xw * r + dx)] = x4[(ni, src_c, y, xw)];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

fn pixel_unshuffle_values(x: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, c, hr, wr) = x4.dim();
    assert!(hr % r == 0 && wr % r == 0, "spatial dims not divisible by r");
    let (h, w) = (hr / r, wr / r);
    let mut out = Array4::<f64>::zeros((n, c * r * r, h, w));
    for ni in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let dst_c = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for xw in 0..w {
                            out[(ni, dst_c, y, xw)] = x4[(ni, ch, y * r + dy, xw * r + dx)];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

fn bias_add_values(x: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, c, h, w) = x4.dim();
    assert_eq!(b.len(), c, "bias length must equal channel count");
    let mut out = x4.to_owned();
    for ni in 0..n {
        for ch in 0..c {
            let bv = b[[ch]];
            out.slice_mut(ndarray::s![ni, ch, .., ..]).mapv_inplace(|v| v + bv);
        }
    }
    let _ = (h, w);
    out.into_dyn()
}

fn sum_nhw_values(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = as4(x);
    let (n, c, _, _) = x4.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c]));
    for ch in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            acc += x4.index_axis(Axis(0), ni).index_axis(Axis(0), ch).sum();
        }
        out[[ch]] = acc;
    }
    out
}

fn broadcast_nhw_values(b: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    assert_eq!(shape.len(), 4);
    assert_eq!(b.len(), shape[1]);
    let mut out = Array4::<f64>::zeros((shape[0], shape[1], shape[2], shape[3]));
    for ni in 0..shape[0] {
        for ch in 0..shape[1] {
            out.slice_mut(ndarray::s![ni, ch, .., ..]).fill(b[[ch]]);
        }
    }
    out.into_dyn()
}
