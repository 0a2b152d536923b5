//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so insertion order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use destnet::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::scalar(3.0).with_requires_grad(true));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

pub(crate) mod kernels;
mod params;
mod tensor;

use rand::Rng;

pub use params::{ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::geometry;
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, out_ch: usize },
    ChannelBias { x: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Dense { input: Var, weight: Var, bias: Var },
    Tanh(Var),
    Relu(Var),
    Dropout { input: Var, mask: Vec<f64> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SmoothL1 { pred: Var, target: Var },
    WarpGrid { params: Var, height: usize, width: usize },
    BilinearSample { image: Var, grid: Var },
    ProjectPoints { params: Var, points: Vec<[f64; 2]>, half_w: f64, half_h: f64 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Dense { .. } => "dense",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::WarpGrid { .. } => "generate_grid",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::ProjectPoints { .. } => "project_points",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A graph is confined to one thread while recording and differentiating;
/// it owns all node values, so it can be moved freely between threads.
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales every gradient leaving ops named `op` by 1.5 so that
    /// gradient checks can be shown to catch a broken backward rule.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Input,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.input(tensor)
    }

    /// Adds a copy of a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let stored = store.get(id);
        let value = Tensor::new(stored.shape().to_vec(), stored.data().to_vec()).expect("stored shape is valid");
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, n.value.grad()) {
            (Op::Param(id), Some(g)) => Some((*id, g)),
            _ => None,
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn elementwise(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.elementwise(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.elementwise(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.elementwise(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x`.
    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let v = self.map(x, |a| a * scale);
        self.push(v, Op::Affine { x, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape).map_err(|_| {
            Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            )
        })?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Flattens `[N, ...]` to `[N, D]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let d: usize = shape[1..].iter().product();
        self.reshape(x, &[n, d.max(1)])
    }

    /// Concatenates `[N, w_i]` matrices along columns, in the given order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim(
                    "concat",
                    format!("operand of shape {s:?} is not [{rows}, w]"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(
            v,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        ))
    }

    /// Cross-correlation of `[N,C,H,W]` with `[K,C,R,R]` (no kernel flip).
    /// Output extents use floor division: `H' = (H + 2p - R) / s + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 4 {
            return Err(Error::dim("conv2d", format!("input must be [N,C,H,W], got {is:?}")));
        }
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::dim("conv2d", format!("kernel must be [K,C,R,R], got {ks:?}")));
        }
        if ks[1] != is[1] {
            return Err(Error::dim(
                "conv2d",
                format!("axis 1 (channels): input has {}, kernel has {}", is[1], ks[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let r = ks[2];
        let (h, w) = (is[2] + 2 * padding, is[3] + 2 * padding);
        if h < r || w < r {
            return Err(Error::dim(
                "conv2d",
                format!("axes 2,3: padded raster {h}x{w} smaller than receptive field {r}"),
            ));
        }
        let geom = ConvGeom {
            channels: is[1],
            height: is[2],
            width: is[3],
            kernel: r,
            stride,
            padding,
            out_h: (h - r) / stride + 1,
            out_w: (w - r) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.data(input), is[0], self.data(kernel), ks[0], &geom);
        let v = Tensor::new(vec![is[0], ks[0], geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                geom,
                out_ch: ks[0],
            },
            &[input, kernel],
        ))
    }

    /// Adds a per-channel bias `[C]` to `[N,C,H,W]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::dim(
                "channel_bias",
                format!("bias {bs:?} does not match channels of {xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let c = b[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let v = Tensor::new(xs, data)?;
        Ok(self.push(v, Op::ChannelBias { x, bias }, &[x, bias]))
    }

    /// 2x2 non-overlapping max pooling.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("maxpool2", format!("input must be [N,C,H,W], got {s:?}")));
        }
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::dim(
                "maxpool2",
                format!("axes 2,3: spatial extent {}x{} is not even", s[2], s[3]),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.data(input), s[0] * s[1], s[2], s[3]);
        let v = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(v, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// `input [N,D] x weight [D,O] + bias [O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 2 || ws.len() != 2 {
            return Err(Error::dim(
                "dense",
                format!("expected [N,D] x [D,O], got {is:?} x {ws:?}"),
            ));
        }
        if is[1] != ws[0] {
            return Err(Error::dim(
                "dense",
                format!("inner axes differ: input axis 1 = {}, weight axis 0 = {}", is[1], ws[0]),
            ));
        }
        if bs != [ws[1]] {
            return Err(Error::dim(
                "dense",
                format!("bias {bs:?} does not match output width {}", ws[1]),
            ));
        }
        let (n, d, o) = (is[0], is[1], ws[1]);
        let mut out = vec![0.0; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.data(bias));
        }
        kernels::gemm(n, d, o, self.data(input), false, self.data(weight), false, &mut out, 1.0);
        let v = Tensor::new(vec![n, o], out)?;
        Ok(self.push(v, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x), &[x])
    }

    /// Inverted dropout: in training each element survives with probability
    /// `keep_prob` and is scaled by `1 / keep_prob`; at inference it is the
    /// identity and no random numbers are drawn.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        keep_prob: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep probability {keep_prob} outside (0, 1]")));
        }
        if !training || keep_prob == 1.0 {
            return Ok(input);
        }
        let inv = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < keep_prob { inv } else { 0.0 })
            .collect();
        let data = self.data(input).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::new(self.shape(input).to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { input, mask }, &[input]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "softmax_xent",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!("label {l} at row {i} outside [0, {k})")));
        }
        let probs = kernels::softmax_rows(self.data(logits), n, k);
        let logits_data = self.data(logits);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &logits_data[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean elementwise smooth-L1 (Huber with unit threshold).
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("smooth_l1", pred, target)?;
        let n = self.value(pred).numel() as f64;
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::SmoothL1 { pred, target }, &[pred, target]))
    }

    /// Sampling grid `[N,H,W,2]` from warp parameters `[N,8]`.
    pub fn warp_grid(&mut self, params: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(params).to_vec();
        if s.len() != 2 || s[1] != 8 {
            return Err(Error::dim("generate_grid", format!("params must be [N,8], got {s:?}")));
        }
        if height < 2 || width < 2 {
            return Err(Error::dim(
                "generate_grid",
                format!("raster {height}x{width} must be at least 2x2"),
            ));
        }
        let grid = geometry::grid_forward(self.data(params), s[0], height, width)?;
        let v = Tensor::new(vec![s[0], height, width, 2], grid)?;
        Ok(self.push(v, Op::WarpGrid { params, height, width }, &[params]))
    }

    /// Bilinear gather of `[N,C,H,W]` at grid `[N,H',W',2]` (normalized
    /// coordinates, zero padding outside the raster).
    pub fn bilinear_sample(&mut self, image: Var, grid: Var) -> Result<Var> {
        let is = self.shape(image).to_vec();
        let gs = self.shape(grid).to_vec();
        if is.len() != 4 {
            return Err(Error::dim("bilinear_sample", format!("image must be [N,C,H,W], got {is:?}")));
        }
        if gs.len() != 4 || gs[3] != 2 || gs[0] != is[0] {
            return Err(Error::dim(
                "bilinear_sample",
                format!("grid {gs:?} does not match image batch {}", is[0]),
            ));
        }
        let out = geometry::sample_forward(self.data(image), &is, self.data(grid), gs[1], gs[2]);
        let v = Tensor::new(vec![is[0], is[1], gs[1], gs[2]], out)?;
        Ok(self.push(v, Op::BilinearSample { image, grid }, &[image, grid]))
    }

    /// Maps pixel-space points through each sample's homography `H(p)` and
    /// returns pixel coordinates `[N, P, 2]` on a `width x height` raster.
    pub fn project_points(&mut self, params: Var, points_px: &[[f64; 2]], width: usize, height: usize) -> Result<Var> {
        let s = self.shape(params).to_vec();
        if s.len() != 2 || s[1] != 8 {
            return Err(Error::dim("project_points", format!("params must be [N,8], got {s:?}")));
        }
        if points_px.is_empty() {
            return Err(Error::dim("project_points", "no points"));
        }
        let half_w = (width as f64 - 1.0) / 2.0;
        let half_h = (height as f64 - 1.0) / 2.0;
        let points: Vec<[f64; 2]> = points_px
            .iter()
            .map(|p| [p[0] / half_w - 1.0, p[1] / half_h - 1.0])
            .collect();
        let norm = geometry::project_forward(self.data(params), s[0], &points)?;
        let out: Vec<f64> = norm
            .chunks(2)
            .flat_map(|c| [(c[0] + 1.0) * half_w, (c[1] + 1.0) * half_h])
            .collect();
        let v = Tensor::new(vec![s[0], points.len(), 2], out)?;
        Ok(self.push(
            v,
            Op::ProjectPoints {
                params,
                points,
                half_w,
                half_h,
            },
            &[params],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate into
    /// each leaf's gradient slot (callers zero them between steps).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut grad) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {
                    self.nodes[i].value.accumulate_grad(&grad);
                    continue;
                }
                op => {
                    if self.fault.as_deref() == Some(op.name()) {
                        grad.iter_mut().for_each(|g| *g *= 1.5);
                    }
                }
            }
            self.propagate(i, &grad, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Lazily allocated gradient buffer of a parent, or None when the
        // parent does not need one.
        fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        // Lazily allocated gradient buffer of a parent, or None when the
        // parent does not need one.
        match &nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(grad).for_each(|(x, g)| *x += g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(grad).for_each(|(x, g)| *x += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(grad).for_each(|(x, g)| *x += g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(grad).for_each(|(x, g)| *x -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, g), y) in ga.iter_mut().zip(grad).zip(vb) {
                        *x += g * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((x, g), y) in gb.iter_mut().zip(grad).zip(va) {
                        *x += g * y;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(grad).for_each(|(a, g)| *a += g * scale);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += grad[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += grad[0] / n);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(grad).for_each(|(a, g)| *a += g);
                }
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = grad.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = slot(nodes, grads, p) {
                        for r in 0..rows {
                            let src = &grad[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, g)| *a += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                out_ch,
            } => {
                let batch = nodes[input.0].value.shape()[0];
                let vin = nodes[input.0].value.data();
                let vk = nodes[kernel.0].value.data();
                let need_in = nodes[input.0].requires_grad;
                let need_k = nodes[kernel.0].requires_grad;
                // Both parents may be distinct slots of `grads`; split the borrow.
                let (mut gi, mut gk) = (None, None);
                if need_in {
                    gi = Some(grads[input.0].take().unwrap_or_else(|| vec![0.0; vin.len()]));
                }
                if need_k {
                    gk = Some(grads[kernel.0].take().unwrap_or_else(|| vec![0.0; vk.len()]));
                }
                kernels::conv2d_backward(
                    vin,
                    batch,
                    vk,
                    *out_ch,
                    geom,
                    grad,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(g) = gi {
                    grads[input.0] = Some(g);
                }
                if let Some(g) = gk {
                    grads[kernel.0] = Some(g);
                }
            }
            Op::ChannelBias { x, bias } => {
                let s = nodes[x.0].value.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(grad).for_each(|(a, g)| *a += g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for (j, chunk) in grad.chunks(plane).enumerate() {
                        gb[j % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (&idx, g) in argmax.iter().zip(grad) {
                        gx[idx] += g;
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let (n, d) = {
                    let s = nodes[input.0].value.shape();
                    (s[0], s[1])
                };
                let o = nodes[weight.0].value.shape()[1];
                let vin = nodes[input.0].value.data();
                let vw = nodes[weight.0].value.data();
                if let Some(gx) = slot(nodes, grads, *input) {
                    kernels::gemm(n, o, d, grad, false, vw, true, gx, 1.0);
                }
                if let Some(gw) = slot(nodes, grads, *weight) {
                    kernels::gemm(d, n, o, vin, true, grad, false, gw, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in grad.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((a, g), y) in gx.iter_mut().zip(grad).zip(y) {
                        *a += g * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((a, g), v) in gx.iter_mut().zip(grad).zip(vx) {
                        if *v > 0.0 {
                            *a += g;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for ((a, g), m) in gx.iter_mut().zip(grad).zip(mask) {
                        *a += g * m;
                    }
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = grad[0] / n as f64;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target } => {
                let vp = nodes[pred.0].value.data();
                let vt = nodes[target.0].value.data();
                let scale = grad[0] / vp.len() as f64;
                let deriv: Vec<f64> = vp
                    .iter()
                    .zip(vt)
                    .map(|(p, t)| {
                        let d = p - t;
                        if d.abs() < 1.0 {
                            d * scale
                        } else {
                            d.signum() * scale
                        }
                    })
                    .collect();
                if let Some(gp) = slot(nodes, grads, *pred) {
                    gp.iter_mut().zip(&deriv).for_each(|(a, d)| *a += d);
                }
                if let Some(gt) = slot(nodes, grads, *target) {
                    gt.iter_mut().zip(&deriv).for_each(|(a, d)| *a -= d);
                }
            }
            Op::WarpGrid { params, height, width } => {
                let vp = nodes[params.0].value.data();
                let n = nodes[params.0].value.shape()[0];
                if let Some(gp) = slot(nodes, grads, *params) {
                    geometry::grid_backward(vp, n, *height, *width, grad, gp);
                }
            }
            Op::BilinearSample { image, grid } => {
                let shape = nodes[image.0].value.shape().to_vec();
                let gs = nodes[grid.0].value.shape();
                let (oh, ow) = (gs[1], gs[2]);
                let vi = nodes[image.0].value.data();
                let vg = nodes[grid.0].value.data();
                let mut gi = nodes[image.0]
                    .requires_grad
                    .then(|| grads[image.0].take().unwrap_or_else(|| vec![0.0; vi.len()]));
                let mut gg = nodes[grid.0]
                    .requires_grad
                    .then(|| grads[grid.0].take().unwrap_or_else(|| vec![0.0; vg.len()]));
                geometry::sample_backward(
                    vi,
                    &shape,
                    vg,
                    oh,
                    ow,
                    grad,
                    gi.as_deref_mut(),
                    gg.as_deref_mut(),
                );
                if let Some(g) = gi {
                    grads[image.0] = Some(g);
                }
                if let Some(g) = gg {
                    grads[grid.0] = Some(g);
                }
            }
            Op::ProjectPoints {
                params,
                points,
                half_w,
                half_h,
            } => {
                let vp = nodes[params.0].value.data();
                let n = nodes[params.0].value.shape()[0];
                // Undo the pixel scaling, then backprop through the projection.
                let norm_grad: Vec<f64> = grad
                    .chunks(2)
                    .flat_map(|c| [c[0] * half_w, c[1] * half_h])
                    .collect();
                if let Some(gp) = slot(nodes, grads, *params) {
                    geometry::project_backward(vp, n, points, &norm_grad, gp);
                }
            }
        }
    }
}
