use super::gemm::gemm;
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        // im2col buffers per batch item, kept only when the kernel needs a gradient
        cols: Vec<Vec<f64>>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    AbsSum(Var),
    SquareSum(Var),
    Mse(Var, Var),
    Distance(Var, Var),
    Gram(Var),
    TotalVariation(Var),
    Reshape(Var),
    Row(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Execution record for one forward pass.
///
/// Nodes are appended in execution order, so every node's parents precede it
/// and reverse order is a valid topological order for the backward pass.
/// Gradients are retained for leaves only; `backward` accumulates into them
/// until [`Graph::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn conv_out(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if k > padded {
        return Err(dim_err!("kernel extent {k} exceeds padded input {padded}"));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::Config(format!(
            "conv output size not exact: ({padded} - {k}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// 2-D cross-correlation over `[N,C,H,W]` input with a `[K,C,kh,kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(dim_err!("conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(dim_err!("conv2d: input has {c} channels, kernel expects {kc}"));
        }
        if bs != [k] {
            return Err(dim_err!("conv2d: bias shape {bs:?}, expected [{k}]"));
        }
        let oh = conv_out(h, kh, stride, padding)?;
        let ow = conv_out(w, kw, stride, padding)?;
        let keep_cols = self.nodes[kernel.0].requires_grad;

        let rows = c * kh * kw;
        let area = oh * ow;
        let x = self.value(input).data();
        let kdata = self.value(kernel).data();
        let bdata = self.value(bias).data();
        let mut out = vec![0.0; n * k * area];
        let mut kept = Vec::new();
        let mut cols = vec![0.0; rows * area];
        for img in 0..n {
            im2col(
                &x[img * c * h * w..(img + 1) * c * h * w],
                (c, h, w),
                (kh, kw),
                stride,
                padding,
                (oh, ow),
                &mut cols,
            );
            let dst = &mut out[img * k * area..(img + 1) * k * area];
            for (ch, row) in dst.chunks_mut(area).enumerate() {
                row.fill(bdata[ch]);
            }
            gemm(k, rows, area, kdata, false, &cols, false, 1.0, dst);
            if keep_cols {
                kept.push(cols.clone());
            }
        }
        let value = Tensor::new(&[n, k, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                cols: kept,
            },
            &[input, kernel, bias],
        ))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first position in
    /// row-major order within the window.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(dim_err!("maxpool2 expects [N,C,H,W], got {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("maxpool2 needs even extents, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Mean over the spatial extents: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(dim_err!("global_avg_pool expects [N,C,H,W], got {s:?}"));
        }
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        let out = self
            .value(input)
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(value, Op::Relu(a), &[a]))
    }

    /// `y = x · Wᵀ + b` with `x: [N,in]`, `W: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 {
            return Err(dim_err!("linear expects 2-D input and weight, got {xs:?} and {ws:?}"));
        }
        let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        if ws[1] != fan_in || bs != [fan_out] {
            return Err(dim_err!(
                "linear: input {xs:?} incompatible with weight {ws:?} / bias {bs:?}"
            ));
        }
        let mut out = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            n,
            fan_in,
            fan_out,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            1.0,
            &mut out,
        );
        let value = Tensor::new(&[n, fan_out], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor {
            shape: x.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        Ok(self.push(value, Op::MulScalar(a, s), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + s);
        Ok(self.push(value, Op::AddScalar(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * v);
        Ok(self.push(value, Op::Square(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), &[a]))
    }

    /// `Σ |a_i|`, with subgradient 0 at zero.
    pub fn abs_sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().map(|v| v.abs()).sum();
        Ok(self.push(Tensor::scalar(total), Op::AbsSum(a), &[a]))
    }

    pub fn square_sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().map(|v| v * v).sum();
        Ok(self.push(Tensor::scalar(total), Op::SquareSum(a), &[a]))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let total: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(total / x.len() as f64);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// Euclidean distance `‖a − b‖₂`; its gradient at `a == b` is defined as 0.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "euclidean_distance")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let sq: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        Ok(self.push(Tensor::scalar(sq.sqrt()), Op::Distance(a, b), &[a, b]))
    }

    /// Position-averaged Gram matrix of `[C,H,W]` features: `G = F·Fᵀ / (H·W)`.
    /// The result is symmetric bit-for-bit.
    pub fn gram(&mut self, features: Var) -> Result<Var> {
        let s = self.shape(features);
        if s.len() != 3 {
            return Err(dim_err!("gram expects [C,H,W], got {s:?}"));
        }
        let (c, m) = (s[0], s[1] * s[2]);
        let f = self.value(features).data();
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            let fi = &f[i * m..(i + 1) * m];
            for j in i..c {
                let fj = &f[j * m..(j + 1) * m];
                let dot: f64 = fi.iter().zip(fj).map(|(p, q)| p * q).sum();
                let v = dot / m as f64;
                g[i * c + j] = v;
                g[j * c + i] = v;
            }
        }
        let value = Tensor::new(&[c, c], g)?;
        Ok(self.push(value, Op::Gram(features), &[features]))
    }

    /// Sum of squared differences between horizontally and vertically adjacent
    /// elements over the two trailing axes; leading axes are summed over.
    pub fn total_variation(&mut self, y: Var) -> Result<Var> {
        let s = self.shape(y);
        if s.len() < 2 {
            return Err(dim_err!("total_variation expects at least 2 axes, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut total = 0.0;
        for plane in self.value(y).data().chunks(h * w) {
            for i in 0..h {
                for j in 0..w {
                    let v = plane[i * w + j];
                    if j + 1 < w {
                        let d = plane[i * w + j + 1] - v;
                        total += d * d;
                    }
                    if i + 1 < h {
                        let d = plane[(i + 1) * w + j] - v;
                        total += d * d;
                    }
                }
            }
        }
        Ok(self.push(Tensor::scalar(total), Op::TotalVariation(y), &[y]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row `index` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || index >= s[0] {
            return Err(dim_err!("row {index} out of range for shape {s:?}"));
        }
        let d = s[1];
        let data = self.value(a).data()[index * d..(index + 1) * d].to_vec();
        Ok(self.push(Tensor::new(&[d], data)?, Op::Row(a, index), &[a]))
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Only nodes that depend on a `requires_grad` leaf receive gradients;
    /// leaves created with `requires_grad = false` are never written.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: gout,
                        })
                    }
                }
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut accum = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                cols,
            } => {
                let (xs, ks) = (shp(*input), shp(*kernel));
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (k, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = nodes[i].value.shape();
                let (oh, ow) = (os[2], os[3]);
                let (rows, area) = (c * kh * kw, oh * ow);
                if wants(*bias) {
                    accum(*bias, &mut |gb| {
                        for img in 0..n {
                            for (ch, row) in gout[img * k * area..(img + 1) * k * area]
                                .chunks(area)
                                .enumerate()
                            {
                                gb[ch] += row.iter().sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*kernel) {
                    accum(*kernel, &mut |gk| {
                        for img in 0..n {
                            let dy = &gout[img * k * area..(img + 1) * k * area];
                            gemm(k, area, rows, dy, false, &cols[img], true, 1.0, gk);
                        }
                    });
                }
                if wants(*input) {
                    let kdata = val(*kernel);
                    let mut dcols = vec![0.0; rows * area];
                    accum(*input, &mut |gx| {
                        for img in 0..n {
                            let dy = &gout[img * k * area..(img + 1) * k * area];
                            gemm(rows, k, area, kdata, true, dy, false, 0.0, &mut dcols);
                            col2im(
                                &dcols,
                                (c, h, w),
                                (kh, kw),
                                *stride,
                                *padding,
                                (oh, ow),
                                &mut gx[img * c * h * w..(img + 1) * c * h * w],
                            );
                        }
                    });
                }
            }
            Op::MaxPool2 { input, argmax } => {
                accum(*input, &mut |gx| {
                    for (g, &idx) in gout.iter().zip(argmax) {
                        gx[idx] += g;
                    }
                });
            }
            Op::GlobalAvgPool(input) => {
                let s = shp(*input);
                let area = s[2] * s[3];
                let scale = 1.0 / area as f64;
                accum(*input, &mut |gx| {
                    for (plane, g) in gx.chunks_mut(area).zip(gout) {
                        plane.iter_mut().for_each(|v| *v += g * scale);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                accum(*a, &mut |gx| {
                    for ((d, &g), &v) in gx.iter_mut().zip(gout).zip(x) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let (n, fan_in) = (shp(*input)[0], shp(*input)[1]);
                let fan_out = shp(*weight)[0];
                if wants(*bias) {
                    accum(*bias, &mut |gb| {
                        for row in gout.chunks(fan_out) {
                            gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
                        }
                    });
                }
                if wants(*weight) {
                    let x = val(*input);
                    accum(*weight, &mut |gw| gemm(fan_out, n, fan_in, gout, true, x, false, 1.0, gw));
                }
                if wants(*input) {
                    let wdata = val(*weight);
                    accum(*input, &mut |gx| gemm(n, fan_out, fan_in, gout, false, wdata, false, 1.0, gx));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accum(v, &mut |gx| gx.iter_mut().zip(gout).for_each(|(d, g)| *d += g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accum(*a, &mut |gx| gx.iter_mut().zip(gout).for_each(|(d, g)| *d += g));
                }
                if wants(*b) {
                    accum(*b, &mut |gx| gx.iter_mut().zip(gout).for_each(|(d, g)| *d -= g));
                }
            }
            Op::MulScalar(a, s) => {
                accum(*a, &mut |gx| gx.iter_mut().zip(gout).for_each(|(d, g)| *d += g * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accum(*a, &mut |gx| gx.iter_mut().zip(gout).for_each(|(d, g)| *d += g));
            }
            Op::Square(a) => {
                let x = val(*a);
                accum(*a, &mut |gx| {
                    for ((d, g), v) in gx.iter_mut().zip(gout).zip(x) {
                        *d += 2.0 * v * g;
                    }
                });
            }
            Op::Sum(a) => {
                let g = gout[0];
                accum(*a, &mut |gx| gx.iter_mut().for_each(|d| *d += g));
            }
            Op::AbsSum(a) => {
                let (g, x) = (gout[0], val(*a));
                accum(*a, &mut |gx| {
                    for (d, &v) in gx.iter_mut().zip(x) {
                        if v > 0.0 {
                            *d += g;
                        } else if v < 0.0 {
                            *d -= g;
                        }
                    }
                });
            }
            Op::SquareSum(a) => {
                let (g, x) = (gout[0], val(*a));
                accum(*a, &mut |gx| gx.iter_mut().zip(x).for_each(|(d, v)| *d += 2.0 * v * g));
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let scale = 2.0 * gout[0] / x.len() as f64;
                if wants(*a) {
                    accum(*a, &mut |gx| {
                        for ((d, p), q) in gx.iter_mut().zip(x).zip(y) {
                            *d += scale * (p - q);
                        }
                    });
                }
                if wants(*b) {
                    accum(*b, &mut |gy| {
                        for ((d, p), q) in gy.iter_mut().zip(x).zip(y) {
                            *d -= scale * (p - q);
                        }
                    });
                }
            }
            Op::Distance(a, b) => {
                let dist = nodes[i].value.data()[0];
                if dist == 0.0 {
                    // gradient defined as zero at coincident points
                    for v in [*a, *b] {
                        if wants(v) {
                            accum(v, &mut |_| {});
                        }
                    }
                    return;
                }
                let (x, y) = (val(*a), val(*b));
                let scale = gout[0] / dist;
                if wants(*a) {
                    accum(*a, &mut |gx| {
                        for ((d, p), q) in gx.iter_mut().zip(x).zip(y) {
                            *d += scale * (p - q);
                        }
                    });
                }
                if wants(*b) {
                    accum(*b, &mut |gy| {
                        for ((d, p), q) in gy.iter_mut().zip(x).zip(y) {
                            *d -= scale * (p - q);
                        }
                    });
                }
            }
            Op::Gram(f) => {
                let s = shp(*f);
                let (c, m) = (s[0], s[1] * s[2]);
                // dF = (dG + dGᵀ) · F / M
                let mut sym = vec![0.0; c * c];
                for r in 0..c {
                    for q in 0..c {
                        sym[r * c + q] = (gout[r * c + q] + gout[q * c + r]) / m as f64;
                    }
                }
                let fdata = val(*f);
                accum(*f, &mut |gf| gemm(c, c, m, &sym, false, fdata, false, 1.0, gf));
            }
            Op::TotalVariation(y) => {
                let s = shp(*y);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let g = gout[0];
                let x = val(*y);
                accum(*y, &mut |gy| {
                    for (plane, dplane) in x.chunks(h * w).zip(gy.chunks_mut(h * w)) {
                        for r in 0..h {
                            for col in 0..w {
                                let at = r * w + col;
                                if col + 1 < w {
                                    let d = 2.0 * g * (plane[at + 1] - plane[at]);
                                    dplane[at + 1] += d;
                                    dplane[at] -= d;
                                }
                                if r + 1 < h {
                                    let d = 2.0 * g * (plane[at + w] - plane[at]);
                                    dplane[at + w] += d;
                                    dplane[at] -= d;
                                }
                            }
                        }
                    }
                });
            }
            Op::Row(a, index) => {
                let d = gout.len();
                accum(*a, &mut |gx| {
                    gx[index * d..(index + 1) * d]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(p, g)| *p += g)
                });
            }
        }
    }
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let area = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * area;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    gx: &mut [f64],
) {
    let area = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * area;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[base + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item().unwrap(), 9.0);
    }

    #[test]
    fn conv_with_zero_kernel_is_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 4, 4], &(0..32).map(|i| i as f64).collect::<Vec<_>>()));
        let k = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 4, 4]);
        for (ch, plane) in g.value(y).data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][ch]));
        }
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, k, b, 1, 0), Err(Error::Dimension(_))));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        // (4 - 3) is not divisible by 2
        assert!(matches!(g.conv2d(x, k, b, 2, 0), Err(Error::Config(_))));
        let big = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, big, b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_picks_max_and_first_tie() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 4, 4], 0.7));
        let y = g.maxpool2(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap().data();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(grad, &expect);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(g.maxpool2(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn primitive_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0, 0.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);

        let a = g.constant(Tensor::vector(vec![0.5, -0.5]));
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let d = g.sub(a, z).unwrap();
        let s = g.abs_sum(d).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 1.0);

        let p = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let dist = g.euclidean_distance(p, z).unwrap();
        assert_eq!(g.value(dist).item().unwrap(), 5.0);
        let same = g.euclidean_distance(p, p).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn linear_identity_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn gram_hand_value_and_zero() {
        let mut g = Graph::new();
        let f = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let gm = g.gram(f).unwrap();
        assert_eq!(g.value(gm).data(), &[0.5]);
        let z = g.constant(Tensor::zeros(&[3, 2, 2]));
        let gz = g.gram(z).unwrap();
        assert!(g.value(gz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distance_gradient_zero_at_coincidence() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let d = g.euclidean_distance(a, b).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn abs_sum_subgradient_at_zero() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![0.0, 1.0, -2.0]));
        let s = g.abs_sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn tv_checkerboard_and_degenerate_row() {
        let mut g = Graph::new();
        let y = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let tv = g.total_variation(y).unwrap();
        assert_eq!(g.value(tv).item().unwrap(), 4.0);
        let row = g.constant(t(&[1, 3], &[0.0, 0.5, 0.5]));
        let tv = g.total_variation(row).unwrap();
        assert_eq!(g.value(tv).item().unwrap(), 0.25);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn mse_against_detached_copy_has_zero_grad() {
        let mut g = Graph::new();
        let data = t(&[2, 2], &[0.3, -1.0, 2.0, 0.25]);
        let x = g.param(data.clone());
        let detached = g.constant(data);
        let loss = g.mse(x, detached).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 4, 4], 0.5));
        let k = g.constant(Tensor::full(&[2, 1, 3, 3], 0.1));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        let s = g.square_sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(k).is_none());
        assert!(g.grad(b).is_none());
    }
}
