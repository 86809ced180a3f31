//! Dense f64 tensors with reverse-mode differentiation on a Wengert tape.
//!
//! The tape is rebuilt for every forward pass and tensors are never mutated
//! once written by their producing op, so the node order is always a valid
//! topological order and the reverse sweep in [`Tape::backward`] is a plain
//! reverse iteration.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stride must be positive")]
    ZeroStride,
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("class id {id} out of range for {n} classes")]
    InvalidClass { id: usize, n: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length must match shape"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, padding: usize },
    Relu { input: Var },
    Bilinear { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    SpatialMean { input: Var },
    Pick { input: Var, index: usize },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    CrossEntropy1d { logits: Var, target: usize, probs: Vec<f64> },
    MarginLoss { logits: Var, clean: usize, rival: usize },
    NegLogL2 { input: Var, norm: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the swept loss with respect to `var`. A var not reachable
    /// from the loss has an exactly-zero gradient.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }
}

/// Recording tape for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_GUARD: f64 = 1e-12;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Cross-correlation plus bias. Input H x W x Cin, kernel k x k x Cin x Cout,
    /// bias Cout; output H' x W' x Cout.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        let bshape = self.value(bias).shape().to_vec();
        if ishape.len() != 3 || kshape.len() != 4 || bshape.len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d expects input [H,W,Cin], kernel [k,k,Cin,Cout], bias [Cout]; got {ishape:?}, {kshape:?}, {bshape:?}"
            )));
        }
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let k = kshape[0];
        if kshape[1] != k {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d kernel must be square, got {kshape:?}"
            )));
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if kshape[2] != cin {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d kernel expects {cin} input channels, got {}",
                kshape[2]
            )));
        }
        let cout = kshape[3];
        if bshape[0] != cout {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias expects {cout} channels, got {}",
                bshape[0]
            )));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input {h}x{w} too small for kernel {k} with padding {padding}"
            )));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;

        let x = self.value(input).data();
        let ker = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let base_y = (oy * stride) as isize - padding as isize;
                let base_x = (ox * stride) as isize - padding as isize;
                let o_off = (oy * ow + ox) * cout;
                out[o_off..o_off + cout].copy_from_slice(b);
                for ky in 0..k {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i_off = (iy as usize * w + ix as usize) * cin;
                        let k_off = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[i_off + ci];
                            let kb = k_off + ci * cout;
                            for co in 0..cout {
                                out[o_off + co] += xv * ker[kb + co];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv2d { input, kernel, bias, stride, padding },
            Tensor::new(vec![oh, ow, cout], out),
        ))
    }

    /// Elementwise max(0, v); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let value = Tensor::new(
            self.value(input).shape().to_vec(),
            self.value(input).data().iter().map(|&v| v.max(0.0)).collect(),
        );
        self.push(Op::Relu { input }, value)
    }

    /// Bilinear interpolation with half-pixel centers and edge clamping.
    pub fn bilinear_resize(
        &mut self,
        input: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let ishape = self.value(input).shape().to_vec();
        if ishape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "bilinear_resize expects [H,W,C], got {ishape:?}"
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid("output dimensions must be >= 1".into()));
        }
        let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
        let x = self.value(input).data();
        let mut out = vec![0.0; out_h * out_w * c];
        for oy in 0..out_h {
            let (y0, y1, wy) = sample_axis(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, wx) = sample_axis(ox, out_w, w);
                let o = (oy * out_w + ox) * c;
                for ch in 0..c {
                    let v00 = x[(y0 * w + x0) * c + ch];
                    let v01 = x[(y0 * w + x1) * c + ch];
                    let v10 = x[(y1 * w + x0) * c + ch];
                    let v11 = x[(y1 * w + x1) * c + ch];
                    out[o + ch] = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                }
            }
        }
        Ok(self.push(Op::Bilinear { input }, Tensor::new(vec![out_h, out_w, c], out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = Tensor::new(
            self.value(input).shape().to_vec(),
            self.value(input).data().iter().map(|v| v * factor).collect(),
        );
        self.push(Op::Scale { input, factor }, value)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Op::Sum { input }, Tensor::scalar(s))
    }

    /// Spatial mean over H and W: [H,W,N] -> [N].
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "spatial_mean expects [H,W,N], got {shape:?}"
            )));
        }
        let (h, w, n) = (shape[0], shape[1], shape[2]);
        let x = self.value(input).data();
        let mut out = vec![0.0; n];
        for p in 0..h * w {
            for s in 0..n {
                out[s] += x[p * n + s];
            }
        }
        let inv = 1.0 / (h * w) as f64;
        for v in &mut out {
            *v *= inv;
        }
        Ok(self.push(Op::SpatialMean { input }, Tensor::new(vec![n], out)))
    }

    /// Select one element of a 1-D tensor as a scalar.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var, TensorError> {
        let n = self.value(input).numel();
        if index >= n {
            return Err(TensorError::InvalidClass { id: index, n });
        }
        let v = self.value(input).data()[index];
        Ok(self.push(Op::Pick { input, index }, Tensor::scalar(v)))
    }

    /// Per-pixel softmax + NLL of the target class, averaged over (weighted)
    /// pixels. Zero total weight yields a zero loss with zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        target: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var, TensorError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax_cross_entropy expects [H,W,N] logits, got {shape:?}"
            )));
        }
        let (h, w, n) = (shape[0], shape[1], shape[2]);
        let pixels = h * w;
        if target.len() != pixels {
            return Err(TensorError::ShapeMismatch(format!(
                "target has {} entries for {pixels} pixels",
                target.len()
            )));
        }
        if let Some(ws) = weights {
            if ws.len() != pixels {
                return Err(TensorError::ShapeMismatch(format!(
                    "pixel_weights has {} entries for {pixels} pixels",
                    ws.len()
                )));
            }
        }
        for &t in target {
            if t >= n {
                return Err(TensorError::InvalidClass { id: t, n });
            }
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; pixels * n];
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        for p in 0..pixels {
            let row = &x[p * n..(p + 1) * n];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for s in 0..n {
                let e = (row[s] - m).exp();
                probs[p * n + s] = e;
                z += e;
            }
            for s in 0..n {
                probs[p * n + s] /= z;
            }
            let wgt = weights.map_or(1.0, |ws| ws[p]);
            total_weight += wgt;
            // log-space: -(z_t - m - ln z) stays finite when p_t underflows
            loss -= wgt * (row[target[p]] - m - z.ln());
        }
        let loss = if total_weight > 0.0 { loss / total_weight } else { 0.0 };
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                probs,
                total_weight,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Softmax cross entropy on a 1-D logit vector.
    pub fn cross_entropy_1d(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let n = self.value(logits).numel();
        if target >= n {
            return Err(TensorError::InvalidClass { id: target, n });
        }
        let row = self.value(logits).data().to_vec();
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(row[target] - m - z.ln());
        Ok(self.push(Op::CrossEntropy1d { logits, target, probs }, Tensor::scalar(loss)))
    }

    /// Hinge margin max(z_clean - max_{j != clean} z_j, 0) on 1-D logits.
    pub fn margin_loss(&mut self, logits: Var, clean: usize) -> Result<Var, TensorError> {
        let n = self.value(logits).numel();
        if clean >= n {
            return Err(TensorError::InvalidClass { id: clean, n });
        }
        if n < 2 {
            return Err(TensorError::Invalid("margin_loss needs at least 2 classes".into()));
        }
        let row = self.value(logits).data();
        let mut rival = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != clean && v > best {
                best = v;
                rival = j;
            }
        }
        let margin = (row[clean] - best).max(0.0);
        Ok(self.push(Op::MarginLoss { logits, clean, rival }, Tensor::scalar(margin)))
    }

    /// -ln(||t||_2 + 1e-12), one factor of the feature-activation objective.
    pub fn neg_log_l2(&mut self, input: Var) -> Var {
        let norm = self.value(input).l2_norm();
        let value = Tensor::scalar(-(norm + NORM_GUARD).ln());
        self.push(Op::NegLogL2 { input, norm }, value)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Invalid("backward expects a scalar loss".into()));
        }
        if !self.value(loss).all_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        match &mut grads[var.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let ishape = self.value(*input).shape();
                let kshape = self.value(*kernel).shape();
                let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
                let (k, cout) = (kshape[0], kshape[3]);
                let oshape = self.nodes[i].value.shape();
                let (oh, ow) = (oshape[0], oshape[1]);
                let x = self.value(*input).data();
                let ker = self.value(*kernel).data();
                let go = g.data();
                let mut gi = vec![0.0; h * w * cin];
                let mut gk = vec![0.0; k * k * cin * cout];
                let mut gb = vec![0.0; cout];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base_y = (oy * stride) as isize - *padding as isize;
                        let base_x = (ox * stride) as isize - *padding as isize;
                        let o_off = (oy * ow + ox) * cout;
                        for co in 0..cout {
                            gb[co] += go[o_off + co];
                        }
                        for ky in 0..k {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i_off = (iy as usize * w + ix as usize) * cin;
                                let k_off = (ky * k + kx) * cin * cout;
                                for ci in 0..cin {
                                    let kb = k_off + ci * cout;
                                    let mut gx = 0.0;
                                    for co in 0..cout {
                                        let up = go[o_off + co];
                                        gx += up * ker[kb + co];
                                        gk[kb + co] += up * x[i_off + ci];
                                    }
                                    gi[i_off + ci] += gx;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, Tensor::new(ishape.to_vec(), gi));
                Self::accumulate(grads, *kernel, Tensor::new(kshape.to_vec(), gk));
                Self::accumulate(grads, *bias, Tensor::new(vec![cout], gb));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gi: Vec<f64> = x
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                    .collect();
                Self::accumulate(
                    grads,
                    *input,
                    Tensor::new(self.value(*input).shape().to_vec(), gi),
                );
            }
            Op::Bilinear { input } => {
                let ishape = self.value(*input).shape();
                let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
                let oshape = self.nodes[i].value.shape();
                let (oh, ow) = (oshape[0], oshape[1]);
                let go = g.data();
                let mut gi = vec![0.0; h * w * c];
                for oy in 0..oh {
                    let (y0, y1, wy) = sample_axis(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = sample_axis(ox, ow, w);
                        let o = (oy * ow + ox) * c;
                        for ch in 0..c {
                            let u = go[o + ch];
                            gi[(y0 * w + x0) * c + ch] += u * (1.0 - wy) * (1.0 - wx);
                            gi[(y0 * w + x1) * c + ch] += u * (1.0 - wy) * wx;
                            gi[(y1 * w + x0) * c + ch] += u * wy * (1.0 - wx);
                            gi[(y1 * w + x1) * c + ch] += u * wy * wx;
                        }
                    }
                }
                Self::accumulate(grads, *input, Tensor::new(ishape.to_vec(), gi));
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Scale { input, factor } => {
                let gi: Vec<f64> = g.data().iter().map(|v| v * factor).collect();
                Self::accumulate(
                    grads,
                    *input,
                    Tensor::new(self.value(*input).shape().to_vec(), gi),
                );
            }
            Op::Sum { input } => {
                let u = g.item();
                Self::accumulate(
                    grads,
                    *input,
                    Tensor::full(self.value(*input).shape().to_vec(), u),
                );
            }
            Op::SpatialMean { input } => {
                let ishape = self.value(*input).shape();
                let (h, w, n) = (ishape[0], ishape[1], ishape[2]);
                let inv = 1.0 / (h * w) as f64;
                let go = g.data();
                let mut gi = vec![0.0; h * w * n];
                for p in 0..h * w {
                    for s in 0..n {
                        gi[p * n + s] = go[s] * inv;
                    }
                }
                Self::accumulate(grads, *input, Tensor::new(ishape.to_vec(), gi));
            }
            Op::Pick { input, index } => {
                let mut gi = Tensor::zeros(self.value(*input).shape().to_vec());
                gi.data_mut()[*index] = g.item();
                Self::accumulate(grads, *input, gi);
            }
            Op::SoftmaxCrossEntropy { logits, target, weights, probs, total_weight } => {
                let shape = self.value(*logits).shape();
                let n = shape[2];
                let pixels = shape[0] * shape[1];
                let mut gi = vec![0.0; pixels * n];
                if *total_weight > 0.0 {
                    let u = g.item() / total_weight;
                    for p in 0..pixels {
                        let wgt = weights.as_ref().map_or(1.0, |ws| ws[p]);
                        if wgt == 0.0 {
                            continue;
                        }
                        for s in 0..n {
                            let one_hot = if s == target[p] { 1.0 } else { 0.0 };
                            gi[p * n + s] = u * wgt * (probs[p * n + s] - one_hot);
                        }
                    }
                }
                Self::accumulate(grads, *logits, Tensor::new(shape.to_vec(), gi));
            }
            Op::CrossEntropy1d { logits, target, probs } => {
                let u = g.item();
                let gi: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(s, &p)| u * (p - if s == *target { 1.0 } else { 0.0 }))
                    .collect();
                Self::accumulate(
                    grads,
                    *logits,
                    Tensor::new(self.value(*logits).shape().to_vec(), gi),
                );
            }
            Op::MarginLoss { logits, clean, rival } => {
                if self.nodes[i].value.item() > 0.0 {
                    let mut gi = Tensor::zeros(self.value(*logits).shape().to_vec());
                    gi.data_mut()[*clean] = g.item();
                    gi.data_mut()[*rival] = -g.item();
                    Self::accumulate(grads, *logits, gi);
                }
            }
            Op::NegLogL2 { input, norm } => {
                let mut gi = Tensor::zeros(self.value(*input).shape().to_vec());
                if *norm > 0.0 {
                    let factor = -g.item() / ((norm + NORM_GUARD) * norm);
                    for (d, &x) in gi.data_mut().iter_mut().zip(self.value(*input).data()) {
                        *d = factor * x;
                    }
                }
                Self::accumulate(grads, *input, gi);
            }
        }
    }
}

/// Half-pixel-center source coordinates with edge clamping.
#[inline]
fn sample_axis(out_idx: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}
