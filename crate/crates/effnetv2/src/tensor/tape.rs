//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every op output in execution order. [`Tape::backward`]
//! walks the tape once in reverse, accumulating gradients additively, so a
//! value consumed by several ops receives the sum of its downstream
//! gradients and every node is visited exactly once. Ops only ever reference
//! earlier nodes, which makes the reverse sweep a plain loop.
//!
//! The op set is exactly what the model family needs: conv / depthwise conv,
//! batch norm, SiLU, sigmoid, global average pooling, a fully connected
//! layer, elementwise add/mul, per-channel scaling, dropout, a scaled skip
//! connection (stochastic depth), sum, and softmax cross-entropy.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::rng::RngStream;

use super::{conv_extent, Mode, Padding, Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, padding: Padding, depthwise: bool },
    /// `mean`/`inv_std` are the statistics the forward pass normalized with
    /// (batch stats in train mode, running stats in eval mode).
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    Silu { x: Var },
    Sigmoid { x: Var },
    GlobalAvgPool { x: Var },
    FullyConnected { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { x: Var, gate: Var },
    Dropout { x: Var, mask: Arc<Vec<T>> },
    /// `skip + scale * body`; scale is 0 / (1/p) under stochastic depth in
    /// training and 1 in eval or for a plain residual.
    ScaledSkip { skip: Var, body: Var, scale: T },
    Sum { x: Var },
    SoftmaxXent { logits: Var, targets: Arc<Vec<T>>, probs: Arc<Vec<T>> },
}

/// Records ops eagerly and differentiates them in reverse.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), needs: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Record an input. `needs_grad` marks it as a differentiation target;
    /// data inputs should pass `false` so no gradient buffer is built for them.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn check_finite(&self, op: &'static str, role: &str, v: Var) -> Result<()> {
        if !self.values[v.0].all_finite() {
            return Err(Error::non_finite(op, format!("{role} contains NaN or Inf")));
        }
        Ok(())
    }

    /// 2-D convolution, no bias. `x` is `(n, cin, h, w)`, `w` is
    /// `(cout, cin, k, k)` with square kernel in {1, 3, 5} and stride in {1, 2}.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", xs.c, ws.c),
            ));
        }
        self.conv_common(x, w, stride, padding, false)
    }

    /// Depthwise convolution. `w` is `(c, 1, k, k)`; each channel is filtered
    /// independently.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c || ws.c != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {} does not match {} input channels", ws, xs.c),
            ));
        }
        self.conv_common(x, w, stride, padding, true)
    }

    fn conv_common(&mut self, x: Var, w: Var, stride: usize, padding: Padding, depthwise: bool) -> Result<Var> {
        let op_name: &'static str = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        let xs = self.shape(x);
        let ws = self.shape(w);
        let k = ws.h;
        if ws.w != k {
            return Err(Error::arg(op_name, format!("kernel must be square, got {}x{}", ws.h, ws.w)));
        }
        if !matches!(k, 1 | 3 | 5) {
            return Err(Error::arg(op_name, format!("kernel size {k} not in {{1, 3, 5}}")));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::arg(op_name, format!("stride {stride} not in {{1, 2}}")));
        }
        self.check_finite(op_name, "input", x)?;
        self.check_finite(op_name, "weight", w)?;

        let (oh, pt) = conv_extent(xs.h, k, stride, padding)?;
        let (ow, pl) = conv_extent(xs.w, k, stride, padding)?;
        let cout = if depthwise { xs.c } else { ws.n };
        let out_shape = Shape::new(xs.n, cout, oh, ow);

        let xv = self.values[x.0].clone();
        let wv = self.values[w.0].clone();
        let xd = xv.data();
        let wd = wv.data();
        let (h, w_in, cin) = (xs.h, xs.w, xs.c);

        let mut out = vec![T::zero(); out_shape.len()];
        // One chunk per (n, cout) output plane.
        for_each_chunk(&mut out, oh * ow, |idx, plane| {
            let ni = idx / cout;
            let co = idx % cout;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    if depthwise {
                        let xbase = (ni * cin + co) * h * w_in;
                        let wbase = co * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride) as isize + ky as isize - pt;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w_in;
                            for kx in 0..k {
                                let ix = (ox * stride) as isize + kx as isize - pl;
                                if ix < 0 || ix >= w_in as isize {
                                    continue;
                                }
                                acc = acc + xd[xrow + ix as usize] * wd[wbase + ky * k + kx];
                            }
                        }
                    } else {
                        for ci in 0..cin {
                            let xbase = (ni * cin + ci) * h * w_in;
                            let wbase = (co * cin + ci) * k * k;
                            for ky in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - pt;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w_in;
                                for kx in 0..k {
                                    let ix = (ox * stride) as isize + kx as isize - pl;
                                    if ix < 0 || ix >= w_in as isize {
                                        continue;
                                    }
                                    acc = acc + xd[xrow + ix as usize] * wd[wbase + ky * k + kx];
                                }
                            }
                        }
                    }
                    plane[oy * ow + ox] = acc;
                }
            }
        });

        let needs = self.needs(x) || self.needs(w);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, stride, padding, depthwise }, needs))
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// Train mode normalizes with the biased batch statistics and folds them
    /// into the running stats as `running = (1 - momentum) * batch +
    /// momentum * running`. Eval mode normalizes with the running stats and
    /// leaves them untouched. `eps` is added to the variance. A channel that
    /// is constant across the batch maps to exactly `beta` in train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: f64,
        eps: f64,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs.c;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != Shape::channels(c) {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has shape {} for {c}-channel input", self.shape(v)),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats of {} channels for {c}-channel input", running_mean.len()),
            ));
        }
        if !(0.0..1.0).contains(&momentum) && momentum != 1.0 {
            return Err(Error::arg("batch_norm", format!("momentum {momentum} outside [0, 1]")));
        }
        if eps <= 0.0 {
            return Err(Error::arg("batch_norm", format!("eps {eps} must be positive")));
        }
        self.check_finite("batch_norm", "input", x)?;

        let m = (xs.n * xs.h * xs.w) as f64;
        if mode == Mode::Train && m < 2.0 {
            return Err(Error::arg(
                "batch_norm",
                format!("train mode needs at least 2 values per channel, got {m}"),
            ));
        }

        let xv = self.values[x.0].clone();
        let xd = xv.data();
        let gd = self.values[gamma.0].clone();
        let bd = self.values[beta.0].clone();

        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut constant = vec![false; c];

        match mode {
            Mode::Train => {
                let eps_t = T::from_f64(eps);
                for ci in 0..c {
                    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
                    let mut sum = T::zero();
                    for ni in 0..xs.n {
                        let base = (ni * c + ci) * xs.h * xs.w;
                        for &v in &xd[base..base + xs.h * xs.w] {
                            sum = sum + v;
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    // A constant channel gets exact stats so the output is
                    // exactly beta rather than beta plus rounding noise.
                    if lo == hi {
                        constant[ci] = true;
                        mean[ci] = lo;
                        inv_std[ci] = T::one() / eps_t.sqrt();
                        continue;
                    }
                    let mu = sum / T::from_f64(m);
                    let mut sq = T::zero();
                    for ni in 0..xs.n {
                        let base = (ni * c + ci) * xs.h * xs.w;
                        for &v in &xd[base..base + xs.h * xs.w] {
                            let d = v - mu;
                            sq = sq + d * d;
                        }
                    }
                    let var = sq / T::from_f64(m);
                    mean[ci] = mu;
                    inv_std[ci] = T::one() / (var + eps_t).sqrt();
                }
                // Fold batch stats into the running estimates.
                let mom = T::from_f64(momentum);
                let one_m = T::one() - mom;
                for ci in 0..c {
                    let var = if constant[ci] {
                        T::zero()
                    } else {
                        T::one() / (inv_std[ci] * inv_std[ci]) - T::from_f64(eps)
                    };
                    running_mean[ci] = one_m * mean[ci] + mom * running_mean[ci];
                    running_var[ci] = one_m * var + mom * running_var[ci];
                }
            }
            Mode::Eval => {
                let eps_t = T::from_f64(eps);
                for ci in 0..c {
                    if running_var[ci] < T::zero() {
                        return Err(Error::arg(
                            "batch_norm",
                            format!("running variance of channel {ci} is negative"),
                        ));
                    }
                    mean[ci] = running_mean[ci];
                    inv_std[ci] = T::one() / (running_var[ci] + eps_t).sqrt();
                }
            }
        }

        let mut out = vec![T::zero(); xs.len()];
        let plane = xs.h * xs.w;
        for_each_chunk(&mut out, plane, |idx, chunk| {
            let ci = idx % c;
            let g = gd.data()[ci];
            let b = bd.data()[ci];
            if constant[ci] {
                chunk.fill(b);
                return;
            }
            let (mu, is) = (mean[ci], inv_std[ci]);
            let base = idx * plane;
            for (o, &v) in chunk.iter_mut().zip(&xd[base..base + plane]) {
                *o = g * (v - mu) * is + b;
            }
        });

        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::from_vec(xs, out)?;
        let op = Op::BatchNorm { x, gamma, beta, mean, inv_std, train: mode == Mode::Train };
        Ok(self.push(value, op, needs))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.values[x.0].clone();
        let out = Tensor::from_fn(xv.shape(), |i| {
            let v = xv.data()[i];
            v * sigmoid_scalar(v)
        });
        let needs = self.needs(x);
        Ok(self.push(out, Op::Silu { x }, needs))
    }

    /// Logistic sigmoid, elementwise.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.values[x.0].clone();
        let out = Tensor::from_fn(xv.shape(), |i| sigmoid_scalar(xv.data()[i]));
        let needs = self.needs(x);
        Ok(self.push(out, Op::Sigmoid { x }, needs))
    }

    /// Mean over the spatial extent: `(n, c, h, w)` to `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let xv = self.values[x.0].clone();
        let plane = xs.h * xs.w;
        let scale = T::one() / T::from_f64(plane as f64);
        let mut out = vec![T::zero(); xs.n * xs.c];
        for (idx, o) in out.iter_mut().enumerate() {
            let base = idx * plane;
            let mut acc = T::zero();
            for &v in &xv.data()[base..base + plane] {
                acc = acc + v;
            }
            *o = acc * scale;
        }
        let needs = self.needs(x);
        let value = Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, needs))
    }

    /// Affine layer on pooled features. `x` must be `(n, cin, 1, 1)`, `w` is
    /// `(cout, cin, 1, 1)`, `b` is `(1, cout, 1, 1)`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::shape("fully_connected", format!("input {} is not pooled to 1x1", xs)));
        }
        if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
            return Err(Error::shape(
                "fully_connected",
                format!("weight {} does not match input features {}", ws, xs.c),
            ));
        }
        if bs != Shape::channels(ws.n) {
            return Err(Error::shape("fully_connected", format!("bias {} for {} outputs", bs, ws.n)));
        }
        self.check_finite("fully_connected", "input", x)?;
        self.check_finite("fully_connected", "weight", w)?;

        let (n, cin, cout) = (xs.n, xs.c, ws.n);
        let xv = self.values[x.0].clone();
        let wv = self.values[w.0].clone();
        let bv = self.values[b.0].clone();
        let mut out = vec![T::zero(); n * cout];
        for_each_chunk(&mut out, cout, |ni, row| {
            let xrow = &xv.data()[ni * cin..(ni + 1) * cin];
            for (o, slot) in row.iter_mut().enumerate() {
                let wrow = &wv.data()[o * cin..(o + 1) * cin];
                let mut acc = bv.data()[o];
                for i in 0..cin {
                    acc = acc + xrow[i] * wrow[i];
                }
                *slot = acc;
            }
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::from_vec(Shape::new(n, cout, 1, 1), out)?;
        Ok(self.push(value, Op::FullyConnected { x, w, b }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
        let out = Tensor::from_fn(sa, |i| av.data()[i] + bv.data()[i]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa} vs {sb}")));
        }
        let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
        let out = Tensor::from_fn(sa, |i| av.data()[i] * bv.data()[i]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    /// Multiply every spatial position of channel `c` in sample `n` by
    /// `gate[n, c]`. This is the excitation step of squeeze-and-excitation.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        if gs != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(Error::shape(
                "scale_channels",
                format!("gate {} for input {}", gs, xs),
            ));
        }
        let xv = self.values[x.0].clone();
        let gv = self.values[gate.0].clone();
        let plane = xs.h * xs.w;
        let mut out = vec![T::zero(); xs.len()];
        for_each_chunk(&mut out, plane, |idx, chunk| {
            let g = gv.data()[idx];
            let base = idx * plane;
            for (o, &v) in chunk.iter_mut().zip(&xv.data()[base..base + plane]) {
                *o = v * g;
            }
        });
        let needs = self.needs(x) || self.needs(gate);
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(value, Op::ScaleChannels { x, gate }, needs))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`, so
    /// the expectation is unchanged. Eval mode and `rate == 0` are exact
    /// identities (the input var is returned unchanged).
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let xs = self.shape(x);
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..xs.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let xv = self.values[x.0].clone();
        let out = Tensor::from_fn(xs, |i| xv.data()[i] * mask[i]);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask: Arc::new(mask) }, needs))
    }

    /// Residual join with stochastic depth: returns `skip + s * body` where in
    /// train mode `s` is `1 / survival` with probability `survival` and `0`
    /// otherwise (the whole body drops, preserving the expectation), and in
    /// eval mode `s = 1`.
    pub fn stochastic_depth(
        &mut self,
        skip: Var,
        body: Var,
        survival: f64,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        if !(survival > 0.0 && survival <= 1.0) {
            return Err(Error::arg("stochastic_depth", format!("survival {survival} outside (0, 1]")));
        }
        let (ss, bs) = (self.shape(skip), self.shape(body));
        if ss != bs {
            return Err(Error::shape("stochastic_depth", format!("skip {ss} vs body {bs}")));
        }
        let scale = match mode {
            Mode::Eval => T::one(),
            Mode::Train => {
                if rng.random::<f64>() < survival {
                    T::from_f64(1.0 / survival)
                } else {
                    T::zero()
                }
            }
        };
        let sv = self.values[skip.0].clone();
        let value = if scale == T::zero() {
            sv // body dropped: the residual output is the skip path itself
        } else {
            let bv = self.values[body.0].clone();
            Tensor::from_fn(ss, |i| sv.data()[i] + bv.data()[i] * scale)
        };
        let needs = self.needs(skip) || self.needs(body);
        Ok(self.push(value, Op::ScaledSkip { skip, body, scale }, needs))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.values[x.0].clone();
        let mut acc = T::zero();
        for &v in xv.data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), Op::Sum { x }, needs))
    }

    /// Mean softmax cross-entropy against (possibly soft) target rows.
    /// `logits` must be `(n, k, 1, 1)`; `targets` is row-major `n * k` with
    /// non-negative entries. Computed via the log-sum-exp shift for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.h != 1 || ls.w != 1 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {} are not (n, k, 1, 1)", ls)));
        }
        let (n, k) = (ls.n, ls.c);
        if targets.len() != n * k {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} target values for {n} rows of {k} classes", targets.len()),
            ));
        }
        if targets.iter().any(|t| !t.is_finite() || *t < T::zero()) {
            return Err(Error::arg("softmax_cross_entropy", "targets must be finite and non-negative".to_string()));
        }
        self.check_finite("softmax_cross_entropy", "logits", logits)?;

        let lv = self.values[logits.0].clone();
        let ld = lv.data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for ni in 0..n {
            let row = &ld[ni * k..(ni + 1) * k];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut lse = T::zero();
            for &v in row {
                lse = lse + (v - mx).exp();
            }
            let lse = lse.ln();
            for (i, &v) in row.iter().enumerate() {
                let logp = v - mx - lse;
                probs[ni * k + i] = logp.exp();
                loss = loss - targets[ni * k + i] * logp;
            }
        }
        loss = loss / T::from_f64(n as f64);

        let needs = self.needs(logits);
        let op = Op::SoftmaxXent {
            logits,
            targets: Arc::new(targets.to_vec()),
            probs: Arc::new(probs),
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Reverse sweep from `loss`, which must be a scalar node. Gradients of
    /// every node with `needs_grad` ancestry become available via [`grad`].
    ///
    /// [`grad`]: Tape::grad
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].shape().len() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss has shape {}, expected a scalar", self.values[loss.0].shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                grads[i] = None; // nothing upstream wants this gradient
                continue;
            }
            // Ops only reference earlier nodes, so node i's gradient (right of
            // the split) is read-only while its inputs' gradients (left) are
            // accumulated.
            let (left, right) = grads.split_at_mut(i);
            let Some(gout) = right[0].as_deref() else { continue };
            self.backward_op(i, gout, left);
        }
        self.grads = grads;
        Ok(())
    }

    /// Dispatch one op's backward rule, accumulating into `grads[j]` for each
    /// input `j < i`.
    fn backward_op(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        // Lazily materialize the gradient buffer for node `v`.
        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &self.ops[i] {
            Op::Leaf => {}

            Op::Conv2d { x, w, stride, padding, depthwise } => {
                self.backward_conv(i, gout, grads, *x, *w, *stride, *padding, *depthwise);
            }

            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let xs = self.shape(*x);
                let (c, plane) = (xs.c, xs.h * xs.w);
                let m = T::from_f64((xs.n * plane) as f64);
                let xd = self.values[x.0].data();
                let gd = self.values[gamma.0].data();

                // Per-channel sums of dout and dout * xhat.
                let mut s1 = vec![T::zero(); c];
                let mut s2 = vec![T::zero(); c];
                for ni in 0..xs.n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (mu, is) = (mean[ci], inv_std[ci]);
                        let mut a1 = T::zero();
                        let mut a2 = T::zero();
                        for j in 0..plane {
                            let g = gout[base + j];
                            a1 = a1 + g;
                            a2 = a2 + g * (xd[base + j] - mu) * is;
                        }
                        s1[ci] = s1[ci] + a1;
                        s2[ci] = s2[ci] + a2;
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, c);
                    for ci in 0..c {
                        gb[ci] = gb[ci] + s1[ci];
                    }
                }
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    for ci in 0..c {
                        gg[ci] = gg[ci] + s2[ci];
                    }
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, xs.len());
                    for ni in 0..xs.n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let (mu, is) = (mean[ci], inv_std[ci]);
                            let gscale = gd[ci] * is;
                            if *train {
                                let c1 = s1[ci] / m;
                                let c2 = s2[ci] / m;
                                for j in 0..plane {
                                    let xhat = (xd[base + j] - mu) * is;
                                    gx[base + j] = gx[base + j] + gscale * (gout[base + j] - c1 - xhat * c2);
                                }
                            } else {
                                for j in 0..plane {
                                    gx[base + j] = gx[base + j] + gscale * gout[base + j];
                                }
                            }
                        }
                    }
                }
            }

            Op::Silu { x } => {
                if self.needs(*x) {
                    let xd = self.values[x.0].data();
                    let gx = slot(grads, *x, xd.len());
                    for j in 0..xd.len() {
                        let s = sigmoid_scalar(xd[j]);
                        gx[j] = gx[j] + gout[j] * s * (T::one() + xd[j] * (T::one() - s));
                    }
                }
            }

            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let yd = self.values[i].data();
                    let gx = slot(grads, *x, yd.len());
                    for j in 0..yd.len() {
                        gx[j] = gx[j] + gout[j] * yd[j] * (T::one() - yd[j]);
                    }
                }
            }

            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let plane = xs.h * xs.w;
                    let scale = T::one() / T::from_f64(plane as f64);
                    let gx = slot(grads, *x, xs.len());
                    for (idx, &g) in gout.iter().enumerate() {
                        let base = idx * plane;
                        let gs = g * scale;
                        for v in &mut gx[base..base + plane] {
                            *v = *v + gs;
                        }
                    }
                }
            }

            Op::FullyConnected { x, w, b } => {
                let xs = self.shape(*x);
                let (n, cin) = (xs.n, xs.c);
                let cout = self.shape(*w).n;
                let xd = self.values[x.0].data();
                let wd = self.values[w.0].data();
                if self.needs(*x) {
                    let gx = slot(grads, *x, n * cin);
                    for ni in 0..n {
                        for o in 0..cout {
                            let g = gout[ni * cout + o];
                            let wrow = &wd[o * cin..(o + 1) * cin];
                            for ii in 0..cin {
                                gx[ni * cin + ii] = gx[ni * cin + ii] + g * wrow[ii];
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = slot(grads, *w, cout * cin);
                    for ni in 0..n {
                        let xrow = &xd[ni * cin..(ni + 1) * cin];
                        for o in 0..cout {
                            let g = gout[ni * cout + o];
                            for ii in 0..cin {
                                gw[o * cin + ii] = gw[o * cin + ii] + g * xrow[ii];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, cout);
                    for ni in 0..n {
                        for o in 0..cout {
                            gb[o] = gb[o] + gout[ni * cout + o];
                        }
                    }
                }
            }

            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let gv = slot(grads, *v, gout.len());
                        for j in 0..gout.len() {
                            gv[j] = gv[j] + gout[j];
                        }
                    }
                }
            }

            Op::Mul { a, b } => {
                let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
                if self.needs(*a) {
                    let ga = slot(grads, *a, gout.len());
                    for j in 0..gout.len() {
                        ga[j] = ga[j] + gout[j] * bd[j];
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, gout.len());
                    for j in 0..gout.len() {
                        gb[j] = gb[j] + gout[j] * ad[j];
                    }
                }
            }

            Op::ScaleChannels { x, gate } => {
                let xs = self.shape(*x);
                let plane = xs.h * xs.w;
                let xd = self.values[x.0].data();
                let gd = self.values[gate.0].data();
                if self.needs(*x) {
                    let gx = slot(grads, *x, xs.len());
                    for idx in 0..xs.n * xs.c {
                        let g = gd[idx];
                        let base = idx * plane;
                        for j in 0..plane {
                            gx[base + j] = gx[base + j] + gout[base + j] * g;
                        }
                    }
                }
                if self.needs(*gate) {
                    let gg = slot(grads, *gate, xs.n * xs.c);
                    for idx in 0..xs.n * xs.c {
                        let base = idx * plane;
                        let mut acc = T::zero();
                        for j in 0..plane {
                            acc = acc + gout[base + j] * xd[base + j];
                        }
                        gg[idx] = gg[idx] + acc;
                    }
                }
            }

            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, mask.len());
                    for j in 0..mask.len() {
                        gx[j] = gx[j] + gout[j] * mask[j];
                    }
                }
            }

            Op::ScaledSkip { skip, body, scale } => {
                if self.needs(*skip) {
                    let gs = slot(grads, *skip, gout.len());
                    for j in 0..gout.len() {
                        gs[j] = gs[j] + gout[j];
                    }
                }
                if self.needs(*body) && *scale != T::zero() {
                    let gb = slot(grads, *body, gout.len());
                    for j in 0..gout.len() {
                        gb[j] = gb[j] + gout[j] * *scale;
                    }
                }
            }

            Op::Sum { x } => {
                if self.needs(*x) {
                    let len = self.values[x.0].shape().len();
                    let g = gout[0];
                    let gx = slot(grads, *x, len);
                    for v in gx.iter_mut() {
                        *v = *v + g;
                    }
                }
            }

            Op::SoftmaxXent { logits, targets, probs } => {
                if self.needs(*logits) {
                    let ls = self.shape(*logits);
                    let (n, k) = (ls.n, ls.c);
                    let g = gout[0] / T::from_f64(n as f64);
                    let gl = slot(grads, *logits, n * k);
                    for ni in 0..n {
                        let mut tsum = T::zero();
                        for j in 0..k {
                            tsum = tsum + targets[ni * k + j];
                        }
                        for j in 0..k {
                            let idx = ni * k + j;
                            gl[idx] = gl[idx] + g * (probs[idx] * tsum - targets[idx]);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(
        &self,
        out: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
        depthwise: bool,
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let os = self.values[out].shape();
        let k = ws.h;
        let (h, w_in, cin) = (xs.h, xs.w, xs.c);
        let (oh, ow, cout) = (os.h, os.w, os.c);
        let pt = conv_extent(h, k, stride, padding).expect("shape validated at forward").1;
        let pl = conv_extent(w_in, k, stride, padding).expect("shape validated at forward").1;
        let xd = self.values[x.0].data();
        let wd = self.values[w.0].data();

        if self.needs(x) {
            let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); xs.len()]);
            // One chunk per sample: all writes for sample n land in its slice.
            for_each_chunk(gx, cin * h * w_in, |ni, gxs| {
                for co in 0..cout {
                    let obase = (ni * cout + co) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gout[obase + oy * ow + ox];
                            if depthwise {
                                let wbase = co * k * k;
                                let xbase = co * h * w_in;
                                for ky in 0..k {
                                    let iy = (oy * stride) as isize + ky as isize - pt;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride) as isize + kx as isize - pl;
                                        if ix < 0 || ix >= w_in as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * w_in + ix as usize;
                                        gxs[xi] = gxs[xi] + g * wd[wbase + ky * k + kx];
                                    }
                                }
                            } else {
                                for ci in 0..cin {
                                    let wbase = (co * cin + ci) * k * k;
                                    let xbase = ci * h * w_in;
                                    for ky in 0..k {
                                        let iy = (oy * stride) as isize + ky as isize - pt;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride) as isize + kx as isize - pl;
                                            if ix < 0 || ix >= w_in as isize {
                                                continue;
                                            }
                                            let xi = xbase + iy as usize * w_in + ix as usize;
                                            gxs[xi] = gxs[xi] + g * wd[wbase + ky * k + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }

        if self.needs(w) {
            let gw = grads[w.0].get_or_insert_with(|| vec![T::zero(); ws.len()]);
            // One chunk per output channel's filter.
            let per_filter = if depthwise { k * k } else { cin * k * k };
            for_each_chunk(gw, per_filter, |co, gws| {
                for ni in 0..xs.n {
                    let obase = (ni * cout + co) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gout[obase + oy * ow + ox];
                            if depthwise {
                                let xbase = (ni * cin + co) * h * w_in;
                                for ky in 0..k {
                                    let iy = (oy * stride) as isize + ky as isize - pt;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride) as isize + kx as isize - pl;
                                        if ix < 0 || ix >= w_in as isize {
                                            continue;
                                        }
                                        gws[ky * k + kx] =
                                            gws[ky * k + kx] + g * xd[xbase + iy as usize * w_in + ix as usize];
                                    }
                                }
                            } else {
                                for ci in 0..cin {
                                    let xbase = (ni * cin + ci) * h * w_in;
                                    let fbase = ci * k * k;
                                    for ky in 0..k {
                                        let iy = (oy * stride) as isize + ky as isize - pt;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride) as isize + kx as isize - pl;
                                            if ix < 0 || ix >= w_in as isize {
                                                continue;
                                            }
                                            gws[fbase + ky * k + kx] = gws[fbase + ky * k + kx]
                                                + g * xd[xbase + iy as usize * w_in + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    }
}

#[inline(always)]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
