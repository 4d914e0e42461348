//! Instantiation of an [`ArchSpec`] into trainable parameters and a forward
//! pass over the autodiff tape.
//!
//! The layer plan is built once; every forward call records a fresh tape.
//! Parameters live on the model between steps, batch-norm running statistics
//! are updated in place by train-mode forwards, and stochastic choices
//! (dropout, stochastic depth) draw from the caller's stream so a given
//! `(seed, step)` replays exactly.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ArchSpec, BlockOp};
use crate::arch::cost::se_width;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Mode, Padding, Scalar, Shape, Tape, Tensor, Var};

/// One trainable tensor. `decay` marks it for weight decay (convolution and
/// fully connected weights; biases and batch-norm parameters are exempt).
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub decay: bool,
}

#[derive(Clone, Debug)]
struct BnState<T: Scalar> {
    name: String,
    mean: Vec<T>,
    var: Vec<T>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { w: usize, stride: usize },
    DwConv { w: usize, stride: usize },
    Bn { gamma: usize, beta: usize, state: usize },
    Silu,
    /// Squeeze-excite: pool, bottleneck FC + SiLU, restore FC + sigmoid,
    /// rescale channels.
    Se { fc1w: usize, fc1b: usize, fc2w: usize, fc2b: usize },
    /// Body under a skip connection, joined with stochastic depth.
    Residual { body: Vec<Layer> },
    GlobalPool,
    HeadDropout,
    Fc { w: usize, b: usize },
}

/// Behaviour knobs for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardConfig {
    pub mode: Mode,
    /// Head dropout rate (the regularizer a progressive schedule ramps).
    pub dropout: f64,
    /// Stochastic depth survival probability for every residual block.
    pub survival: f64,
    pub bn_momentum: f64,
}

impl ForwardConfig {
    pub fn eval() -> Self {
        ForwardConfig { mode: Mode::Eval, dropout: 0.0, survival: 1.0, bn_momentum: 0.99 }
    }

    pub fn train(dropout: f64, survival: f64, bn_momentum: f64) -> Self {
        ForwardConfig { mode: Mode::Train, dropout, survival, bn_momentum }
    }
}

/// Result of recording a forward pass: the logits node and the tape leaves of
/// every parameter, aligned with [`Model::params`].
pub struct ForwardPass {
    pub logits: Var,
    pub param_vars: Vec<Var>,
}

/// A materialized network.
#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub arch: ArchSpec,
    pub params: Vec<Param<T>>,
    bn_states: Vec<BnState<T>>,
    layers: Arc<Vec<Layer>>,
}

/// Builds parameters in registration order from a dedicated init stream.
struct Builder<'r, T: Scalar> {
    params: Vec<Param<T>>,
    bn_states: Vec<BnState<T>>,
    rng: &'r mut RngStream,
}

impl<T: Scalar> Builder<'_, T> {
    /// Convolution weight, He-normal over fan-out.
    fn conv(&mut self, name: String, cout: usize, cin: usize, k: usize) -> usize {
        let std = (2.0 / (k * k * cout) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Tensor::from_fn(Shape::new(cout, cin, k, k), |_| T::from_f64(normal.sample(self.rng)));
        self.push(name, value, true)
    }

    /// Depthwise weight: fan-out is the kernel footprint of its one channel.
    fn dw_conv(&mut self, name: String, c: usize, k: usize) -> usize {
        let std = (2.0 / (k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Tensor::from_fn(Shape::new(c, 1, k, k), |_| T::from_f64(normal.sample(self.rng)));
        self.push(name, value, true)
    }

    /// FC weight uniform in +/- 1/sqrt(fan_in), zero bias.
    fn fc(&mut self, name: &str, cout: usize, cin: usize) -> (usize, usize) {
        let bound = 1.0 / (cin as f64).sqrt();
        let value = Tensor::from_fn(Shape::new(cout, cin, 1, 1), |_| {
            T::from_f64(self.rng.random_range(-bound..bound))
        });
        let w = self.push(format!("{name}.w"), value, true);
        let b = self.push(format!("{name}.b"), Tensor::zeros(Shape::channels(cout)), false);
        (w, b)
    }

    /// Batch norm: gamma 1, beta 0, running stats (0, 1).
    fn bn(&mut self, name: &str, c: usize) -> Layer {
        let gamma = self.push(format!("{name}.g"), Tensor::full(Shape::channels(c), T::one()), false);
        let beta = self.push(format!("{name}.b"), Tensor::zeros(Shape::channels(c)), false);
        self.bn_states.push(BnState {
            name: name.to_string(),
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Layer::Bn { gamma, beta, state: self.bn_states.len() - 1 }
    }

    fn push(&mut self, name: String, value: Tensor<T>, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }
}

impl<T: Scalar> Model<T> {
    /// Instantiate with freshly initialized weights. The same `(arch, seed)`
    /// always produces bit-identical parameters.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Model<T>> {
        arch.validate()?;
        let mut rng = RngStream::derive(seed, "init", &[]);
        let mut b = Builder { params: Vec::new(), bn_states: Vec::new(), rng: &mut rng };
        let mut layers = Vec::new();

        let stem_c = arch.stem.out_channels as usize;
        layers.push(Layer::Conv { w: b.conv("stem.conv.w".into(), stem_c, 3, 3), stride: 2 });
        layers.push(b.bn("stem.bn", stem_c));
        layers.push(Layer::Silu);

        let mut cin = stem_c;
        for (si, s) in arch.stages.iter().enumerate() {
            for li in 0..s.num_layers {
                let stride = if li == 0 { s.stride as usize } else { 1 };
                let ci = if li == 0 { cin } else { s.out_channels as usize };
                let co = s.out_channels as usize;
                let prefix = format!("s{}.l{}", si + 1, li + 1);
                let body = build_block(&mut b, s.op_type, &prefix, ci, co, s.expansion_ratio as usize, s.kernel as usize, stride, s.se_ratio);
                if stride == 1 && ci == co {
                    layers.push(Layer::Residual { body });
                } else {
                    layers.extend(body);
                }
            }
            cin = s.out_channels as usize;
        }

        let head_c = arch.head.out_channels as usize;
        layers.push(Layer::Conv { w: b.conv("head.conv.w".into(), head_c, cin, 1), stride: 1 });
        layers.push(b.bn("head.bn", head_c));
        layers.push(Layer::Silu);
        layers.push(Layer::GlobalPool);
        layers.push(Layer::HeadDropout);
        let (w, bias) = b.fc("head.fc", arch.num_classes as usize, head_c);
        layers.push(Layer::Fc { w, b: bias });

        Ok(Model { arch: arch.clone(), params: b.params, bn_states: b.bn_states, layers: Arc::new(layers) })
    }

    /// Total trainable scalar count. Matches the closed-form analyzer.
    pub fn num_params(&self) -> u64 {
        self.params.iter().map(|p| p.value.shape().len() as u64).sum()
    }

    /// Record a forward pass on `tape`. `input` is `(n, 3, h, w)` in
    /// standardized float form.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        cfg: &ForwardConfig,
        rng: &mut RngStream,
    ) -> Result<ForwardPass> {
        if input.shape().c != 3 {
            return Err(Error::shape("forward", format!("input {} is not 3-channel", input.shape())));
        }
        let needs_grad = cfg.mode == Mode::Train;
        let param_vars: Vec<Var> =
            self.params.iter().map(|p| tape.leaf(p.value.clone(), needs_grad)).collect();
        let x = tape.leaf(input.clone(), false);
        let layers = Arc::clone(&self.layers);
        let logits = self.run(tape, &layers, x, &param_vars, cfg, rng)?;
        Ok(ForwardPass { logits, param_vars })
    }

    fn run(
        &mut self,
        tape: &mut Tape<T>,
        layers: &[Layer],
        mut x: Var,
        pv: &[Var],
        cfg: &ForwardConfig,
        rng: &mut RngStream,
    ) -> Result<Var> {
        for layer in layers {
            x = match layer {
                Layer::Conv { w, stride } => tape.conv2d(x, pv[*w], *stride, Padding::Same)?,
                Layer::DwConv { w, stride } => tape.depthwise_conv2d(x, pv[*w], *stride, Padding::Same)?,
                Layer::Bn { gamma, beta, state } => {
                    let st = &mut self.bn_states[*state];
                    tape.batch_norm(x, pv[*gamma], pv[*beta], &mut st.mean, &mut st.var, cfg.bn_momentum, 1e-3, cfg.mode)?
                }
                Layer::Silu => tape.silu(x)?,
                Layer::Se { fc1w, fc1b, fc2w, fc2b } => {
                    let pooled = tape.global_avg_pool(x)?;
                    let a = tape.fully_connected(pooled, pv[*fc1w], pv[*fc1b])?;
                    let a = tape.silu(a)?;
                    let g = tape.fully_connected(a, pv[*fc2w], pv[*fc2b])?;
                    let g = tape.sigmoid(g)?;
                    // The gate is per (n, c): broadcast it over each sample's
                    // spatial extent of the expanded features.
                    tape.scale_channels(x, g)?
                }
                Layer::Residual { body } => {
                    let y = self.run(tape, body, x, pv, cfg, rng)?;
                    tape.stochastic_depth(x, y, cfg.survival, cfg.mode, rng)?
                }
                Layer::GlobalPool => tape.global_avg_pool(x)?,
                Layer::HeadDropout => tape.dropout(x, cfg.dropout, cfg.mode, rng)?,
                Layer::Fc { w, b } => tape.fully_connected(x, pv[*w], pv[*b])?,
            };
        }
        Ok(x)
    }

    /// Clone of every parameter tensor, in order (EMA shadows start here).
    pub fn param_values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replace every parameter value, in order. Shapes must match.
    pub fn set_param_values(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {} has shape {}, got {}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Batch-norm running statistics as `(name, mean, var)` snapshots.
    pub fn bn_snapshot(&self) -> Vec<(String, Vec<T>, Vec<T>)> {
        self.bn_states.iter().map(|s| (s.name.clone(), s.mean.clone(), s.var.clone())).collect()
    }

    /// Restore one batch-norm state by name.
    pub fn restore_bn(&mut self, name: &str, mean: &[T], var: &[T]) -> Result<()> {
        let st = self
            .bn_states
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("no batch-norm state named {name}")))?;
        if st.mean.len() != mean.len() || st.var.len() != var.len() {
            return Err(Error::CheckpointMismatch(format!(
                "batch-norm {name} has {} channels, got {}/{}",
                st.mean.len(),
                mean.len(),
                var.len()
            )));
        }
        st.mean.copy_from_slice(mean);
        st.var.copy_from_slice(var);
        Ok(())
    }
}

/// Layer sequence for one block instance (without the residual wrapper).
#[allow(clippy::too_many_arguments)]
fn build_block<T: Scalar>(
    b: &mut Builder<T>,
    op: BlockOp,
    prefix: &str,
    cin: usize,
    cout: usize,
    e: usize,
    k: usize,
    stride: usize,
    se_ratio: f64,
) -> Vec<Layer> {
    let mut body = Vec::new();
    let ce = cin * e;
    match op {
        BlockOp::MbConv => {
            if e != 1 {
                body.push(Layer::Conv { w: b.conv(format!("{prefix}.expand.w"), ce, cin, 1), stride: 1 });
                body.push(b.bn(&format!("{prefix}.expand_bn"), ce));
                body.push(Layer::Silu);
            }
            body.push(Layer::DwConv { w: b.dw_conv(format!("{prefix}.dw.w"), ce, k), stride });
            body.push(b.bn(&format!("{prefix}.dw_bn"), ce));
            body.push(Layer::Silu);
            if se_ratio > 0.0 {
                let se = se_width(cin as u64, se_ratio) as usize;
                let (fc1w, fc1b) = b.fc(&format!("{prefix}.se.fc1"), se, ce);
                let (fc2w, fc2b) = b.fc(&format!("{prefix}.se.fc2"), ce, se);
                body.push(Layer::Se { fc1w, fc1b, fc2w, fc2b });
            }
            body.push(Layer::Conv { w: b.conv(format!("{prefix}.project.w"), cout, ce, 1), stride: 1 });
            body.push(b.bn(&format!("{prefix}.project_bn"), cout));
        }
        BlockOp::FusedMbConv => {
            if e == 1 {
                body.push(Layer::Conv { w: b.conv(format!("{prefix}.fused.w"), cout, cin, k), stride });
                body.push(b.bn(&format!("{prefix}.fused_bn"), cout));
                body.push(Layer::Silu);
            } else {
                body.push(Layer::Conv { w: b.conv(format!("{prefix}.fused.w"), ce, cin, k), stride });
                body.push(b.bn(&format!("{prefix}.fused_bn"), ce));
                body.push(Layer::Silu);
                body.push(Layer::Conv { w: b.conv(format!("{prefix}.project.w"), cout, ce, 1), stride: 1 });
                body.push(b.bn(&format!("{prefix}.project_bn"), cout));
            }
        }
        BlockOp::Conv | BlockOp::Head => unreachable!("stage ops are validated"),
    }
    body
}
