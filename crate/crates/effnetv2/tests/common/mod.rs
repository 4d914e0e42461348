//! Helpers shared between integration-test binaries.

#![allow(dead_code)] // each test binary uses its own subset

pub mod fd {
    //! Central finite-difference harness for the autodiff tape.
    //!
    //! Each case builds a scalar loss `sum(coeffs * op(inputs))` with fixed
    //! random coefficients, runs one reverse pass, then re-evaluates the
    //! forward graph in `f64` with each input element bumped by ±[`STEP`].
    //! Stochastic ops re-derive the same named stream on every evaluation, so
    //! their masks are identical across the analytic pass and both
    //! half-steps; batch-norm cases hand the graph fresh running-stat buffers
    //! per evaluation so the train-mode update cannot leak between
    //! half-steps.

    use effnetv2::rng::RngStream;
    use effnetv2::tensor::{Mode, Padding, Shape, Tape, Tensor, Var};
    use effnetv2::Result;
    use rand::Rng;

    /// Central-difference step. In f64 this keeps truncation (~h²) and
    /// roundoff (~1e-16 / h) both orders of magnitude below the tolerance.
    pub const STEP: f64 = 1e-5;

    /// Relative error bound: `|analytic - numeric| / max(|analytic|,
    /// |numeric|, FLOOR)` must stay below this. The floor stops near-zero
    /// gradients from demanding absolute precision central differences
    /// cannot deliver.
    pub const TOL: f64 = 1e-4;
    pub const FLOOR: f64 = 1e-3;

    /// How many randomized shape draws each op is checked on.
    pub const SHAPES_PER_OP: usize = 12;

    /// Every differentiable op, by sweep name.
    pub const ALL_OPS: &[&str] = &[
        "conv2d",
        "depthwise_conv2d",
        "batch_norm(train)",
        "batch_norm(eval)",
        "silu",
        "sigmoid",
        "global_avg_pool",
        "fully_connected",
        "add",
        "mul",
        "scale_channels",
        "dropout(train)",
        "stochastic_depth(train)",
        "stochastic_depth(eval)",
        "sum",
        "softmax_cross_entropy",
    ];

    /// Outcome of sweeping one op over [`SHAPES_PER_OP`] randomized shapes.
    pub struct Sweep {
        pub op: &'static str,
        pub cases: usize,
        /// Largest relative error seen across every input element.
        pub max_rel: f64,
        /// Where it occurred, for failure messages.
        pub worst: String,
    }

    impl Sweep {
        pub fn assert_ok(&self) {
            assert!(
                self.max_rel < TOL,
                "{}: max relative error {} at {}",
                self.op,
                self.max_rel,
                self.worst
            );
        }
    }

    pub fn rand_tensor(rng: &mut RngStream, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Random 4-D shape with every extent small enough that a full
    /// per-element finite-difference sweep stays cheap.
    pub fn rand_shape(rng: &mut RngStream) -> Shape {
        Shape::new(
            rng.random_range(1..3usize),
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
        )
    }

    /// Distinct stream per (op, case) so shape draws never alias across ops.
    pub fn case_rng(op: &str, case: usize) -> RngStream {
        RngStream::derive(0x6AD, op, &[case as u64])
    }

    /// Reduce `out` to a scalar as `sum(coeffs * out)` with fixed
    /// coefficients in [0.25, 1.75). Distinct per-element weights keep
    /// gradient errors from cancelling inside the sum.
    fn weighted_loss(tape: &mut Tape<f64>, out: Var, salt: u64) -> Var {
        let shape = tape.shape(out);
        let mut rng = RngStream::derive(salt, "coeffs", &[shape.len() as u64]);
        let coeffs = tape.leaf(rand_tensor(&mut rng, shape, 0.25, 1.75), false);
        let prod = tape.mul(out, coeffs).unwrap();
        tape.sum(prod).unwrap()
    }

    /// Check analytic gradients of `build`'s output w.r.t. every tensor in
    /// `inputs` against central finite differences, element by element.
    /// Returns the largest relative error and a description of where it
    /// occurred.
    ///
    /// `build` must be a pure function of the leaf values (stochastic ops
    /// inside it must derive their streams from constants), because it is
    /// re-invoked from scratch for every half-step. A `None` gradient is
    /// treated as zero: that is what a pruned path means, and the finite
    /// difference confirms it.
    pub fn check(
        name: &str,
        salt: u64,
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> (f64, String) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
        let loss = weighted_loss(&mut tape, out, salt);
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.shape().len()], <[f64]>::to_vec))
            .collect();

        let eval = |which: usize, elem: usize, delta: f64| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut t = t.clone();
                    if i == which {
                        t.make_mut()[elem] += delta;
                    }
                    tape.leaf(t, false)
                })
                .collect();
            let out = build(&mut tape, &vars).unwrap();
            let loss = weighted_loss(&mut tape, out, salt);
            tape.value(loss).item().unwrap()
        };

        let mut max_rel = 0.0;
        let mut worst = String::from("(no elements)");
        for (which, input) in inputs.iter().enumerate() {
            for elem in 0..input.shape().len() {
                let numeric = (eval(which, elem, STEP) - eval(which, elem, -STEP)) / (2.0 * STEP);
                let analytic = grads[which][elem];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!(
                        "{name}: input {which} element {elem}: analytic {analytic} vs numeric {numeric}"
                    );
                }
            }
        }
        (max_rel, worst)
    }

    /// Run one op's randomized-shape sweep.
    pub fn sweep(op: &'static str) -> Sweep {
        let mut max_rel = 0.0;
        let mut worst = String::new();
        let mut cases = 0;
        let mut fold = |r: (f64, String)| {
            cases += 1;
            if r.0 >= max_rel {
                (max_rel, worst) = r;
            }
        };

        match op {
            "conv2d" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("conv2d", case);
                    let k = [1, 3, 5][case % 3];
                    let stride = 1 + case % 2;
                    let padding = if case % 4 < 2 { Padding::Same } else { Padding::Valid };
                    let n = rng.random_range(1..3usize);
                    let cin = rng.random_range(1..4usize);
                    let cout = rng.random_range(1..4usize);
                    let h = k + rng.random_range(0..3usize);
                    let w = k + rng.random_range(0..3usize);
                    let x = rand_tensor(&mut rng, Shape::new(n, cin, h, w), -1.5, 1.5);
                    let wt = rand_tensor(&mut rng, Shape::new(cout, cin, k, k), -1.0, 1.0);
                    fold(check(op, 100 + case as u64, &[x, wt], |tape, v| {
                        tape.conv2d(v[0], v[1], stride, padding)
                    }));
                }
            }
            "depthwise_conv2d" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("dwconv", case);
                    let k = [3, 5, 1][case % 3];
                    let stride = 1 + (case / 3) % 2;
                    let padding = if case % 2 == 0 { Padding::Same } else { Padding::Valid };
                    let n = rng.random_range(1..3usize);
                    let c = rng.random_range(1..5usize);
                    let h = k + rng.random_range(0..3usize);
                    let w = k + rng.random_range(0..3usize);
                    let x = rand_tensor(&mut rng, Shape::new(n, c, h, w), -1.5, 1.5);
                    let wt = rand_tensor(&mut rng, Shape::new(c, 1, k, k), -1.0, 1.0);
                    fold(check(op, 200 + case as u64, &[x, wt], |tape, v| {
                        tape.depthwise_conv2d(v[0], v[1], stride, padding)
                    }));
                }
            }
            "batch_norm(train)" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("bn-train", case);
                    let n = rng.random_range(2..4usize);
                    let c = rng.random_range(1..5usize);
                    let h = rng.random_range(1..4usize);
                    let w = rng.random_range(1..4usize);
                    let x = rand_tensor(&mut rng, Shape::new(n, c, h, w), -1.5, 1.5);
                    let gamma = rand_tensor(&mut rng, Shape::channels(c), -1.5, 1.5);
                    let beta = rand_tensor(&mut rng, Shape::channels(c), -1.0, 1.0);
                    // Train-mode output depends only on batch statistics;
                    // fresh running buffers per evaluation keep the in-place
                    // update from accumulating.
                    fold(check(op, 300 + case as u64, &[x, gamma, beta], move |tape, v| {
                        let mut rm = vec![0.0; c];
                        let mut rv = vec![1.0; c];
                        tape.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, 0.9, 1e-3, Mode::Train)
                    }));
                }
            }
            "batch_norm(eval)" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("bn-eval", case);
                    let n = rng.random_range(1..3usize);
                    let c = rng.random_range(1..5usize);
                    let h = rng.random_range(1..4usize);
                    let w = rng.random_range(1..4usize);
                    let x = rand_tensor(&mut rng, Shape::new(n, c, h, w), -1.5, 1.5);
                    let gamma = rand_tensor(&mut rng, Shape::channels(c), -1.5, 1.5);
                    let beta = rand_tensor(&mut rng, Shape::channels(c), -1.0, 1.0);
                    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.5)).collect();
                    fold(check(op, 400 + case as u64, &[x, gamma, beta], move |tape, v| {
                        let mut rm = mean.clone();
                        let mut rv = var.clone();
                        tape.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, 0.9, 1e-3, Mode::Eval)
                    }));
                }
            }
            "silu" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("silu", case);
                    let shape = rand_shape(&mut rng);
                    let x = rand_tensor(&mut rng, shape, -3.0, 3.0);
                    fold(check(op, 500 + case as u64, &[x], |tape, v| tape.silu(v[0])));
                }
            }
            "sigmoid" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("sigmoid", case);
                    let shape = rand_shape(&mut rng);
                    let x = rand_tensor(&mut rng, shape, -3.0, 3.0);
                    fold(check(op, 600 + case as u64, &[x], |tape, v| tape.sigmoid(v[0])));
                }
            }
            "global_avg_pool" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("gap", case);
                    let shape = rand_shape(&mut rng);
                    let x = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    fold(check(op, 700 + case as u64, &[x], |tape, v| tape.global_avg_pool(v[0])));
                }
            }
            "fully_connected" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("fc", case);
                    let n = rng.random_range(1..4usize);
                    let cin = rng.random_range(1..6usize);
                    let cout = rng.random_range(1..5usize);
                    let x = rand_tensor(&mut rng, Shape::new(n, cin, 1, 1), -1.5, 1.5);
                    let w = rand_tensor(&mut rng, Shape::new(cout, cin, 1, 1), -1.0, 1.0);
                    let b = rand_tensor(&mut rng, Shape::channels(cout), -1.0, 1.0);
                    fold(check(op, 800 + case as u64, &[x, w, b], |tape, v| {
                        tape.fully_connected(v[0], v[1], v[2])
                    }));
                }
            }
            "add" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("add", case);
                    let shape = rand_shape(&mut rng);
                    let a = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    let b = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    fold(check(op, 900 + case as u64, &[a, b], |tape, v| tape.add(v[0], v[1])));
                }
            }
            "mul" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("mul", case);
                    let shape = rand_shape(&mut rng);
                    let a = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    let b = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    fold(check(op, 1000 + case as u64, &[a, b], |tape, v| tape.mul(v[0], v[1])));
                }
            }
            "scale_channels" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("scale", case);
                    let shape = rand_shape(&mut rng);
                    let x = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    let gate = rand_tensor(&mut rng, Shape::new(shape.n, shape.c, 1, 1), -1.5, 1.5);
                    fold(check(op, 1100 + case as u64, &[x, gate], |tape, v| {
                        tape.scale_channels(v[0], v[1])
                    }));
                }
            }
            "dropout(train)" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("dropout", case);
                    let shape = rand_shape(&mut rng);
                    let x = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    let rate = 0.2 + 0.05 * (case % 8) as f64;
                    let tag = case as u64;
                    fold(check(op, 1200 + tag, &[x], move |tape, v| {
                        let mut mask_rng = RngStream::derive(0xD0, "gradcheck-drop", &[tag]);
                        tape.dropout(v[0], rate, Mode::Train, &mut mask_rng)
                    }));
                }
            }
            "stochastic_depth(train)" => {
                let mut kept = 0;
                let mut dropped = 0;
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("sd", case);
                    let shape = rand_shape(&mut rng);
                    let skip = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    let body = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    let survival = 0.3 + 0.06 * case as f64;
                    let tag = case as u64;
                    // Replay the op's own draw to record which branch this
                    // case lands on.
                    if RngStream::derive(0x5D, "gradcheck-sd", &[tag]).random::<f64>() < survival {
                        kept += 1;
                    } else {
                        dropped += 1;
                    }
                    fold(check(op, 1300 + tag, &[skip, body], move |tape, v| {
                        let mut sd_rng = RngStream::derive(0x5D, "gradcheck-sd", &[tag]);
                        tape.stochastic_depth(v[0], v[1], survival, Mode::Train, &mut sd_rng)
                    }));
                }
                // The sweep must exercise both the kept-body and dropped-body
                // branches; a dropped body has zero gradient and the finite
                // difference confirms it.
                assert!(kept > 0 && dropped > 0, "kept {kept}, dropped {dropped}");
            }
            "stochastic_depth(eval)" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("sd-eval", case);
                    let shape = rand_shape(&mut rng);
                    let skip = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    let body = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    fold(check(op, 1400 + case as u64, &[skip, body], |tape, v| {
                        let mut sd_rng = RngStream::derive(0, "unused", &[]);
                        tape.stochastic_depth(v[0], v[1], 0.5, Mode::Eval, &mut sd_rng)
                    }));
                }
            }
            "sum" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("sum", case);
                    let shape = rand_shape(&mut rng);
                    let x = rand_tensor(&mut rng, shape, -1.5, 1.5);
                    fold(check(op, 1500 + case as u64, &[x], |tape, v| tape.sum(v[0])));
                }
            }
            "softmax_cross_entropy" => {
                for case in 0..SHAPES_PER_OP {
                    let mut rng = case_rng("xent", case);
                    let n = rng.random_range(1..5usize);
                    let k = rng.random_range(2..7usize);
                    let logits = rand_tensor(&mut rng, Shape::new(n, k, 1, 1), -2.0, 2.0);
                    // Soft target rows on the simplex, as mixup produces.
                    let mut targets: Vec<f64> =
                        (0..n * k).map(|_| rng.random_range(0.1..1.0)).collect();
                    for row in targets.chunks_mut(k) {
                        let s: f64 = row.iter().sum();
                        for t in row {
                            *t /= s;
                        }
                    }
                    fold(check(op, 1600 + case as u64, &[logits], move |tape, v| {
                        tape.softmax_cross_entropy(v[0], &targets)
                    }));
                }
            }
            other => panic!("unknown op sweep `{other}`"),
        }

        Sweep { op, cases, max_rel, worst }
    }

    /// Sweep every differentiable op.
    pub fn sweep_all() -> Vec<Sweep> {
        ALL_OPS.iter().map(|&op| sweep(op)).collect()
    }
}
