//! Test-side oracles: an independent f64 forward pass for every layer kind
//! and an f64 InfoNCE, used for central finite differences against the
//! library's reverse-mode gradients.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitmoco::arch::{ArchitectureSpec, Model, ProjectorSpec};
use splitmoco::data::{generate_synthetic, SyntheticSpec};
use splitmoco::moco::{info_nce_with_grad, AugmentationConfig, MocoConfig, MomentumPair, NegativeQueue};
use splitmoco::nn::{Conv2d, Dense, Layer, Sgd, SgdConfig, Stack};
use splitmoco::protocol::{ClientState, ServerState};
use splitmoco::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so gradients near zero are
/// compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// Values of a batch flowing through the reference network, plus the sign
/// pattern of every ReLU input (to detect finite-difference kink crossings).
#[derive(Debug, Clone)]
pub struct RefOut {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    pub kinks: Vec<bool>,
    /// Smallest row norm entering an L2 normalization (infinite if none).
    pub min_norm: f64,
}

fn take<'a>(params: &mut impl Iterator<Item = &'a Vec<f64>>) -> &'a Vec<f64> {
    params.next().expect("parameter count mismatch")
}

/// f64 forward of `layers` on a batch `x` with per-sample shape `shape`,
/// reading parameter values from `params` in stack order.
pub fn reference_forward(layers: &[Layer], params: &[Vec<f64>], x: &[f64], batch: usize, shape: &[usize]) -> RefOut {
    let mut cur = x.to_vec();
    let mut shape = shape.to_vec();
    let mut kinks = Vec::new();
    let mut min_norm = f64::INFINITY;
    let mut ps = params.iter();
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                let (nin, nout) = (d.inputs(), d.outputs());
                let w = take(&mut ps);
                let b = take(&mut ps);
                let mut out = vec![0.0; batch * nout];
                for n in 0..batch {
                    for o in 0..nout {
                        let mut acc = b[o];
                        for i in 0..nin {
                            acc += cur[n * nin + i] * w[i * nout + o];
                        }
                        out[n * nout + o] = acc;
                    }
                }
                cur = out;
                shape = vec![nout];
            }
            Layer::Conv2d(c) => {
                let w = take(&mut ps);
                let b = take(&mut ps);
                let (cin, h, wd) = (shape[0], shape[1], shape[2]);
                let cout = c.out_channels();
                let k = c.kernel();
                let (s, p) = (c.stride as isize, c.padding as isize);
                let ho = ((h as isize + 2 * p - k as isize) / s + 1) as usize;
                let wo = ((wd as isize + 2 * p - k as isize) / s + 1) as usize;
                let mut out = vec![0.0; batch * cout * ho * wo];
                for n in 0..batch {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut acc = b[co];
                                for ci in 0..cin {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = oy as isize * s + ky as isize - p;
                                            let ix = ox as isize * s + kx as isize - p;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xv = cur[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                            acc += xv * w[((co * cin + ci) * k + ky) * k + kx];
                                        }
                                    }
                                }
                                out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                            }
                        }
                    }
                }
                cur = out;
                shape = vec![cout, ho, wo];
            }
            Layer::Relu => {
                kinks.extend(cur.iter().map(|&v| v > 0.0));
                cur.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Layer::AvgPool2d { kernel } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (h / kernel, w / kernel);
                let mut out = vec![0.0; batch * c * ho * wo];
                for nc in 0..batch * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for dy in 0..*kernel {
                                for dx in 0..*kernel {
                                    acc += cur[nc * h * w + (oy * kernel + dy) * w + ox * kernel + dx];
                                }
                            }
                            out[nc * ho * wo + oy * wo + ox] = acc / (kernel * kernel) as f64;
                        }
                    }
                }
                cur = out;
                shape = vec![c, ho, wo];
            }
            Layer::Flatten => shape = vec![shape.iter().product()],
            Layer::L2Norm => {
                let d = shape[0];
                for row in cur.chunks_mut(d) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    min_norm = min_norm.min(n);
                    if n > 0.0 {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
            }
            Layer::Upsample { factor } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut out = vec![0.0; batch * c * ho * wo];
                for nc in 0..batch * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[nc * ho * wo + oy * wo + ox] = cur[nc * h * w + (oy / factor) * w + ox / factor];
                        }
                    }
                }
                cur = out;
                shape = vec![c, ho, wo];
            }
            Layer::Reshape { shape: s } => shape = s.clone(),
        }
    }
    assert!(ps.next().is_none(), "unused parameters");
    RefOut {
        values: cur,
        shape,
        kinks,
        min_norm,
    }
}

/// Mean InfoNCE in f64, written directly from the definition.
pub fn reference_info_nce(q: &[f64], k: &[f64], queue: &[Vec<f64>], width: usize, tau: f64) -> f64 {
    let rows = q.len() / width;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for r in 0..rows {
        let qr = &q[r * width..][..width];
        let kr = &k[r * width..][..width];
        let pos = (dot(qr, kr) / tau).exp();
        let neg: f64 = queue.iter().map(|m| (dot(qr, m) / tau).exp()).sum();
        total += -(pos / (pos + neg)).ln();
    }
    total / rows as f64
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_error < FD_TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Scalar objective evaluated by the reference: the network output feeds
/// either a fixed random projection or InfoNCE against fixed keys.
pub enum Objective {
    Projection(Vec<f64>),
    InfoNce {
        keys: Tensor,
        queue: NegativeQueue,
        tau: f32,
    },
}

impl Objective {
    fn reference(&self, out: &[f64], width: usize) -> f64 {
        match self {
            Objective::Projection(w) => out.iter().zip(w).map(|(a, b)| a * b).sum(),
            Objective::InfoNce { keys, queue, tau } => {
                let q: Vec<Vec<f64>> = queue.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
                reference_info_nce(out, &to_f64(keys), &q, width, *tau as f64)
            }
        }
    }

    fn output_grad(&self, y: &Tensor) -> Tensor {
        match self {
            Objective::Projection(w) => Tensor::new(y.shape().to_vec(), w.iter().map(|&v| v as f32).collect()).unwrap(),
            Objective::InfoNce { keys, queue, tau } => info_nce_with_grad(y, keys, queue, *tau).unwrap().1,
        }
    }
}

/// Compares the stack's backward pass against central differences of the
/// reference objective, for every parameter and input coordinate.
/// Coordinates whose perturbation flips a ReLU are skipped.
pub fn check_stack(stack: &Stack, x: &Tensor, objective: &Objective) -> GradCheck {
    let shape = x.sample_shape().to_vec();
    let batch = x.rows();
    let mut s = stack.clone();
    let y = s.forward(x, true).unwrap();
    let grads = s.backward(&objective.output_grad(&y)).unwrap();
    let params: Vec<Vec<f64>> = stack.params().iter().map(|t| to_f64(t)).collect();
    let x64 = to_f64(x);
    let base = reference_forward(stack.layers(), &params, &x64, batch, &shape);
    for (a, b) in base.values.iter().zip(y.data()) {
        assert!((a - *b as f64).abs() < 1e-4 * (1.0 + a.abs()), "reference disagrees with forward: {a} vs {b}");
    }
    let width = base.shape.iter().product();
    let eval = |p: &[Vec<f64>], xin: &[f64]| {
        let r = reference_forward(stack.layers(), p, xin, batch, &shape);
        (objective.reference(&r.values, width), r.kinks)
    };
    let mut report = GradCheck::default();
    let mut record = |analytic: f64, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)| {
        if plus.1 != base.kinks || minus.1 != base.kinks {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * FD_STEP);
        report.max_rel_error = report.max_rel_error.max(rel_error(analytic, numeric));
        report.checked += 1;
    };
    for (pi, g) in grads.params.iter().enumerate() {
        for j in 0..params[pi].len() {
            let mut p = params.clone();
            p[pi][j] += FD_STEP;
            let plus = eval(&p, &x64);
            p[pi][j] -= 2.0 * FD_STEP;
            let minus = eval(&p, &x64);
            record(g.data()[j] as f64, plus, minus);
        }
    }
    for j in 0..x64.len() {
        let mut xi = x64.clone();
        xi[j] += FD_STEP;
        let plus = eval(&params, &xi);
        xi[j] -= 2.0 * FD_STEP;
        let minus = eval(&params, &xi);
        record(grads.input.data()[j] as f64, plus, minus);
    }
    report
}

/// Normalization is singular at the origin and too curved near it for a
/// step of `FD_STEP`; instances closer than this are not used.
pub const MIN_NORM_MARGIN: f64 = 0.5;

/// Whether finite differences are meaningful for `stack` at `x`.
pub fn well_conditioned(stack: &Stack, x: &Tensor) -> bool {
    let params: Vec<Vec<f64>> = stack.params().iter().map(|t| to_f64(t)).collect();
    reference_forward(stack.layers(), &params, &to_f64(x), x.rows(), x.sample_shape()).min_norm >= MIN_NORM_MARGIN
}

pub fn random_tensor(shape: &[usize], scale: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn unit_rows(rows: usize, width: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = random_tensor(&[rows, width], 1.0, rng);
    for r in 0..rows {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

pub fn projection_for(stack: &Stack, x: &Tensor, rng: &mut impl Rng) -> Objective {
    let y = stack.infer(x).unwrap();
    Objective::Projection((0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// A single-layer instance of `kind` with random parameters and input.
pub fn layer_instance(kind: &str, seed: u64) -> (Stack, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 2;
    let (layers, shape): (Vec<Layer>, Vec<usize>) = match kind {
        "dense" => (vec![Layer::Dense(random_dense(3, 4, &mut rng))], vec![3]),
        "conv2d" => {
            let stride = 1 + (seed as usize % 2);
            let kernel = if seed % 3 == 0 { 1 } else { 3 };
            (vec![Layer::Conv2d(random_conv(2, 2, kernel, stride, &mut rng))], vec![2, 5, 5])
        }
        "relu" => (vec![Layer::Relu], vec![6]),
        "avgpool2d" => (vec![Layer::AvgPool2d { kernel: 2 }], vec![2, 4, 4]),
        "flatten" => (vec![Layer::Flatten], vec![2, 2, 3]),
        "l2norm" => (vec![Layer::L2Norm], vec![5]),
        "upsample" => (vec![Layer::Upsample { factor: 2 }], vec![1, 2, 3]),
        "reshape" => (vec![Layer::Reshape { shape: vec![2, 3] }], vec![6]),
        other => panic!("unknown layer kind {other}"),
    };
    let mut full = vec![batch];
    full.extend(&shape);
    (Stack::new(layers), random_tensor(&full, 1.0, &mut rng))
}

pub const LAYER_KINDS: [&str; 8] = [
    "dense", "conv2d", "relu", "avgpool2d", "flatten", "l2norm", "upsample", "reshape",
];

pub fn random_dense(nin: usize, nout: usize, rng: &mut impl Rng) -> Dense {
    let mut d = Dense::init(nin, nout, rng);
    d.bias = random_tensor(&[nout], 0.5, rng);
    d
}

pub fn random_conv(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Conv2d {
    let mut c = Conv2d::init(cin, cout, k, stride, rng);
    c.bias = random_tensor(&[cout], 0.5, rng);
    c
}

/// A random valid stack of at most four layers and at most 64 parameters,
/// with its input batch.
pub fn random_stack(seed: u64) -> (Stack, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let spatial = rng.random_bool(0.5);
        let mut shape: Vec<usize> = if spatial {
            vec![rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=4)]
        } else {
            vec![rng.random_range(2..=5)]
        };
        let input = shape.clone();
        let mut layers = Vec::new();
        let depth = rng.random_range(1..=4);
        for _ in 0..depth {
            let layer = if shape.len() == 3 {
                match rng.random_range(0..5) {
                    0 => Layer::Conv2d(random_conv(shape[0], rng.random_range(1..=2), 3, rng.random_range(1..=2), &mut rng)),
                    1 => Layer::Relu,
                    2 if shape[1] >= 2 && shape[2] >= 2 && shape[1] % 2 == 0 && shape[2] % 2 == 0 => {
                        Layer::AvgPool2d { kernel: 2 }
                    }
                    3 if shape[1] <= 3 => Layer::Upsample { factor: 2 },
                    _ => Layer::Flatten,
                }
            } else {
                match rng.random_range(0..4) {
                    0 | 1 => Layer::Dense(random_dense(shape[0], rng.random_range(1..=4), &mut rng)),
                    2 => Layer::Relu,
                    _ => Layer::L2Norm,
                }
            };
            shape = layer.output_shape(&shape).unwrap();
            layers.push(layer);
        }
        let stack = Stack::new(layers);
        if stack.param_count() > 64 {
            continue;
        }
        let mut full = vec![2];
        full.extend(&input);
        return (stack, random_tensor(&full, 1.0, &mut rng));
    }
}

pub fn small_spec() -> ArchitectureSpec {
    ArchitectureSpec::from_compact("small", [1, 6, 6], "c2s2-c2s1-d4", ProjectorSpec { hidden: 4, outputs: 3 }).unwrap()
}

/// InfoNCE against fixed unit keys and a full queue of unit negatives.
pub fn info_nce_objective(rows: usize, width: usize, negatives: usize, seed: u64) -> Objective {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = unit_rows(rows, width, &mut rng);
    let mut queue = NegativeQueue::new(negatives, width).unwrap();
    queue.push(&unit_rows(negatives, width, &mut rng)).unwrap();
    Objective::InfoNce { keys, queue, tau: 0.5 }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn moco(width: usize, cap: usize) -> MocoConfig {
    MocoConfig {
        tau: 0.2,
        ema_momentum: 0.9,
        queue_capacity: cap,
        embedding_dim: width,
    }
}

/// An unsplit trainer doing on one stack what the split protocol does on two.
struct Centralized {
    pair: MomentumPair,
    opt: Sgd,
    queue: NegativeQueue,
    moco: MocoConfig,
}

impl Centralized {
    fn step(&mut self, x: &Tensor, lr: f32) -> f32 {
        let z_q = self.pair.online.forward(x, true).unwrap();
        let z_k = self.pair.momentum.infer(x).unwrap();
        let (loss, g) = info_nce_with_grad(&z_q, &z_k, &self.queue, self.moco.tau).unwrap();
        let grads = self.pair.online.backward(&g).unwrap();
        self.opt.step(self.pair.online.params_mut(), &grads.params, lr).unwrap();
        self.pair.ema_update(self.moco.ema_momentum).unwrap();
        self.queue.push(&z_k).unwrap();
        loss
    }
}

fn split_flat(client: &Stack, server: &Stack) -> Vec<f32> {
    let mut v = client.param_set().flatten();
    v.extend(server.param_set().flatten());
    v
}

/// Largest differences between split and unsplit training.
#[derive(Debug, Clone, Copy)]
pub struct SplitGap {
    pub params: f32,
    pub momentum: f32,
    pub loss: f32,
}

/// Trains the bundled toy model for `steps` steps twice from the same
/// initialization and prefilled queue: once as one client plus the server
/// split at `cut`, once as a single unsplit stack. Views are the raw
/// minibatch (identity augmentation).
pub fn split_training_gap(cut: usize, steps: usize, batch: usize, seed: u64) -> SplitGap {
    let spec = ArchitectureSpec::builtin("toy").unwrap();
    let model = Model::build(&spec, seed);
    let data = generate_synthetic(
        &SyntheticSpec {
            classes: 2,
            per_class: 20,
            shape: [1, 16, 16],
            noise: 0.3,
        },
        seed + 5,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let mut queue = NegativeQueue::new(64, 32).unwrap();
    queue.push(&unit_rows(16, 32, &mut rng)).unwrap();
    let sgd = SgdConfig::default();
    let split = model.split(cut).unwrap();
    let shard: Vec<usize> = (0..data.len()).collect();
    let mut client = ClientState::new(0, split.client.clone(), sgd, shard, seed).unwrap();
    let mut server = ServerState::new(split.server.clone(), sgd, None, moco(32, 64)).unwrap();
    server.queue = queue.clone();
    let whole = model.whole();
    let mut central = Centralized {
        opt: Sgd::new(sgd, &whole.params()),
        pair: MomentumPair::new(whole),
        queue,
        moco: moco(32, 64),
    };
    let lr = 0.05;
    let mut loss_gap = 0.0f32;
    for _ in 0..steps {
        let mb = client.next_minibatch(&data, batch).unwrap();
        let (on, mo) = client.step_forward(&mb, &AugmentationConfig::identity()).unwrap();
        let (grads, loss) = server.step(&[on], &[mo], lr).unwrap();
        client.step_backward(&grads[0], lr, 0.9).unwrap();
        loss_gap = loss_gap.max((loss - central.step(&mb, lr)).abs());
    }
    SplitGap {
        params: max_abs_diff(
            &split_flat(&client.pair.online, &server.pair.online),
            &central.pair.online.param_set().flatten(),
        ),
        momentum: max_abs_diff(
            &split_flat(&client.pair.momentum, &server.pair.momentum),
            &central.pair.momentum.param_set().flatten(),
        ),
        loss: loss_gap,
    }
}

/// The first `count` well-conditioned instances produced by `make` over
/// consecutive seeds, with the seed that produced each.
pub fn conditioned<T>(count: usize, make: impl Fn(u64) -> (Stack, Tensor, T)) -> Vec<(u64, Stack, Tensor, T)> {
    (0..)
        .map(|seed| (seed, make(seed)))
        .filter(|(_, (s, x, _))| well_conditioned(s, x))
        .take(count)
        .map(|(seed, (s, x, t))| (seed, s, x, t))
        .collect()
}

/// Projector head (dense, ReLU, dense, L2 norm) under InfoNCE.
pub fn projector_instance(seed: u64) -> (Stack, Tensor, Objective) {
    let narrow = ArchitectureSpec::from_compact("n", [1, 4, 4], "d6", ProjectorSpec { hidden: 5, outputs: 4 }).unwrap();
    let head = Model::build(&narrow, seed).projector();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[3, 6], 1.0, &mut rng);
    (head, x, info_nce_objective(3, 4, 5, seed))
}

/// A whole small model (convs, dense, projector) under InfoNCE.
pub fn model_instance(seed: u64) -> (Stack, Tensor, Objective) {
    let stack = Model::build(&small_spec(), seed).whole();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
    let x = random_tensor(&[2, 1, 6, 6], 1.0, &mut rng);
    (stack, x, info_nce_objective(2, 3, 4, seed))
}

/// A single layer of `kind` under a random linear objective.
pub fn layer_case(kind: &str, seed: u64) -> (Stack, Tensor, Objective) {
    let (stack, x) = layer_instance(kind, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let obj = projection_for(&stack, &x, &mut rng);
    (stack, x, obj)
}
