//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segcascade::arch::{chain_receptive_field, Extent, Layer};
use segcascade::gradcheck::{numerical_gradient, relative_error, STEP};
use segcascade::graph::{Graph, Var};
use segcascade::loss::Normalizer;
use segcascade::ops::{NormMode, Padding, RunningStats};
use segcascade::vote::Thresholds;
use segcascade::{Result, Tensor};

pub const INSTANCES: usize = 20;
pub const TOL: f64 = 1e-4;
pub const TOL_BATCHNORM: f64 = 1e-3;

/// Worst finite-difference mismatch of one operation over its instances.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    /// Largest gradient entry seen; far above the absolute floor, so the
    /// comparison is not vacuous.
    pub scale: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst <= self.tolerance && self.scale > 1e-4
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for kinked operations.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise distinct values with gaps far above the difference step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.05 + rng.random_range(0.0..0.01))
}

/// Softmax followed by weighted cross-entropy against fixed random labels,
/// turning any `[B, C>=2, ...]` output into a scalar with a generic upstream
/// gradient.
#[derive(Clone)]
struct Head {
    labels: Vec<u8>,
    weights: Vec<f64>,
}

impl Head {
    fn new(rng: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        let n = shape[0] * shape[2..].iter().product::<usize>();
        Head {
            labels: (0..n).map(|_| rng.random_range(0..shape[1]) as u8).collect(),
            weights: (0..n).map(|_| rng.random_range(0.1..1.0)).collect(),
        }
    }

    fn apply(&self, g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let p = g.softmax(y)?;
        g.weighted_cross_entropy(p, self.labels.clone(), self.weights.clone(), Normalizer::Voxels)
    }
}

/// Largest relative error between backward-pass gradients and central
/// differences over every input of `build`.
fn worst_error(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numerical = numerical_gradient(x, STEP, |probe| {
            let mut g = Graph::new();
            let mut ins = inputs.to_vec();
            ins[i] = probe.clone();
            let vars = ins.into_iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>>>()?;
            let root = build(&mut g, &vars)?;
            Ok(g.value(root).item())
        })?;
        for (&a, &n) in analytic.data().iter().zip(numerical.data()) {
            worst = worst.max(relative_error(a, n));
            scale = scale.max(a.abs());
        }
    }
    Ok((worst, scale))
}

fn spatial(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(lo..=hi)).collect()
}

fn shape(batch: usize, channels: usize, sp: &[usize]) -> Vec<usize> {
    let mut s = vec![batch, channels];
    s.extend_from_slice(sp);
    s
}

type Instance = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn conv_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rank = rng.random_range(2..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let padding = if rng.random_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    };
    let sp = spatial(rng, rank, k.max(2), if rank == 2 { 6 } else { 4 });
    let (cin, cout) = (rng.random_range(1..=2), rng.random_range(2..=3));
    let batch = rng.random_range(1..=2);
    let x = uniform(rng, &shape(batch, cin, &sp), -1.0, 1.0);
    let w = uniform(rng, &shape(cout, cin, &vec![k; rank]), -1.0, 1.0);
    let b = uniform(rng, &[cout], -0.5, 0.5);
    let strides = vec![stride; rank];
    let probe = segcascade::ops::conv_nd(&x, &w, Some(b.data()), &strides, padding)?;
    let head = Head::new(rng, probe.shape());
    Ok((
        vec![x, w, b],
        Box::new(move |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), &strides, padding)?;
            head.apply(g, y)
        }),
    ))
}

fn pool_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rank = rng.random_range(2..=3);
    let w = rng.random_range(2..=3);
    let stride = if rng.random_bool(0.5) { w } else { 1 };
    let sp = spatial(rng, rank, w, if rank == 2 { 7 } else { 5 });
    let batch = rng.random_range(1..=2);
    let x = distinct(rng, &shape(batch, 2, &sp));
    let (win, st) = (vec![w; rank], vec![stride; rank]);
    let probe = segcascade::ops::maxpool_nd(&x, &win, &st)?.output;
    let head = Head::new(rng, probe.shape());
    Ok((
        vec![x],
        Box::new(move |g, v| {
            let y = g.maxpool(v[0], &win, &st)?;
            head.apply(g, y)
        }),
    ))
}

fn upsample_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rank = rng.random_range(2..=3);
    let factor = rng.random_range(2..=3);
    let sp = spatial(rng, rank, 1, 3);
    let x = uniform(rng, &shape(1, 2, &sp), -1.0, 1.0);
    let probe = segcascade::ops::upsample_linear_nd(&x, factor)?;
    let head = Head::new(rng, probe.shape());
    Ok((
        vec![x],
        Box::new(move |g, v| {
            let y = g.upsample(v[0], factor)?;
            head.apply(g, y)
        }),
    ))
}

fn concat_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rank = rng.random_range(2..=3);
    let sp = spatial(rng, rank, 2, 3);
    let b = rng.random_range(1..=2);
    let parts: Vec<Tensor<f64>> = (0..rng.random_range(2..=3))
        .map(|_| {
            let c = rng.random_range(1..=2);
            uniform(rng, &shape(b, c, &sp), -1.0, 1.0)
        })
        .collect();
    let total = parts.iter().map(|p| p.channels()).sum();
    let head = Head::new(rng, &shape(b, total, &sp));
    Ok((
        parts,
        Box::new(move |g, v| {
            let y = g.concat(v)?;
            head.apply(g, y)
        }),
    ))
}

fn slice_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let rank = rng.random_range(2..=3);
    let sp = spatial(rng, rank, 2, 3);
    let c = rng.random_range(3..=5);
    let len = rng.random_range(2..c);
    let start = rng.random_range(0..=c - len);
    let x = uniform(rng, &shape(1, c, &sp), -1.0, 1.0);
    let head = Head::new(rng, &shape(1, len, &sp));
    Ok((
        vec![x],
        Box::new(move |g, v| {
            let y = g.slice_channels(v[0], start, len)?;
            head.apply(g, y)
        }),
    ))
}

fn batchnorm_instance(rng: &mut ChaCha8Rng, mode: NormMode) -> Result<Instance> {
    let rank = rng.random_range(2..=3);
    let sp = spatial(rng, rank, 2, 3);
    let c = rng.random_range(2..=3);
    let batch = rng.random_range(1..=3);
    let x = uniform(rng, &shape(batch, c, &sp), -2.0, 2.0);
    let gamma = uniform(rng, &[c], 0.5, 1.5);
    let beta = uniform(rng, &[c], -0.5, 0.5);
    let running = RunningStats {
        mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let head = Head::new(rng, x.shape());
    Ok((
        vec![x, gamma, beta],
        Box::new(move |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], mode, &running)?;
            head.apply(g, y)
        }),
    ))
}

fn relu_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let batch = rng.random_range(1..=2);
    let sp = spatial(rng, 2, 2, 4);
    let s = shape(batch, 2, &sp);
    let x = off_zero(rng, &s);
    let head = Head::new(rng, &s);
    Ok((
        vec![x],
        Box::new(move |g, v| {
            let y = g.relu(v[0])?;
            head.apply(g, y)
        }),
    ))
}

fn softmax_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (batch, c) = (rng.random_range(1..=2), rng.random_range(2..=4));
    let sp = spatial(rng, 2, 2, 4);
    let s = shape(batch, c, &sp);
    let x = uniform(rng, &s, -3.0, 3.0);
    let head = Head::new(rng, &s);
    Ok((vec![x], Box::new(move |g, v| head.apply(g, v[0]))))
}

fn cross_entropy_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (batch, c) = (rng.random_range(1..=2), rng.random_range(2..=4));
    let sp = spatial(rng, 3, 1, 3);
    let s = shape(batch, c, &sp);
    let p = uniform(rng, &s, 0.05, 1.0);
    let head = Head::new(rng, &s);
    Ok((
        vec![p],
        Box::new(move |g, v| {
            g.weighted_cross_entropy(v[0], head.labels.clone(), head.weights.clone(), Normalizer::Voxels)
        }),
    ))
}

fn sum_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let sp = spatial(rng, 2, 1, 4);
    let x = uniform(rng, &shape(1, 2, &sp), -1.0, 1.0);
    Ok((vec![x], Box::new(|g, v| g.sum(v[0]))))
}

fn combine_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let sp = spatial(rng, 2, 2, 3);
    let s = shape(1, 2, &sp);
    let (a, b) = (uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0));
    let (ca, cb) = (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
    let head = Head::new(rng, &s);
    Ok((
        vec![a, b],
        Box::new(move |g, v| {
            let sa = g.sum(v[0])?;
            let hb = head.apply(g, v[1])?;
            g.combine(&[(sa, ca), (hb, cb)])
        }),
    ))
}

/// Finite-difference check of every differentiable graph operation on
/// [`INSTANCES`] random instances each.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    type Maker = fn(&mut ChaCha8Rng) -> Result<Instance>;
    let makers: [(&'static str, Maker, f64); 12] = [
        ("conv_nd", conv_instance, TOL),
        ("maxpool_nd", pool_instance, TOL),
        ("upsample_linear_nd", upsample_instance, TOL),
        ("concat_channels", concat_instance, TOL),
        ("slice_channels", slice_instance, TOL),
        (
            "batchnorm (train)",
            |r| batchnorm_instance(r, NormMode::Train),
            TOL_BATCHNORM,
        ),
        (
            "batchnorm (infer)",
            |r| batchnorm_instance(r, NormMode::Infer),
            TOL_BATCHNORM,
        ),
        ("relu", relu_instance, TOL),
        ("softmax_channels", softmax_instance, TOL),
        ("weighted_cross_entropy", cross_entropy_instance, TOL),
        ("sum", sum_instance, TOL),
        ("combine", combine_instance, TOL),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (op, make, tolerance) in makers {
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for _ in 0..INSTANCES {
            let (inputs, build) = make(&mut rng)?;
            let (w, s) = worst_error(&inputs, &*build)?;
            worst = worst.max(w);
            scale = scale.max(s);
        }
        out.push(GradReport {
            op,
            instances: INSTANCES,
            worst,
            tolerance,
            scale,
        });
    }
    Ok(out)
}

/// Straight-line vote tree on exact rationals: thresholds are `k / 1000`
/// and every comparison `num / den ≥ k / 1000` is done as
/// `1000 · num ≥ k · den` in integers.
pub fn vote_oracle(v: [u32; 4], t: [u32; 3]) -> u8 {
    let [_, v1, v2, v3] = v.map(u64::from);
    let n = v.iter().map(|&x| u64::from(x)).sum::<u64>();
    let [tt, tc, te] = t.map(u64::from);
    let tumor = v1 + v2 + v3;
    if 1000 * tumor < tt * n {
        0
    } else if 1000 * (v1 + v3) < tc * tumor {
        2
    } else if 1000 * v3 < te * (v1 + v3) {
        1
    } else {
        3
    }
}

/// Every `(v0, v1, v2, v3)` with non-negative entries summing to `n`.
pub fn vote_compositions(n: u32) -> Vec<[u32; 4]> {
    let mut out = Vec::new();
    for a in 0..=n {
        for b in 0..=n - a {
            for c in 0..=n - a - b {
                out.push([a, b, c, n - a - b - c]);
            }
        }
    }
    out
}

/// The default thresholds plus `random` triples in thousandths.
pub fn threshold_triples(seed: u64, random: usize) -> Vec<[u32; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![[400, 300, 400]];
    out.extend((0..random).map(|_| std::array::from_fn(|_| rng.random_range(1..=1000))));
    out
}

pub fn thresholds_of(t: [u32; 3]) -> Thresholds {
    let f = |k: u32| f64::from(k) / 1000.0;
    Thresholds::new(f(t[0]), f(t[1]), f(t[2])).expect("thresholds in (0, 1]")
}

fn conv(k: usize, s: usize) -> Layer {
    Layer::Conv {
        name: None,
        out: 1,
        kernel: Extent::Uniform(k),
        stride: Extent::Uniform(s),
    }
}

fn pool(w: usize) -> Layer {
    Layer::Pool {
        name: None,
        window: Extent::Uniform(w),
        stride: None,
    }
}

/// Layer chains with receptive fields worked out by hand from
/// `rf += (k − 1)·jump, jump *= stride`.
pub fn receptive_field_chains() -> Vec<(&'static str, usize, Vec<Layer>, Vec<usize>)> {
    vec![
        ("conv3", 2, vec![conv(3, 1)], vec![3, 3]),
        // 3 → 4 (jump 2) → 8
        (
            "conv3 pool2 conv3",
            3,
            vec![conv(3, 1), pool(2), conv(3, 1)],
            vec![8, 8, 8],
        ),
        // 5 → 7 (jump 2) → 11
        (
            "conv5 conv3/2 conv3",
            3,
            vec![conv(5, 1), conv(3, 2), conv(3, 1)],
            vec![11, 11, 11],
        ),
        // 3 → 4 (2) → 8 → 10 (4) → 18
        (
            "conv3 pool2 conv3 pool2 conv3",
            2,
            vec![conv(3, 1), pool(2), conv(3, 1), pool(2), conv(3, 1)],
            vec![18, 18],
        ),
        // per axis: x 3 → 4 → 8, y 5 → 6 → 10, z 1 → 1 → 3
        (
            "conv[3,5,1] pool[2,2,1] conv3",
            3,
            vec![
                Layer::Conv {
                    name: None,
                    out: 1,
                    kernel: Extent::PerAxis(vec![3, 5, 1]),
                    stride: Extent::Uniform(1),
                },
                Layer::Pool {
                    name: None,
                    window: Extent::PerAxis(vec![2, 2, 1]),
                    stride: None,
                },
                conv(3, 1),
            ],
            vec![8, 10, 3],
        ),
    ]
}

/// `(name, computed, expected)` for every hand-derived chain.
pub fn check_receptive_field_chains() -> Result<Vec<(&'static str, Vec<usize>, Vec<usize>)>> {
    receptive_field_chains()
        .into_iter()
        .map(|(name, dims, layers, expected)| Ok((name, chain_receptive_field(dims, &layers)?, expected)))
        .collect()
}

/// Random `[C, X, Y, Z]` tensor; every third case has one axis of extent 1
/// and the payload mixes ordinary values with signed zeros, infinities,
/// subnormals and NaNs with varied payload bits.
pub fn random_volume(rng: &mut ChaCha8Rng, case: usize) -> Tensor<f32> {
    let mut dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..=6)).collect();
    if case % 3 == 0 {
        dims[1 + case % 9 / 3] = 1;
    }
    Tensor::from_fn(&dims, |_| match rng.random_range(0..12) {
        0 => f32::from_bits(rng.random()),
        1 => -0.0,
        2 => f32::INFINITY,
        3 => f32::MIN_POSITIVE / 3.0,
        _ => rng.random_range(-1e6f32..1e6),
    })
}

/// Worst deviations over `batches` random label batches: per-class weight
/// sum versus the independently rescaled target, and grand total versus 1.
/// Targets alternate between the two defaults and random vectors; classes
/// go missing at random.
pub fn weight_sum_deviation(seed: u64, batches: usize) -> Result<(f64, f64)> {
    use segcascade::loss::{compute_voxel_weights, TargetWeights};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut class_dev, mut total_dev) = (0.0f64, 0.0f64);
    for b in 0..batches {
        let targets = match b % 3 {
            0 => TargetWeights::volumetric_default(),
            1 => TargetWeights::planar_default(),
            _ => {
                let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut t: Vec<f64> = raw.iter().map(|x| x / s).collect();
                t[3] = 1.0 - t[..3].iter().sum::<f64>();
                TargetWeights::new(t)?
            }
        };
        let present: Vec<bool> = (0..4).map(|_| rng.random_bool(0.75)).collect();
        let allowed: Vec<u8> = (0..4u8).filter(|&c| present[c as usize]).collect();
        let allowed = if allowed.is_empty() {
            vec![rng.random_range(0..4u8)]
        } else {
            allowed
        };
        let labels: Vec<u8> = (0..rng.random_range(1..=600))
            .map(|_| allowed[rng.random_range(0..allowed.len())])
            .collect();
        let w = compute_voxel_weights(&labels, &targets)?;
        let t = targets.as_slice();
        let mass: f64 = (0..4u8).filter(|c| labels.contains(c)).map(|c| t[c as usize]).sum();
        for c in 0..4u8 {
            let got: f64 = labels.iter().zip(&w).filter(|(&l, _)| l == c).map(|(_, &x)| x).sum();
            let want = if labels.contains(&c) { t[c as usize] / mass } else { 0.0 };
            class_dev = class_dev.max((got - want).abs());
        }
        total_dev = total_dev.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((class_dev, total_dev))
}

/// Loss of iteration `t` (1-based) in the scripted schedule run: a
/// geometric decrease for 400 iterations, flat afterwards.
pub fn scripted_loss(t: usize) -> f64 {
    0.99f64.powi(t.min(400) as i32)
}

/// Schedule checkpoints of the scripted run under the default settings
/// (`α = 0.25`, `α_min = 0.001`, `F = 200`, `d_loss = 0.98`), derived by
/// hand: `(iteration, event, α after, F after)`.
///
/// Checks fall every `F` iterations once the history holds `F` losses. The
/// first two windows decrease by `0.99^100 ≈ 0.37`; every window after that
/// is flat and therefore insufficient, so halvings alternate with
/// halve-and-widen and the gap between checks doubles with `F`.
pub fn expected_schedule() -> Vec<(usize, &'static str, f64, usize)> {
    vec![
        (200, "sufficient", 0.25, 200),
        (400, "sufficient", 0.25, 200),
        (600, "halved", 0.125, 200),
        (800, "halved+widened", 0.0625, 400),
        (1200, "halved", 0.03125, 400),
        (1600, "halved+widened", 0.015625, 800),
        (2400, "halved", 0.0078125, 800),
        (3200, "halved+widened", 0.00390625, 1600),
        (4800, "halved", 0.001953125, 1600),
        // 0.0009765625 is clamped to the floor
        (6400, "halved+widened", 0.001, 3200),
        (9600, "halved", 0.001, 3200),
        (12800, "halved+widened", 0.001, 6400),
    ]
}

/// Replay [`scripted_loss`] through the optimizer schedule and record every
/// non-waiting event.
pub fn observed_schedule(iterations: usize) -> Result<Vec<(usize, &'static str, f64, usize)>> {
    use segcascade::optim::{NormSgd, OptimizerConfig, ScheduleEvent};
    let mut opt = NormSgd::<f64>::new(OptimizerConfig::default(), 1)?;
    let mut out = Vec::new();
    for t in 1..=iterations {
        let name = match opt.schedule_update(scripted_loss(t)) {
            ScheduleEvent::Waiting => continue,
            ScheduleEvent::SufficientDecrease => "sufficient",
            ScheduleEvent::Halved => "halved",
            ScheduleEvent::HalvedAndWidened => "halved+widened",
        };
        out.push((t, name, opt.alpha(), opt.window()));
    }
    Ok(out)
}

/// With zero momentum: worst `|‖Δθ‖ − α|` over random gradients, and
/// whether rescaling each gradient by powers of two (exact in floating
/// point) and by arbitrary factors leaves the update bit-identical and
/// within `1e-12`, respectively.
pub fn update_norm_checks(seed: u64, trials: usize) -> Result<(f64, bool, f64)> {
    use segcascade::optim::{NormSgd, OptimizerConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = OptimizerConfig {
        momentum: 0.0,
        ..OptimizerConfig::default()
    };
    let step = |g: &[f64], p0: &[f64]| -> Result<Vec<f64>> {
        let mut opt = NormSgd::<f64>::new(config.clone(), g.len())?;
        let mut p = p0.to_vec();
        opt.step(g, &mut p)?;
        Ok(p.iter().zip(p0).map(|(a, b)| a - b).collect())
    };
    let (mut norm_dev, mut exact, mut scaled_dev) = (0.0f64, true, 0.0f64);
    for _ in 0..trials {
        let n = rng.random_range(1..200);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p0 = vec![0.0; n];
        let d = step(&g, &p0)?;
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm_dev = norm_dev.max((norm - config.alpha_init).abs());
        let pow2 = 2f64.powi(rng.random_range(-30..30));
        let d2 = step(&g.iter().map(|x| x * pow2).collect::<Vec<_>>(), &p0)?;
        exact &= d2.iter().zip(&d).all(|(a, b)| a.to_bits() == b.to_bits());
        let c = rng.random_range(1e-6..1e6);
        let dc = step(&g.iter().map(|x| x * c).collect::<Vec<_>>(), &p0)?;
        for (a, b) in dc.iter().zip(&d) {
            scaled_dev = scaled_dev.max((a - b).abs());
        }
    }
    Ok((norm_dev, exact, scaled_dev))
}

/// Decision-tree agreement over every composition of `n` votes at the
/// default thresholds and `random` more triples: `(cases, mismatches)`.
pub fn vote_agreement(seed: u64, n: u32, random: usize) -> Result<(usize, usize)> {
    use segcascade::vote::{decide_voxel, Comparison, VoteCounts};
    let (mut cases, mut mismatches) = (0, 0);
    for t in threshold_triples(seed, random) {
        let thresholds = thresholds_of(t);
        for v in vote_compositions(n) {
            cases += 1;
            if decide_voxel(VoteCounts::new(v)?, &thresholds, Comparison::Inclusive) != vote_oracle(v, t) {
                mismatches += 1;
            }
        }
    }
    Ok((cases, mismatches))
}

/// Voxels whose label is outside `0..=3` or whose region memberships are
/// not nested (`EC ⊆ TC ⊆ WT`).
pub fn nesting_violations(merged: &[u8]) -> usize {
    let wt = |l: u8| l != 0;
    let tc = |l: u8| l == 1 || l == 3;
    let ec = |l: u8| l == 3;
    merged
        .iter()
        .filter(|&&l| l > 3 || (ec(l) && !tc(l)) || (tc(l) && !wt(l)))
        .count()
}

/// Random ensembles of `members` label volumes merged under random
/// thresholds; total nesting violations over `trials` merges.
pub fn random_merge_violations(seed: u64, trials: usize, members: usize) -> Result<usize> {
    use segcascade::volume::LabelVolume;
    use segcascade::vote::{merge_segmentations, Comparison};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let dims = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let segs: Vec<LabelVolume> = (0..members)
            .map(|_| {
                let mut l = LabelVolume::zeros(dims);
                l.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0..4));
                l
            })
            .collect();
        let t = thresholds_of(std::array::from_fn(|_| rng.random_range(1..=1000)));
        let merged = merge_segmentations(&segs, &t, Comparison::Inclusive)?;
        bad += nesting_violations(merged.data());
        let sizes = segcascade::metrics::region_sizes(merged.data());
        if !(sizes[2] <= sizes[1] && sizes[1] <= sizes[0]) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Write and re-read `count` random volumes in `dir`; number whose shape
/// or any payload bit pattern changed.
pub fn mvol_round_trip_failures(seed: u64, count: usize, dir: &std::path::Path) -> Result<usize> {
    use segcascade::mvol::{read_tensor, write_tensor};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for case in 0..count {
        let t = random_volume(&mut rng, case);
        let path = dir.join(format!("v{case}.mvol"));
        write_tensor(&path, &t)?;
        let back = read_tensor(&path)?;
        let same = back.shape() == t.shape()
            && back
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            failures += 1;
        }
    }
    Ok(failures)
}
