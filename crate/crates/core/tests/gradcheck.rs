//! Central finite-difference validation of every differentiable operation,
//! and of the fully assembled model graph, at strict float64 tolerances.
//!
//! Each op test builds a small scalar-valued graph on the tape, runs one
//! backward pass, and compares every input coordinate's gradient against a
//! symmetric difference quotient of the re-executed forward pass. Smooth
//! single ops must agree to a relative error below 1e-4; the full graph,
//! which chains dozens of ops, below 1e-3.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use bsq_core::autodiff::{Tape, ValueId};
use bsq_core::bsm::{self, ModelParams};
use bsq_core::losses::mask_loss;
use bsq_core::morphology::{target_set, BinaryMask, KernelSize};
use bsq_core::{BSMConfig, ConvKind, FeatureField, LossConfig};

const OP_TOL: f64 = 1e-4;
const GRAPH_TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

/// One leaf of the graph under test.
#[derive(Clone)]
struct LeafSpec {
    shape: (usize, usize, usize),
    values: Vec<f64>,
}

impl LeafSpec {
    fn new(shape: (usize, usize, usize), values: Vec<f64>) -> Self {
        assert_eq!(shape.0 * shape.1 * shape.2, values.len());
        LeafSpec { shape, values }
    }
}

fn register(tape: &mut Tape, leaves: &[LeafSpec]) -> Vec<ValueId> {
    leaves
        .iter()
        .map(|leaf| {
            let (c, h, w) = leaf.shape;
            let field = FeatureField::from_vec(c, h, w, leaf.values.clone()).unwrap();
            tape.leaf(&field)
        })
        .collect()
}

/// Check d(loss)/d(leaf) for every coordinate of every leaf against central
/// differences of the rebuilt graph. Returns the worst relative error.
fn fd_check(leaves: &[LeafSpec], build: impl Fn(&mut Tape, &[ValueId]) -> ValueId) -> f64 {
    let mut tape = Tape::new();
    let ids = register(&mut tape, leaves);
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).len(), 1, "graph under test must be scalar");
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = ids.iter().map(|id| tape.grad(*id).to_vec()).collect();

    let eval = |leaves: &[LeafSpec]| -> f64 {
        let mut tape = Tape::new();
        let ids = register(&mut tape, leaves);
        let loss = build(&mut tape, &ids);
        tape.value(loss)[0]
    };

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        for i in 0..leaf.values.len() {
            let mut plus = leaves.to_vec();
            plus[li].values[i] += STEP;
            let mut minus = leaves.to_vec();
            minus[li].values[i] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let analytic = grads[li][i];
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            let err = (analytic - fd).abs() / denom;
            assert!(
                err.is_finite(),
                "non-finite FD comparison at leaf {li} coord {i}: analytic {analytic}, fd {fd}"
            );
            worst = worst.max(err);
        }
    }
    worst
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, so ReLU kinks cannot sit inside the
/// finite-difference stencil.
fn off_kink(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..1.2)
        })
        .collect()
}

/// Flow components bounded away from integers, where bilinear interpolation
/// has corners.
fn fractional_flow(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.3..0.7)
        })
        .collect()
}

fn checker_mask(h: usize, w: usize, phase: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| (y + x + phase) % 2 == 0)
}

/// Probe weights for collapsing a multi-channel field to one channel before
/// the loss, so upstream gradients are non-uniform over space and channels.
fn probe_leaves(rng: &mut impl Rng, channels: usize) -> [LeafSpec; 2] {
    [
        LeafSpec::new((channels, 1, 1), uniform(rng, channels, -1.0, 1.0)),
        LeafSpec::new((1, 1, 1), uniform(rng, 1, -0.1, 0.1)),
    ]
}

/// conv(kind) -> 1x1 collapse -> BCE, checking input, weights, and bias.
fn conv_graph_err(kind: ConvKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (in_c, out_c, h, w) = (3, 4, 6, 6);
    let (oh, ow) = match kind {
        ConvKind::Deconv2x2 => (2 * h, 2 * w),
        _ => (h, w),
    };
    let mask = checker_mask(oh, ow, 0);
    let [probe_w, probe_b] = probe_leaves(&mut rng, out_c);
    let leaves = vec![
        LeafSpec::new((in_c, h, w), uniform(&mut rng, in_c * h * w, -1.0, 1.0)),
        LeafSpec::new((out_c * in_c * kind.kernel_len(), 1, 1), uniform(&mut rng, out_c * in_c * kind.kernel_len(), -0.6, 0.6)),
        LeafSpec::new((out_c, 1, 1), uniform(&mut rng, out_c, -0.3, 0.3)),
        probe_w,
        probe_b,
    ];
    fd_check(&leaves, |tape, ids| {
        let mid = tape.conv(ids[0], ids[1], ids[2], kind).unwrap();
        let collapsed = tape.conv(mid, ids[3], ids[4], ConvKind::Conv1x1).unwrap();
        tape.bce(collapsed, &mask).unwrap()
    })
}

#[test]
fn conv1x1_gradients_match_finite_differences() {
    let err = conv_graph_err(ConvKind::Conv1x1, 11);
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn conv3x3_gradients_match_finite_differences() {
    let err = conv_graph_err(ConvKind::Conv3x3, 12);
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn deconv2x2_gradients_match_finite_differences() {
    let err = conv_graph_err(ConvKind::Deconv2x2, 13);
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn relu_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let leaves = vec![LeafSpec::new((1, 6, 6), off_kink(&mut rng, 36))];
    let mask = checker_mask(6, 6, 1);
    let err = fd_check(&leaves, |tape, ids| {
        let activated = tape.relu(ids[0]);
        tape.bce(activated, &mask).unwrap()
    });
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn warp_gradients_match_finite_differences_for_input_and_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (c, h, w) = (2, 6, 6);
    let mask = checker_mask(h, w, 0);
    let [probe_w, probe_b] = probe_leaves(&mut rng, c);
    let leaves = vec![
        LeafSpec::new((c, h, w), uniform(&mut rng, c * h * w, -1.0, 1.0)),
        LeafSpec::new((2, h, w), fractional_flow(&mut rng, 2 * h * w)),
        probe_w,
        probe_b,
    ];
    let err = fd_check(&leaves, |tape, ids| {
        let warped = tape.warp(ids[0], ids[1]).unwrap();
        let collapsed = tape.conv(warped, ids[2], ids[3], ConvKind::Conv1x1).unwrap();
        tape.bce(collapsed, &mask).unwrap()
    });
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn avg_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mask = checker_mask(3, 3, 0);
    let leaves = vec![LeafSpec::new((1, 6, 6), uniform(&mut rng, 36, -1.0, 1.0))];
    let err = fd_check(&leaves, |tape, ids| {
        let pooled = tape.avg_pool2(ids[0]).unwrap();
        tape.bce(pooled, &mask).unwrap()
    });
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn bce_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mask = checker_mask(5, 5, 0);
    let leaves = vec![LeafSpec::new((1, 5, 5), uniform(&mut rng, 25, -2.0, 2.0))];
    let err = fd_check(&leaves, |tape, ids| tape.bce(ids[0], &mask).unwrap());
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn weighted_bce_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    // Unbalanced target, so the positive-class weight actually differs from 1.
    let mask = BinaryMask::from_fn(5, 5, |y, x| y == 2 && x < 3);
    let leaves = vec![LeafSpec::new((1, 5, 5), uniform(&mut rng, 25, -2.0, 2.0))];
    let err = fd_check(&leaves, |tape, ids| tape.weighted_bce(ids[0], &mask).unwrap());
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn dice_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mask = checker_mask(5, 5, 1);
    let leaves = vec![LeafSpec::new((1, 5, 5), uniform(&mut rng, 25, -2.0, 2.0))];
    let err = fd_check(&leaves, |tape, ids| tape.dice(ids[0], &mask, 1.0).unwrap());
    assert!(err < OP_TOL, "worst relative error {err}");
}

#[test]
fn add_concat_and_weighted_sum_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (c, h, w) = (2, 4, 4);
    let mask = checker_mask(h, w, 0);
    let [sum_probe_w, sum_probe_b] = probe_leaves(&mut rng, c);
    let [cat_probe_w, cat_probe_b] = probe_leaves(&mut rng, 2 * c);
    let leaves = vec![
        LeafSpec::new((c, h, w), uniform(&mut rng, c * h * w, -1.0, 1.0)),
        LeafSpec::new((c, h, w), uniform(&mut rng, c * h * w, -1.0, 1.0)),
        sum_probe_w,
        sum_probe_b,
        cat_probe_w,
        cat_probe_b,
    ];
    let err = fd_check(&leaves, |tape, ids| {
        let summed = tape.add(ids[0], ids[1]).unwrap();
        let a = tape.conv(summed, ids[2], ids[3], ConvKind::Conv1x1).unwrap();
        let first = tape.bce(a, &mask).unwrap();
        let stacked = tape.concat(ids[0], ids[1]).unwrap();
        let b = tape.conv(stacked, ids[4], ids[5], ConvKind::Conv1x1).unwrap();
        let second = tape.dice(b, &mask, 1.0).unwrap();
        tape.sum_scalars(&[(first, 0.7), (second, 1.3)]).unwrap()
    });
    assert!(err < OP_TOL, "worst relative error {err}");
}

/// The full model graph at the 8-channel, 8x8-feature-grid configuration:
/// analytic parameter gradients against finite differences of the pure
/// forward pass, on a deterministic subsample of coordinates per slot.
#[test]
fn full_graph_gradients_match_finite_differences() {
    let cfg = BSMConfig { feat_channels: 8, feature_grid: 8, kernel_size: 5, ..BSMConfig::default() };
    let grid = cfg.target_grid();
    let loss_cfg = LossConfig::default();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let image = FeatureField::from_fn(1, grid, grid, |_, _, _| rng.gen_range(-1.0..1.0));
    let disc = BinaryMask::from_fn(grid, grid, |y, x| {
        let (dy, dx) = (y as f64 + 0.5 - grid as f64 / 2.0, x as f64 + 0.5 - grid as f64 / 2.0);
        (dy * dy + dx * dx).sqrt() < grid as f64 / 3.0
    });
    let sample = bsq_core::Sample { image, targets: target_set(&disc, KernelSize::new(5).unwrap()) };

    // Nudge every zero-initialized slot: the flow convolutions so the warps
    // sample at fractional offsets away from the bilinear kinks, and the head
    // projections so gradients actually propagate into the upstream slots
    // instead of vanishing behind an all-zero 1x1 conv.
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    let noise = Normal::new(0.0, 0.08).unwrap();
    for (name, spec) in params.slots_mut() {
        if name.starts_with("flow_") || name.ends_with("_out") {
            for v in spec.weights.iter_mut().chain(spec.bias.iter_mut()) {
                *v += noise.sample(&mut rng);
            }
        }
    }

    let (row, grads) = bsm::loss_gradients(&sample, &params, &cfg, &loss_cfg).unwrap();
    assert!(row.total.is_finite());

    let eval = |params: &ModelParams| -> f64 {
        let out = bsm::forward(&sample.image, params, &cfg).unwrap();
        mask_loss(&out.branch_logits(), &sample.targets, &cfg.branches, &loss_cfg).unwrap().total
    };

    const COORDS_PER_SLOT: usize = 20;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut by_slot: BTreeMap<String, f64> = BTreeMap::new();
    for (name, (gw, gb)) in &grads {
        let n_w = gw.len();
        let n_total = n_w + gb.len();
        let picks: Vec<usize> = if n_total <= COORDS_PER_SLOT {
            (0..n_total).collect()
        } else {
            (0..COORDS_PER_SLOT).map(|_| rng.gen_range(0..n_total)).collect()
        };
        let mut slot_worst: f64 = 0.0;
        for idx in picks {
            let analytic = if idx < n_w { gw[idx] } else { gb[idx - n_w] };
            let mut probe = |delta: f64| -> f64 {
                let mut p = params.clone();
                for (slot_name, spec) in p.slots_mut() {
                    if slot_name == name {
                        if idx < n_w {
                            spec.weights[idx] += delta;
                        } else {
                            spec.bias[idx - n_w] += delta;
                        }
                    }
                }
                eval(&p)
            };
            let fd = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            slot_worst = slot_worst.max((analytic - fd).abs() / denom);
            checked += 1;
        }
        worst = worst.max(slot_worst);
        by_slot.insert(name.clone(), slot_worst);
    }

    assert!(checked > 200, "too few coordinates checked: {checked}");
    assert!(worst < GRAPH_TOL, "worst relative error {worst} across slots: {by_slot:?}");
}
