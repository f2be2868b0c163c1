//! Central-difference gradient checks of every trainable block and loss.

use super::{grad_check, loss_grad_error, random_tensor, rng, GradReport};
use pecad::nets::params::seeded_rng;
use pecad::nets::{
    attention_combine, ANet, Arch, Classifier, ClassifierConfig, DilatedResidualBlock, Jpu, MixedDepthwiseConv,
    Network, ParamBuilder, ParamStore, Scale, SeLayer, Segmenter, SegmenterConfig,
};
use pecad::training::{bce, dice_loss, focal_bce, seg_loss};
use rand::Rng;
use std::sync::Mutex;

pub const TOL: f64 = 1e-4;

pub const ALL: &[(&str, fn())] = &[
    ("dilated_residual_block_with_projection", dilated_residual_block_with_projection),
    ("dilated_residual_block_identity_shortcut", dilated_residual_block_identity_shortcut),
    ("mixed_depthwise_conv", mixed_depthwise_conv),
    ("squeeze_excitation", squeeze_excitation),
    ("joint_pyramid_upsampling_both_inputs", joint_pyramid_upsampling_both_inputs),
    ("attention_branch_and_gate", attention_branch_and_gate),
    ("desk_drn_classifier", desk_drn_classifier),
    ("desk_mixnet_classifier", desk_mixnet_classifier),
    ("desk_segmenter", desk_segmenter),
    ("loss_gradients_match_finite_differences", loss_gradients_match_finite_differences),
];

/// Largest relative error seen by [`assert_ok`] in this process.
pub static WORST: Mutex<f64> = Mutex::new(0.0);

pub fn assert_ok(what: &str, r: GradReport) {
    {
        let mut w = WORST.lock().unwrap();
        *w = w.max(r.worst);
    }
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(r.worst < TOL, "{what}: relative error {:.3e} at {}", r.worst, r.worst_at);
}

pub fn classifier(arch: Arch) -> Classifier {
    Classifier::build(&ClassifierConfig::preset(arch, Scale::Desk).with_input_size(16), 23).unwrap()
}

pub fn probs_and_targets(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let p = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
    let t = (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    (p, t)
}

pub fn dilated_residual_block_with_projection() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(1);
    let block = DilatedResidualBlock::new(&mut ParamBuilder::new(&mut store, &mut r), 2, 3, 2, 1).unwrap();
    let x = random_tensor(&[2, 2, 6, 6], &mut rng(2));
    assert_ok("residual/projection", grad_check(&store, &x, |g, x| block.forward(g, x), usize::MAX, 3));
}

pub fn dilated_residual_block_identity_shortcut() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(4);
    let block = DilatedResidualBlock::new(&mut ParamBuilder::new(&mut store, &mut r), 1, 1, 1, 1).unwrap();
    let x = random_tensor(&[2, 1, 4, 4], &mut rng(5));
    assert_ok("residual/identity", grad_check(&store, &x, |g, x| block.forward(g, x), usize::MAX, 6));
}

pub fn mixed_depthwise_conv() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(7);
    let conv = MixedDepthwiseConv::new(&mut ParamBuilder::new(&mut store, &mut r), 5, &[3, 5], 1).unwrap();
    let x = random_tensor(&[2, 5, 6, 6], &mut rng(8));
    assert_ok("mixed depthwise", grad_check(&store, &x, |g, x| conv.forward(g, x), usize::MAX, 9));
}

pub fn squeeze_excitation() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(10);
    let se = SeLayer::new(&mut ParamBuilder::new(&mut store, &mut r), 4, 2).unwrap();
    let x = random_tensor(&[2, 4, 3, 3], &mut rng(11));
    assert_ok("se", grad_check(&store, &x, |g, x| se.forward(g, x), usize::MAX, 12));
}

pub fn joint_pyramid_upsampling_both_inputs() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(13);
    let jpu = Jpu::new(&mut ParamBuilder::new(&mut store, &mut r), 3, 2, 2, &[1, 2]).unwrap();
    let d3 = random_tensor(&[2, 3, 4, 4], &mut rng(14));
    let d4 = random_tensor(&[2, 2, 2, 2], &mut rng(15));
    let via_d3 = grad_check(
        &store,
        &d3,
        |g, x| {
            let d4 = g.input(d4.clone());
            jpu.forward(g, x, d4)
        },
        usize::MAX,
        16,
    );
    assert_ok("jpu/down3", via_d3);
    let via_d4 = grad_check(
        &store,
        &d4,
        |g, x| {
            let d3 = g.input(d3.clone());
            jpu.forward(g, d3, x)
        },
        usize::MAX,
        17,
    );
    assert_ok("jpu/down4", via_d4);
}

pub fn attention_branch_and_gate() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(18);
    let anet = ANet::new(&mut ParamBuilder::new(&mut store, &mut r), 1, 3, 4).unwrap();
    let x = random_tensor(&[2, 1, 5, 5], &mut rng(19));
    assert_ok("a-net", grad_check(&store, &x, |g, x| anet.forward(g, x), usize::MAX, 20));

    let features = random_tensor(&[2, 3, 5, 5], &mut rng(21));
    let gated = grad_check(
        &store,
        &features,
        |g, f| {
            let x = g.input(x.clone());
            let a = anet.forward(g, x)?;
            attention_combine(g, f, a)
        },
        usize::MAX,
        22,
    );
    assert_ok("attention combine", gated);
}

pub fn desk_drn_classifier() {
    let net = classifier(Arch::Drn);
    let x = random_tensor(&[2, 1, 16, 16], &mut rng(24));
    assert_ok("desk drn", grad_check(net.store(), &x, |g, x| net.forward(g, x), 12, 25));
}

pub fn desk_mixnet_classifier() {
    let net = classifier(Arch::Mixnet);
    let x = random_tensor(&[2, 1, 16, 16], &mut rng(26));
    assert_ok("desk mixnet", grad_check(net.store(), &x, |g, x| net.forward(g, x), 12, 27));
}

pub fn desk_segmenter() {
    let net = Segmenter::build(&SegmenterConfig::preset(Scale::Desk).with_input_size(16), 28).unwrap();
    let x = random_tensor(&[2, 1, 16, 16], &mut rng(29));
    assert_ok("desk segmenter", grad_check(net.store(), &x, |g, x| net.forward(g, x), 12, 30));
}

pub fn loss_gradients_match_finite_differences() {
    let (p, t) = probs_and_targets(40, 31);
    let checks: Vec<(&str, f64)> = vec![
        ("bce", loss_grad_error(&p, |q| {
            let l = bce(q, &t).unwrap();
            (l.value, l.grad)
        })),
        ("focal", loss_grad_error(&p, |q| {
            let l = focal_bce(q, &t, 2.0, 0.25).unwrap();
            (l.value, l.grad)
        })),
        ("focal gamma=0", loss_grad_error(&p, |q| {
            let l = focal_bce(q, &t, 0.0, 0.5).unwrap();
            (l.value, l.grad)
        })),
        ("dice", loss_grad_error(&p, |q| {
            let l = dice_loss(q, &t, 1.0).unwrap();
            (l.value, l.grad)
        })),
        ("bce+dice", loss_grad_error(&p, |q| {
            let l = seg_loss(q, &t, 1.0).unwrap();
            (l.value, l.grad)
        })),
    ];
    for (name, err) in checks {
        {
            let mut w = WORST.lock().unwrap();
            *w = w.max(err);
        }
        assert!(err < TOL, "{name}: relative error {err:.3e}");
    }
}
