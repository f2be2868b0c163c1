//! Shape contracts and exact identity properties of the network blocks.

use super::{random_tensor, rng};
use pecad::nets::params::seeded_rng;
use pecad::nets::{
    attention_combine, mixed_channel_groups, Arch, Classifier, ClassifierConfig, DilatedResidualBlock, Graph, Jpu,
    MixedDepthwiseConv, Network, ParamBuilder, ParamStore, Scale, SeLayer, Segmenter, SegmenterConfig,
    Tensor,
};
use pecad::training::{bce, focal_bce};
use pecad::PecadError;
use rand::Rng;

/// Every check, for the acceptance run.
pub const ALL: &[(&str, fn())] = &[
    ("classifier_shapes_for_every_preset", classifier_shapes_for_every_preset),
    ("segmenter_shapes_for_every_preset", segmenter_shapes_for_every_preset),
    ("segmenter_rejects_indivisible_input", segmenter_rejects_indivisible_input),
    ("desk_presets_are_smaller_than_paper_presets", desk_presets_are_smaller_than_paper_presets),
    ("residual_block_with_zeroed_branch_is_identity", residual_block_with_zeroed_branch_is_identity),
    ("dilated_receptive_field", dilated_receptive_field),
    ("mixed_depthwise_with_delta_kernels_is_identity", mixed_depthwise_with_delta_kernels_is_identity),
    ("mixed_channel_split", mixed_channel_split),
    ("single_group_matches_plain_depthwise", single_group_matches_plain_depthwise),
    ("saturated_se_gate_is_identity", saturated_se_gate_is_identity),
    ("jpu_shapes_and_zero_weights", jpu_shapes_and_zero_weights),
    ("attention_combine_gates_pixels", attention_combine_gates_pixels),
    ("saturated_attention_reduces_to_encoder_decoder_branch", saturated_attention_reduces_to_encoder_decoder_branch),
    ("focal_without_focusing_is_half_bce", focal_without_focusing_is_half_bce),
];

pub fn run<F>(store: &ParamStore, x: &Tensor, train: bool, f: F) -> Tensor
where
    F: Fn(&mut Graph<'_>, pecad::nets::Var) -> pecad::Result<pecad::nets::Var>,
{
    let mut g = Graph::new(store, train);
    let xv = g.input(x.clone());
    let y = f(&mut g, xv).unwrap();
    g.value(y).clone()
}

pub fn zero(store: &mut ParamStore, id: pecad::nets::ParamId) {
    store.param_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

pub fn assert_unit_probs(t: &Tensor) {
    assert!(t.data().iter().all(|&p| p > 0.0 && p < 1.0), "probabilities outside (0, 1)");
}

pub fn delta_kernels(store: &mut ParamStore, conv: &MixedDepthwiseConv) {
    for (_, len, c) in &conv.groups {
        let k = c.kernel;
        let w = store.param_mut(c.weight);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..*len {
            w.data_mut()[ch * k * k + (k / 2) * k + k / 2] = 1.0;
        }
    }
}

/// Direct per-channel zero-padded convolution.
pub fn naive_depthwise(x: &Tensor, w: &Tensor, k: usize) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * c * h * wd];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            let (ii, jj) = (i as isize + ki as isize - p, j as isize + kj as isize - p);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            s += x.data()[((b * c + ch) * h + ii as usize) * wd + jj as usize]
                                * w.data()[(ch * k + ki) * k + kj];
                        }
                    }
                    out[((b * c + ch) * h + i) * wd + j] = s;
                }
            }
        }
    }
    out
}

pub fn classifier_shapes_for_every_preset() {
    for arch in [Arch::Drn, Arch::Mixnet] {
        for scale in [Scale::Desk, Scale::Paper] {
            let cfg = ClassifierConfig::preset(arch, scale);
            let size = cfg.input.height;
            let net = Classifier::build(&cfg, 1).unwrap();
            let x = random_tensor(&[2, 1, size, size], &mut rng(2));
            let y = net.predict(&x).unwrap();
            assert_eq!(y.shape(), &[2, 1], "{arch:?}/{scale:?}");
            assert_unit_probs(&y);
        }
    }
}

pub fn segmenter_shapes_for_every_preset() {
    for scale in [Scale::Desk, Scale::Paper] {
        let cfg = SegmenterConfig::preset(scale);
        let size = cfg.input.height;
        let net = Segmenter::build(&cfg, 3).unwrap();
        let x = random_tensor(&[1, 1, size, size], &mut rng(4));
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, size, size], "{scale:?}");
        assert_unit_probs(&y);
    }
}

pub fn segmenter_rejects_indivisible_input() {
    let net = Segmenter::build(&SegmenterConfig::preset(Scale::Desk), 5).unwrap();
    let x = Tensor::zeros(&[1, 1, 60, 60]);
    assert!(matches!(net.predict(&x), Err(PecadError::Shape(_))));
    assert!(SegmenterConfig::preset(Scale::Desk).with_input_size(60).validate().is_err());
}

pub fn desk_presets_are_smaller_than_paper_presets() {
    for arch in [Arch::Drn, Arch::Mixnet] {
        let desk = Classifier::build(&ClassifierConfig::preset(arch, Scale::Desk), 1).unwrap();
        let paper = Classifier::build(&ClassifierConfig::preset(arch, Scale::Paper), 1).unwrap();
        assert!(desk.param_count() < paper.param_count(), "{arch:?}");
    }
    let desk = Segmenter::build(&SegmenterConfig::preset(Scale::Desk), 1).unwrap();
    let paper = Segmenter::build(&SegmenterConfig::preset(Scale::Paper), 1).unwrap();
    assert!(desk.param_count() < paper.param_count());
}

pub fn residual_block_with_zeroed_branch_is_identity() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(6);
    let block = DilatedResidualBlock::new(&mut ParamBuilder::new(&mut store, &mut r), 3, 3, 2, 1).unwrap();
    assert!(block.projection.is_none());
    zero(&mut store, block.conv1.weight);
    zero(&mut store, block.conv2.weight);
    let x = random_tensor(&[2, 3, 7, 7], &mut rng(7));
    for train in [true, false] {
        let y = run(&store, &x, train, |g, x| block.forward(g, x));
        assert_eq!(y.data(), x.data(), "train={train}");
    }
}

pub fn dilated_receptive_field() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(8);
    let block = DilatedResidualBlock::new(&mut ParamBuilder::new(&mut store, &mut r), 1, 1, 2, 1).unwrap();
    assert_eq!(block.conv1.receptive_field(), 5);
    let x = random_tensor(&[1, 1, 9, 9], &mut rng(9));
    let y = run(&store, &x, false, |g, x| block.forward(g, x));
    assert_eq!(y.shape(), x.shape());
}

pub fn mixed_depthwise_with_delta_kernels_is_identity() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(10);
    let conv = MixedDepthwiseConv::new(&mut ParamBuilder::new(&mut store, &mut r), 8, &[3, 5, 7, 9], 1).unwrap();
    delta_kernels(&mut store, &conv);
    let x = random_tensor(&[2, 8, 11, 11], &mut rng(11));
    let y = run(&store, &x, false, |g, x| conv.forward(g, x));
    assert_eq!(y.data(), x.data());
}

pub fn mixed_channel_split() {
    assert_eq!(mixed_channel_groups(8, 2), vec![4, 4]);
    assert_eq!(mixed_channel_groups(10, 4), vec![4, 2, 2, 2]);
    let mut store = ParamStore::new();
    let mut r = seeded_rng(12);
    let conv = MixedDepthwiseConv::new(&mut ParamBuilder::new(&mut store, &mut r), 8, &[3, 5], 1).unwrap();
    let sizes: Vec<(usize, usize)> = conv.groups.iter().map(|(s, l, _)| (*s, *l)).collect();
    assert_eq!(sizes, vec![(0, 4), (4, 4)]);
    let x = random_tensor(&[1, 8, 10, 10], &mut rng(13));
    assert_eq!(run(&store, &x, false, |g, x| conv.forward(g, x)).shape(), &[1, 8, 10, 10]);
}

pub fn single_group_matches_plain_depthwise() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(14);
    let conv = MixedDepthwiseConv::new(&mut ParamBuilder::new(&mut store, &mut r), 3, &[3], 1).unwrap();
    let x = random_tensor(&[2, 3, 6, 5], &mut rng(15));
    let y = run(&store, &x, false, |g, x| conv.forward(g, x));
    let want = naive_depthwise(&x, store.param(conv.groups[0].2.weight), 3);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

pub fn saturated_se_gate_is_identity() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(16);
    let se = SeLayer::new(&mut ParamBuilder::new(&mut store, &mut r), 4, 2).unwrap();
    zero(&mut store, se.fc2.weight);
    store.param_mut(se.fc2.bias).data_mut().iter_mut().for_each(|v| *v = 1000.0);
    let x = random_tensor(&[2, 4, 5, 5], &mut rng(17));
    let y = run(&store, &x, false, |g, x| se.forward(g, x));
    assert_eq!(y.data(), x.data());
    let zeros = Tensor::zeros(&[1, 4, 3, 3]);
    let mut store2 = ParamStore::new();
    let mut r2 = seeded_rng(18);
    let se2 = SeLayer::new(&mut ParamBuilder::new(&mut store2, &mut r2), 4, 2).unwrap();
    assert!(run(&store2, &zeros, false, |g, x| se2.forward(g, x)).data().iter().all(|&v| v == 0.0));
}

pub fn jpu_shapes_and_zero_weights() {
    let mut store = ParamStore::new();
    let mut r = seeded_rng(19);
    let jpu = Jpu::new(&mut ParamBuilder::new(&mut store, &mut r), 4, 6, 3, &[1, 2, 4, 8]).unwrap();
    let d3 = random_tensor(&[1, 4, 50, 50], &mut rng(20));
    let d4 = random_tensor(&[1, 6, 25, 25], &mut rng(21));
    let eval = |store: &ParamStore, jpu: &Jpu| {
        let mut g = Graph::new(store, false);
        let a = g.input(d3.clone());
        let b = g.input(d4.clone());
        let y = jpu.forward(&mut g, a, b).unwrap();
        g.value(y).clone()
    };
    assert_eq!(eval(&store, &jpu).shape(), &[1, 12, 50, 50]);

    let mut store1 = ParamStore::new();
    let mut r1 = seeded_rng(22);
    let single = Jpu::new(&mut ParamBuilder::new(&mut store1, &mut r1), 4, 6, 3, &[1]).unwrap();
    assert_eq!(eval(&store1, &single).shape(), &[1, 3, 50, 50]);

    for b in &jpu.branches {
        zero(&mut store, b.conv.weight);
    }
    assert!(eval(&store, &jpu).data().iter().all(|&v| v == 0.0));
}

pub fn attention_combine_gates_pixels() {
    let store = ParamStore::new();
    let f = random_tensor(&[2, 3, 4, 4], &mut rng(23));
    let combine = |a: Tensor| {
        let mut g = Graph::new(&store, false);
        let fv = g.input(f.clone());
        let av = g.input(a);
        let y = attention_combine(&mut g, fv, av).unwrap();
        g.value(y).clone()
    };
    assert_eq!(combine(Tensor::full(&[2, 1, 4, 4], 1.0)).data(), f.data());
    assert!(combine(Tensor::zeros(&[2, 1, 4, 4])).data().iter().all(|&v| v == 0.0));
    let mut hot = Tensor::zeros(&[2, 1, 4, 4]);
    hot.data_mut()[16 + 5] = 1.0;
    let y = combine(hot);
    for (i, (&a, &b)) in y.data().iter().zip(f.data()).enumerate() {
        let (n, p) = (i / 48, i % 16);
        if n == 1 && p == 5 {
            assert_eq!(a, b);
        } else {
            assert_eq!(a, 0.0);
        }
    }
}

pub fn saturated_attention_reduces_to_encoder_decoder_branch() {
    let mut net = Segmenter::build(&SegmenterConfig::preset(Scale::Desk).with_input_size(32), 24).unwrap();
    let (w, b) = (net.anet.out.weight, net.anet.out.bias.unwrap());
    let store = net.store_mut();
    zero(store, w);
    store.param_mut(b).data_mut()[0] = 1000.0;
    let x = random_tensor(&[2, 1, 32, 32], &mut rng(25));
    for train in [false, true] {
        let full = run(net.store(), &x, train, |g, x| net.forward(g, x));
        let rux = run(net.store(), &x, train, |g, x| net.forward_rux_only(g, x));
        assert_eq!(full.data(), rux.data(), "train={train}");
    }
}

pub fn focal_without_focusing_is_half_bce() {
    let mut r = rng(33);
    for _ in 0..100 {
        let n = r.random_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let f = focal_bce(&p, &t, 0.0, 0.5).unwrap();
        let b = bce(&p, &t).unwrap();
        assert!((f.value - 0.5 * b.value).abs() <= 1e-12);
        for (gf, gb) in f.grad.iter().zip(&b.grad) {
            assert!((gf - 0.5 * gb).abs() <= 1e-12);
        }
    }
}
