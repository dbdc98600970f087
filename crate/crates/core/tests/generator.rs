mod common;

use std::time::Instant;

use common::*;
use panoptic_kernels::generator::{batch_normalize, spade_modulation};
use panoptic_kernels::tensor::leaky_relu;
use panoptic_kernels::{
    generator_forward, panoptic_conv_forward, panoptic_conv_forward_optimized, resblock_forward,
    shared_encoder_features, spade_denorm, standard_conv_forward, ConvParams, Generator,
    GeneratorConfig, PanopticMap, ResBlockParams, ScalarKind, SemanticMap, SpadeParams, Tensor,
};
use rand::Rng;

fn fixture(seed: u64, h: usize, w: usize) -> (SemanticMap, PanopticMap) {
    let mut r = rng(seed);
    let p = rect_map(&mut r, h, w, h * w / 64, 24);
    (semantic(&p), p)
}

fn spade(r: &mut rand_chacha::ChaCha8Rng, classes: usize, hidden: usize, c: usize) -> SpadeParams {
    SpadeParams {
        shared: random_params(r, hidden, classes, 3),
        gamma: random_params(r, c, hidden, 3),
        beta: random_params(r, c, hidden, 3),
        slope: 0.2,
        eps: 1e-5,
    }
}

fn zero_heads(sp: &SpadeParams) -> SpadeParams {
    let c = sp.gamma.out_channels();
    let hidden = sp.gamma.in_channels();
    SpadeParams {
        gamma: ConvParams::zeros(c, hidden, 3).unwrap(),
        beta: ConvParams::zeros(c, hidden, 3).unwrap(),
        ..sp.clone()
    }
}

/// Per-channel normalization written out from its definition.
fn brute_normalize(x: &Tensor, eps: f64) -> Tensor {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let mut stats = Vec::new();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| x.plane(b, ch).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        stats.push((mean, var));
    }
    Tensor::from_fn(x.shape(), |b, ch, i, j| {
        let (mean, var) = stats[ch];
        (x.get(b, ch, i, j) - mean) / (var + eps).sqrt()
    })
}

fn brute_leaky(x: &Tensor, slope: f64) -> Tensor {
    Tensor::from_fn(x.shape(), |b, c, i, j| {
        let v = x.get(b, c, i, j);
        if v < 0.0 {
            slope * v
        } else {
            v
        }
    })
}

#[test]
fn forward_is_deterministic_bounded_and_fast() {
    let (s, p) = fixture(1, 64, 128);
    let cfg = GeneratorConfig::toy(64, 128, CLASSES, vec![32, 16, 8]).unwrap();
    let start = Instant::now();
    let a = generator_forward::<f64>(&s, &p, &cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let b = generator_forward::<f64>(&s, &p, &cfg).unwrap();
    assert_eq!(a.shape(), [1, 3, 64, 128]);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    assert!(elapsed < 10.0, "forward took {elapsed:.2} s");
}

#[test]
fn seed_changes_output() {
    let (s, p) = fixture(2, 16, 32);
    let mut cfg = GeneratorConfig::toy(16, 32, CLASSES, vec![8, 4]).unwrap();
    let a = generator_forward::<f64>(&s, &p, &cfg).unwrap();
    cfg.seed = 1;
    let b = generator_forward::<f64>(&s, &p, &cfg).unwrap();
    assert_ne!(a, b);
}

#[test]
fn relabeling_instances_is_invisible() {
    let (s, p) = fixture(3, 32, 64);
    let cfg = GeneratorConfig::toy(32, 64, CLASSES, vec![16, 8, 8]).unwrap();
    let g = Generator::<f64>::new(cfg).unwrap();
    let base = g.forward(&s, &p).unwrap();

    // permute instance indices within each class; the semantic map is unchanged
    let within_class = p.relabel(|id| (id / 1000) * 1000 + (997 - id % 1000)).unwrap();
    assert_eq!(semantic(&within_class), s);
    assert_eq!(g.forward(&s, &within_class).unwrap(), base);

    // any injective relabeling (odd multipliers are bijections mod 2^32)
    let scrambled = p.relabel(|id| id.wrapping_mul(2_654_435_761)).unwrap();
    assert_eq!(scrambled.distinct_ids().len(), p.distinct_ids().len());
    assert_eq!(g.forward(&s, &scrambled).unwrap(), base);
}

#[test]
fn f32_generator_tracks_f64() {
    let (s, p) = fixture(4, 16, 16);
    let cfg = GeneratorConfig::toy(16, 16, CLASSES, vec![8, 4]).unwrap();
    let a = generator_forward::<f64>(&s, &p, &cfg).unwrap();
    let cfg32 = GeneratorConfig {
        scalar: ScalarKind::F32,
        ..cfg
    };
    let b = generator_forward::<f32>(&s, &p, &cfg32).unwrap();
    assert!(b.is_finite());
    assert!(b.cast::<f64>().max_abs_diff(&a).unwrap() < 1e-4);
}

#[test]
fn indivisible_maps_are_rejected() {
    let cfg = GeneratorConfig::toy(16, 16, CLASSES, vec![8, 4]).unwrap();
    let (s, p) = fixture(5, 16, 24);
    assert!(generator_forward::<f64>(&s, &p, &cfg).is_err());
    let (s2, _) = fixture(5, 16, 16);
    let (_, p2) = fixture(6, 32, 32);
    assert!(generator_forward::<f64>(&s2, &p2, &cfg).is_err());
}

#[test]
fn spade_with_zero_heads_is_plain_normalization() {
    let mut r = rng(7);
    let (s, _) = fixture(7, 8, 8);
    let x = random_tensor(&mut r, [1, 3, 8, 8]);
    let sp = zero_heads(&spade(&mut r, CLASSES, 6, 3));
    let out = spade_denorm(&x, &s, &sp).unwrap();
    assert_eq!(out, batch_normalize(&x, 1e-5));
    assert!(rel_diff(&out, &brute_normalize(&x, 1e-5)) < 1e-12);
}

#[test]
fn spade_on_constant_input_is_beta() {
    let mut r = rng(8);
    let (s, _) = fixture(8, 8, 8);
    let x = Tensor::from_fn([1, 2, 8, 8], |_, c, _, _| 0.25 + c as f64);
    let sp = spade(&mut r, CLASSES, 5, 2);
    let out = spade_denorm(&x, &s, &sp).unwrap();
    let (_, beta) = spade_modulation(&s, &sp).unwrap();
    assert_eq!(out, beta);
}

#[test]
fn spade_matches_formula_oracle() {
    let mut r = rng(9);
    for seed in 0..5 {
        let (s, _) = fixture(10 + seed, 8, 16);
        let x = random_tensor(&mut r, [1, 4, 8, 16]);
        let sp = spade(&mut r, CLASSES, 6, 4);
        let out = spade_denorm(&x, &s, &sp).unwrap();
        let hidden = brute_leaky(&brute_standard_conv(&brute_one_hot(&s, CLASSES), &sp.shared), 0.2);
        let gamma = brute_standard_conv(&hidden, &sp.gamma);
        let beta = brute_standard_conv(&hidden, &sp.beta);
        let xn = brute_normalize(&x, 1e-5);
        let expected = Tensor::from_fn(x.shape(), |b, c, i, j| {
            xn.get(b, c, i, j) * (1.0 + gamma.get(0, c, i, j)) + beta.get(0, c, i, j)
        });
        assert!(rel_diff(&out, &expected) < 1e-10);
    }
}

fn random_block(r: &mut rand_chacha::ChaCha8Rng, c_in: usize, c_out: usize) -> ResBlockParams {
    let mid = c_in.min(c_out);
    ResBlockParams {
        norm_0: spade(r, CLASSES, 6, c_in),
        conv_0: random_params(r, mid, c_in, 3),
        norm_1: spade(r, CLASSES, 6, mid),
        conv_1: random_params(r, c_out, mid, 3),
        shortcut: (c_in != c_out).then(|| (spade(r, CLASSES, 6, c_in), random_params(r, c_out, c_in, 1))),
        slope: 0.2,
    }
}

#[test]
fn resblock_with_zero_main_path_returns_input() {
    let mut r = rng(11);
    let (s, p) = fixture(11, 8, 8);
    let mut block = random_block(&mut r, 4, 4);
    block.conv_0 = ConvParams::zeros(4, 4, 3).unwrap();
    block.conv_1 = ConvParams::zeros(4, 4, 3).unwrap();
    let x = random_tensor(&mut r, [1, 4, 8, 8]);
    assert_eq!(resblock_forward(&x, &s, &p, &block).unwrap(), x);
}

#[test]
fn resblock_matches_composition_of_public_ops() {
    let mut r = rng(12);
    for (c_in, c_out) in [(4, 4), (6, 3)] {
        let (s, p) = fixture(12, 16, 16);
        let block = random_block(&mut r, c_in, c_out);
        let x = random_tensor(&mut r, [1, c_in, 16, 16]);
        let out = resblock_forward(&x, &s, &p, &block).unwrap();

        let step = |x: &Tensor, norm, conv, optimized: bool| {
            let h = leaky_relu(&spade_denorm(x, &s, norm).unwrap(), 0.2);
            if optimized {
                panoptic_conv_forward_optimized(&h, &p, conv).unwrap()
            } else {
                panoptic_conv_forward(&h, &p, conv).unwrap()
            }
        };
        for optimized in [true, false] {
            let main = step(&step(&x, &block.norm_0, &block.conv_0, optimized), &block.norm_1, &block.conv_1, optimized);
            let skip = match &block.shortcut {
                Some((norm, conv)) => step(&x, norm, conv, optimized),
                None => x.clone(),
            };
            let expected = Tensor::from_fn(main.shape(), |b, c, i, j| main.get(b, c, i, j) + skip.get(b, c, i, j));
            if optimized {
                assert_eq!(out, expected);
            } else {
                assert!(rel_diff(&out, &expected) < 1e-12);
            }
        }
    }
}

#[test]
fn cross_instance_coupling_flows_through_normalization_only() {
    let mut r = rng(13);
    let p = PanopticMap::from_fn(8, 8, |_, j| if j < 4 { 1001 } else { 2001 }).unwrap();
    let s = semantic(&p);
    let block = random_block(&mut r, 3, 3);
    let x = random_tensor(&mut r, [1, 3, 8, 8]);
    let mut y = x.clone();
    for c in 0..3 {
        for i in 0..8 {
            for j in 4..8 {
                y.set(0, c, i, j, x.get(0, c, i, j) + r.gen_range(0.5..1.0));
            }
        }
    }
    // the conv alone never reaches across the id boundary
    let cx = panoptic_conv_forward(&x, &p, &block.conv_0).unwrap();
    let cy = panoptic_conv_forward(&y, &p, &block.conv_0).unwrap();
    for c in 0..3 {
        for i in 0..8 {
            for j in 0..4 {
                assert_eq!(cx.get(0, c, i, j), cy.get(0, c, i, j));
            }
        }
    }
    // the block does, through the batch statistics
    let bx = resblock_forward(&x, &s, &p, &block).unwrap();
    let by = resblock_forward(&y, &s, &p, &block).unwrap();
    assert!((0..8).any(|i| bx.get(0, 0, i, 0) != by.get(0, 0, i, 0)));
}

#[test]
fn shared_encoder_is_one_set_of_weights() {
    let (s, p) = fixture(14, 32, 32);
    let cfg = GeneratorConfig::toy(32, 32, CLASSES, vec![8, 6, 4]).unwrap();
    let g = Generator::<f64>::new(cfg.clone()).unwrap();
    let names: Vec<String> = g.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.contains("encoder")).count(), 1);

    for stage in 0..3 {
        let feats = g.shared_encoder_features(&s, &p, stage).unwrap();
        let (h, w) = cfg.stage_input_dims(stage);
        assert_eq!(feats.shape(), [1, cfg.stage_channels[stage], 2 * h, 2 * w]);
        let encoded = g.encode(&s, &p, (2 * h, 2 * w)).unwrap();
        assert_eq!(feats, standard_conv_forward(&encoded, &g.stages()[stage].reducer).unwrap());
        assert_eq!(shared_encoder_features::<f64>(&s, &p, stage, &cfg).unwrap(), feats);
    }
    assert!(g.shared_encoder_features(&s, &p, 3).is_err());
}

#[test]
fn encoder_is_constant_away_from_boundaries() {
    let p = PanopticMap::from_fn(16, 16, |i, j| if (4..10).contains(&i) && (5..12).contains(&j) { 3001 } else { 3000 }).unwrap();
    let s = SemanticMap::new(16, 16, vec![3; 256], CLASSES).unwrap();
    let cfg = GeneratorConfig::toy(16, 16, CLASSES, vec![4]).unwrap();
    let g = Generator::<f64>::new(cfg).unwrap();
    let f = g.encode(&s, &p, (16, 16)).unwrap();
    let full_window = |i: usize, j: usize| {
        (1..15).contains(&i)
            && (1..15).contains(&j)
            && (i - 1..=i + 1).all(|y| (j - 1..=j + 1).all(|x| p.get(y, x) == p.get(i, j)))
    };
    let mut checked = 0;
    for c in 0..4 {
        let reference = f.get(0, c, 1, 1);
        for i in 0..16 {
            for j in 0..16 {
                if full_window(i, j) {
                    assert_eq!(f.get(0, c, i, j), reference, "({i},{j})");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 4 * 100);
}

#[test]
fn weights_round_trip_through_fixtures() {
    let (s, p) = fixture(15, 16, 16);
    let cfg = GeneratorConfig::toy(16, 16, CLASSES, vec![8, 4]).unwrap();
    let g = Generator::<f64>::new(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    g.save_weights(dir.path()).unwrap();
    let mut other = Generator::<f64>::new(GeneratorConfig { seed: 99, ..cfg.clone() }).unwrap();
    assert_ne!(other.forward(&s, &p).unwrap(), g.forward(&s, &p).unwrap());
    other.load_weights(dir.path()).unwrap();
    assert_eq!(other.forward(&s, &p).unwrap(), g.forward(&s, &p).unwrap());

    let mut wrong = Generator::<f64>::new(GeneratorConfig::toy(16, 16, CLASSES, vec![8, 8]).unwrap()).unwrap();
    assert!(wrong.load_weights(dir.path()).is_err());
}
