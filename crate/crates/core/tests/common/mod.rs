//! Fixtures and independent oracles shared by the integration tests.
//!
//! The `brute_*` oracles never call the kernels under test; they re-derive
//! every value from the maps and raw tensor data with plain loops. The
//! finite-difference drivers at the bottom only use forward passes to check
//! the analytic backward passes.

#![allow(dead_code)]

use panoptic_kernels::upsample::{panoptic_upsample_backward, stage_maps};
use panoptic_kernels::{
    panoptic_conv_backward, panoptic_conv_forward, panoptic_upsample, ConvParams, HoleFillParams,
    PanopticMap, Routing, SemanticMap, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_params(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvParams {
    let w = random_tensor(rng, [c_out, c_in, k, k]);
    let b = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ConvParams::new(w, b).unwrap()
}

/// Every pixel draws independently from `n_ids` arbitrary ids.
pub fn scattered_map(rng: &mut ChaCha8Rng, h: usize, w: usize, n_ids: usize) -> PanopticMap {
    let palette: Vec<u32> = (0..n_ids)
        .map(|i| (i % CLASSES) as u32 * 1000 + rng.gen_range(0..1000))
        .collect();
    let ids = (0..h * w).map(|_| palette[rng.gen_range(0..n_ids)]).collect();
    PanopticMap::new(h, w, ids).unwrap()
}

/// A stuff background overlaid with `n_rects` rectangular instances of up
/// to `max_side` pixels per side.
pub fn rect_map(rng: &mut ChaCha8Rng, h: usize, w: usize, n_rects: usize, max_side: usize) -> PanopticMap {
    let mut ids = vec![0u32; h * w];
    for inst in 0..n_rects {
        let class = rng.gen_range(1..CLASSES as u32);
        let id = class * 1000 + inst as u32 % 999 + 1;
        let rh = rng.gen_range(1..=max_side.min(h));
        let rw = rng.gen_range(1..=max_side.min(w));
        let top = rng.gen_range(0..=h - rh);
        let left = rng.gen_range(0..=w - rw);
        for i in top..top + rh {
            ids[i * w + left..i * w + left + rw].fill(id);
        }
    }
    PanopticMap::new(h, w, ids).unwrap()
}

pub fn semantic(p: &PanopticMap) -> SemanticMap {
    SemanticMap::from_panoptic(p, CLASSES).unwrap()
}

/// `max |a - b| / max(1, max |b|)`.
pub fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    diff / scale
}

fn inside(h: usize, w: usize, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
}

/// Direct evaluation of the masked, renormalized convolution at every pixel.
pub fn brute_panoptic_conv(x: &Tensor, p: &PanopticMap, params: &ConvParams) -> Tensor {
    let [n, c_in, h, w] = x.shape();
    let k = params.kernel_size();
    let r = (k / 2) as isize;
    let wt = params.weights();
    Tensor::from_fn([n, params.out_channels(), h, w], |b, o, i, j| {
        let center = p.get(i, j);
        let mut acc = 0.0;
        let mut valid = 0usize;
        for u in 0..k {
            for v in 0..k {
                let (y, xx) = (i as isize + u as isize - r, j as isize + v as isize - r);
                if !inside(h, w, y, xx) || p.get(y as usize, xx as usize) != center {
                    continue;
                }
                valid += 1;
                for c in 0..c_in {
                    acc += wt.get(o, c, u, v) * x.get(b, c, y as usize, xx as usize);
                }
            }
        }
        assert!(valid >= 1, "center pixel always matches itself");
        (k * k) as f64 / valid as f64 * acc + params.bias()[o]
    })
}

/// Textbook zero-padded stride-1 convolution.
pub fn brute_standard_conv(x: &Tensor, params: &ConvParams) -> Tensor {
    let [n, c_in, h, w] = x.shape();
    let k = params.kernel_size();
    let r = (k / 2) as isize;
    let wt = params.weights();
    Tensor::from_fn([n, params.out_channels(), h, w], |b, o, i, j| {
        let mut acc = 0.0;
        for c in 0..c_in {
            for u in 0..k {
                for v in 0..k {
                    let (y, xx) = (i as isize + u as isize - r, j as isize + v as isize - r);
                    if inside(h, w, y, xx) {
                        acc += wt.get(o, c, u, v) * x.get(b, c, y as usize, xx as usize);
                    }
                }
            }
        }
        acc + params.bias()[o]
    })
}

/// Source of upsampled pixel `(i, j)`: scan the four candidates in order and
/// take the first whose low resolution id equals the pixel's id.
pub fn alignment_source(p_d: &PanopticMap, p_u: &PanopticMap, i: usize, j: usize) -> Option<(usize, usize)> {
    let id = p_u.get(i, j);
    let candidates = [(i / 2, j / 2), (i / 2 + 1, j / 2), (i / 2, j / 2 + 1), (i / 2 + 1, j / 2 + 1)];
    candidates
        .into_iter()
        .find(|&(si, sj)| si < p_d.height() && sj < p_d.width() && p_d.get(si, sj) == id)
}

/// Per-pixel alignment oracle: `(features, correction bits)`.
pub fn brute_align(f_d: &Tensor, p_d: &PanopticMap, p_u: &PanopticMap) -> (Tensor, Vec<bool>) {
    let [n, c, h, w] = f_d.shape();
    let feats = Tensor::from_fn([n, c, 2 * h, 2 * w], |b, ch, i, j| {
        match alignment_source(p_d, p_u, i, j) {
            Some((si, sj)) => f_d.get(b, ch, si, sj),
            None => 0.0,
        }
    });
    let bits = (0..4 * h * w)
        .map(|pos| alignment_source(p_d, p_u, pos / (2 * w), pos % (2 * w)).is_some())
        .collect();
    (feats, bits)
}

/// Keeps the top-left sample of every `factor x factor` block.
pub fn brute_down(p: &PanopticMap, factor: usize) -> PanopticMap {
    PanopticMap::from_fn(p.height() / factor, p.width() / factor, |i, j| p.get(i * factor, j * factor)).unwrap()
}

pub fn brute_down_semantic(s: &SemanticMap, factor: usize) -> SemanticMap {
    let (h, w) = (s.height() / factor, s.width() / factor);
    let classes = (0..h * w).map(|pos| s.get(pos / w * factor, pos % w * factor)).collect();
    SemanticMap::new(h, w, classes, s.num_classes()).unwrap()
}

pub fn brute_one_hot(s: &SemanticMap, k: usize) -> Tensor {
    Tensor::from_fn([1, k, s.height(), s.width()], |_, c, i, j| (s.get(i, j) as usize == c) as u8 as f64)
}

/// Hole-fill proposal `reducer(encoder(one_hot(s_u)))` built from the oracles.
pub fn brute_hole_features(
    s_u: &SemanticMap,
    p_u: &PanopticMap,
    encoder: &ConvParams,
    reducer: &ConvParams,
) -> Tensor {
    let onehot = brute_one_hot(s_u, encoder.in_channels());
    brute_standard_conv(&brute_panoptic_conv(&onehot, p_u, encoder), reducer)
}

/// Single-pass composite upsampling oracle: each output pixel takes the
/// first matching candidate or, failing that, the hole-fill value.
pub fn brute_panoptic_upsample(
    f_d: &Tensor,
    p_full: &PanopticMap,
    s_full: &SemanticMap,
    encoder: &ConvParams,
    reducer: &ConvParams,
) -> Tensor {
    let [n, c, h, w] = f_d.shape();
    let factor = p_full.height() / (2 * h);
    let p_u = brute_down(p_full, factor);
    let s_u = brute_down_semantic(s_full, factor);
    let p_d = brute_down(&p_u, 2);
    let hole = brute_hole_features(&s_u, &p_u, encoder, reducer);
    Tensor::from_fn([n, c, 2 * h, 2 * w], |b, ch, i, j| {
        match alignment_source(&p_d, &p_u, i, j) {
            Some((si, sj)) => f_d.get(b, ch, si, sj),
            None => hole.get(0, ch, i, j),
        }
    })
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of `L(theta) = sum(g * f(theta))` for every
/// coordinate of `theta`.
pub fn numeric_gradient(theta: &[f64], g: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|idx| {
            probe[idx] = theta[idx] + FD_STEP;
            let plus = f(&probe);
            probe[idx] = theta[idx] - FD_STEP;
            let minus = f(&probe);
            probe[idx] = theta[idx];
            g.iter()
                .zip(plus.iter().zip(&minus))
                .map(|(gv, (a, b))| gv * (a - b))
                .sum::<f64>()
                / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-3)`, maximized over all coordinates.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

pub fn with_weights(params: &ConvParams, weights: &[f64]) -> ConvParams {
    let w = Tensor::from_vec(params.weights().shape(), weights.to_vec()).unwrap();
    ConvParams::new(w, params.bias().to_vec()).unwrap()
}

pub fn with_bias(params: &ConvParams, bias: &[f64]) -> ConvParams {
    ConvParams::new(params.weights().clone(), bias.to_vec()).unwrap()
}

/// Largest relative error of the conv backward pass over input, weights and bias.
pub fn fd_conv_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (h, w) = (5 + seed as usize % 3, 5 + seed as usize % 4);
    let p = scattered_map(&mut r, h, w, 3);
    let x = random_tensor(&mut r, [1, 2, h, w]);
    let params = random_params(&mut r, 2, 2, 3);
    let g = random_tensor(&mut r, [1, 2, h, w]);
    let grads = panoptic_conv_backward(&g, &x, &p, &params).unwrap();

    let num_x = numeric_gradient(x.data(), g.data(), |d| {
        let xt = Tensor::from_vec(x.shape(), d.to_vec()).unwrap();
        panoptic_conv_forward(&xt, &p, &params).unwrap().into_vec()
    });
    let num_w = numeric_gradient(params.weights().data(), g.data(), |d| {
        panoptic_conv_forward(&x, &p, &with_weights(&params, d)).unwrap().into_vec()
    });
    let num_b = numeric_gradient(params.bias(), g.data(), |d| {
        panoptic_conv_forward(&x, &p, &with_bias(&params, d)).unwrap().into_vec()
    });
    max_rel_error(grads.grad_input.data(), &num_x)
        .max(max_rel_error(grads.grad_weights.data(), &num_w))
        .max(max_rel_error(&grads.grad_bias, &num_b))
}

/// Same for the composite upsampling layer over features, encoder and
/// reducer. Also returns the number of hole pixels in the fixture.
pub fn fd_upsample_error(seed: u64) -> (f64, usize) {
    let mut r = rng(1000 + seed);
    let (h, w) = (3 + seed as usize % 2, 4);
    let p_full = if seed % 4 == 0 {
        PanopticMap::constant(4 * h, 4 * w, 1001).unwrap()
    } else {
        rect_map(&mut r, 4 * h, 4 * w, 8, 5)
    };
    let s_full = semantic(&p_full);
    let f_d = random_tensor(&mut r, [1, 2, h, w]);
    let encoder = random_params(&mut r, 3, CLASSES, 3);
    let reducer = random_params(&mut r, 2, 3, 1);
    let params = HoleFillParams::new(&encoder, &reducer).unwrap();
    let g = random_tensor(&mut r, [1, 2, 2 * h, 2 * w]);
    let grads = panoptic_upsample_backward(&g, &f_d, &p_full, &s_full, &params, CLASSES).unwrap();

    let forward = |f: &Tensor, enc: &ConvParams, red: &ConvParams| -> Vec<f64> {
        let hp = HoleFillParams::new(enc, red).unwrap();
        panoptic_upsample(f, &p_full, &s_full, &hp, CLASSES).unwrap().into_vec()
    };
    let num_f = numeric_gradient(f_d.data(), g.data(), |d| {
        forward(&Tensor::from_vec(f_d.shape(), d.to_vec()).unwrap(), &encoder, &reducer)
    });
    let num_ew = numeric_gradient(encoder.weights().data(), g.data(), |d| {
        forward(&f_d, &with_weights(&encoder, d), &reducer)
    });
    let num_eb = numeric_gradient(encoder.bias(), g.data(), |d| forward(&f_d, &with_bias(&encoder, d), &reducer));
    let num_rw = numeric_gradient(reducer.weights().data(), g.data(), |d| {
        forward(&f_d, &encoder, &with_weights(&reducer, d))
    });
    let num_rb = numeric_gradient(reducer.bias(), g.data(), |d| forward(&f_d, &encoder, &with_bias(&reducer, d)));
    let holes = {
        let maps = stage_maps(&p_full, &s_full, (2 * h, 2 * w)).unwrap();
        Routing::from_maps(&maps.p_d, &maps.p_u).unwrap().hole_count()
    };
    let err = [
        max_rel_error(grads.grad_features.data(), &num_f),
        max_rel_error(grads.encoder.grad_weights.data(), &num_ew),
        max_rel_error(&grads.encoder.grad_bias, &num_eb),
        max_rel_error(grads.reducer.grad_weights.data(), &num_rw),
        max_rel_error(&grads.reducer.grad_bias, &num_rb),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    (err, holes)
}
