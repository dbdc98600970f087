//! Central finite-difference checks of the analytic backward passes.
//!
//! The scalar probed is `L = Σ g ⊙ y` for a fixed random `g`, so the analytic
//! gradient is the backward pass applied to `g`. The numeric derivative for
//! each parameter is `Σ g ⊙ (y(θ + h) - y(θ - h)) / 2h`, differencing outputs
//! before summing so untouched outputs cancel exactly.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{random_conv_fixture, semantic_of, FIXTURE_CLASSES};
use crate::conv::{panoptic_conv_backward, panoptic_conv_forward, ConvParams};
use crate::error::{Error, Result};
use crate::maps::PanopticMap;
use crate::tensor::Tensor;
use crate::upsample::{panoptic_upsample, panoptic_upsample_backward, HoleFillParams};

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    Conv,
    Upsample,
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(GradOp::Conv),
            "upsample" => Ok(GradOp::Upsample),
            other => Err(Error::Config(format!("unknown operation `{other}`"))),
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradOp::Conv => "conv",
            GradOp::Upsample => "upsample",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub op: GradOp,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Uniform panoptic map instead of random ids.
    pub constant_map: bool,
    /// Corrupts the analytic gradient; the check must then fail.
    pub inject_bug: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn weighted_diff(g: &Tensor, plus: &Tensor, minus: &Tensor) -> f64 {
    g.data()
        .iter()
        .zip(plus.data().iter().zip(minus.data()))
        .map(|(&gv, (&a, &b))| gv * (a - b))
        .sum::<f64>()
        / (2.0 * STEP)
}

/// Compares `analytic[i]` with the central difference of `eval` in the
/// `i`-th coordinate exposed by `slot`.
fn probe<S>(
    state: &mut S,
    count: usize,
    analytic: &[f64],
    g: &Tensor,
    slot: impl Fn(&mut S, usize) -> &mut f64,
    eval: impl Fn(&S) -> Result<Tensor>,
    report: &mut GradCheckReport,
) -> Result<()> {
    for i in 0..count {
        let orig = *slot(state, i);
        *slot(state, i) = orig + STEP;
        let plus = eval(state)?;
        *slot(state, i) = orig - STEP;
        let minus = eval(state)?;
        *slot(state, i) = orig;
        let numeric = weighted_diff(g, &plus, &minus);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric));
        report.checked += 1;
    }
    Ok(())
}

fn random_ids(h: usize, w: usize, ids: &[u32], rng: &mut ChaCha8Rng) -> Result<PanopticMap> {
    let picks = (0..h * w).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
    PanopticMap::new(h, w, picks)
}

fn corrupt(v: &mut [f64]) {
    if let Some(first) = v.first_mut() {
        *first = *first * 1.5 + 0.1;
    }
}

pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.height == 0 || opts.width == 0 {
        return Err(Error::Config("size must be positive".into()));
    }
    match opts.op {
        GradOp::Conv => check_conv(opts),
        GradOp::Upsample => check_upsample(opts),
    }
}

fn check_conv(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (h, w) = (opts.height, opts.width);
    let p = if opts.constant_map {
        PanopticMap::constant(h, w, 1)?
    } else {
        random_ids(h, w, &[1, 2, 3], &mut rng)?
    };
    let (x, params) = random_conv_fixture::<f64>([1, 2, h, w], 2, 3, opts.seed.wrapping_add(1))?;
    let g = Tensor::from_fn([1, 2, h, w], |_, _, _, _| rng.gen_range(-1.0..1.0));
    let mut grads = panoptic_conv_backward(&g, &x, &p, &params)?;
    if opts.inject_bug {
        corrupt(grads.grad_input.data_mut());
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut state = (x, params);
    let n_x = state.0.len();
    probe(
        &mut state,
        n_x,
        grads.grad_input.data(),
        &g,
        |s, i| &mut s.0.data_mut()[i],
        |s| panoptic_conv_forward(&s.0, &p, &s.1),
        &mut report,
    )?;
    let n_w = state.1.weights().len();
    probe(
        &mut state,
        n_w,
        grads.grad_weights.data(),
        &g,
        |s, i| &mut s.1.weights_mut()[i],
        |s| panoptic_conv_forward(&s.0, &p, &s.1),
        &mut report,
    )?;
    let n_b = state.1.bias().len();
    probe(
        &mut state,
        n_b,
        &grads.grad_bias,
        &g,
        |s, i| &mut s.1.bias_mut()[i],
        |s| panoptic_conv_forward(&s.0, &p, &s.1),
        &mut report,
    )?;
    Ok(report)
}

fn check_upsample(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (h, w) = (opts.height, opts.width);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config("upsample check needs an even size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p = if opts.constant_map {
        PanopticMap::constant(h, w, 1000)?
    } else {
        let ids: Vec<u32> = (0..6).map(|i| (i % FIXTURE_CLASSES) * 1000 + i).collect();
        random_ids(h, w, &ids, &mut rng)?
    };
    let s = semantic_of(&p);
    let classes = FIXTURE_CLASSES as usize;
    let c = 2;
    let (f_d, _) = random_conv_fixture::<f64>([1, c, h / 2, w / 2], 1, 1, opts.seed.wrapping_add(1))?;
    let (_, encoder) = random_conv_fixture::<f64>([1, classes, 1, 1], 4, 3, opts.seed.wrapping_add(2))?;
    let (_, reducer) = random_conv_fixture::<f64>([1, 4, 1, 1], c, 1, opts.seed.wrapping_add(3))?;
    let g = Tensor::from_fn([1, c, h, w], |_, _, _, _| rng.gen_range(-1.0..1.0));

    let mut grads = {
        let params = HoleFillParams::new(&encoder, &reducer)?;
        panoptic_upsample_backward(&g, &f_d, &p, &s, &params, classes)?
    };
    if opts.inject_bug {
        corrupt(grads.grad_features.data_mut());
        corrupt(grads.encoder.grad_weights.data_mut());
    }

    let eval = |st: &(Tensor, ConvParams, ConvParams)| -> Result<Tensor> {
        let params = HoleFillParams::new(&st.1, &st.2)?;
        panoptic_upsample(&st.0, &p, &s, &params, classes)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut state = (f_d, encoder, reducer);
    let n = state.0.len();
    probe(&mut state, n, grads.grad_features.data(), &g, |s, i| &mut s.0.data_mut()[i], eval, &mut report)?;
    let n = state.1.weights().len();
    probe(&mut state, n, grads.encoder.grad_weights.data(), &g, |s, i| &mut s.1.weights_mut()[i], eval, &mut report)?;
    let n = state.1.bias().len();
    probe(&mut state, n, &grads.encoder.grad_bias, &g, |s, i| &mut s.1.bias_mut()[i], eval, &mut report)?;
    let n = state.2.weights().len();
    probe(&mut state, n, grads.reducer.grad_weights.data(), &g, |s, i| &mut s.2.weights_mut()[i], eval, &mut report)?;
    let n = state.2.bias().len();
    probe(&mut state, n, &grads.reducer.grad_bias, &g, |s, i| &mut s.2.bias_mut()[i], eval, &mut report)?;
    Ok(report)
}
