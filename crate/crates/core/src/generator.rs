//! Toy-scale panoptic-conditioned generator.
//!
//! The network encodes the semantic map at the base resolution with a
//! panoptic-aware convolution, then runs one residual block and one
//! panoptic-aware 2x upsampling per stage. The first-layer encoder is reused
//! by every upsampling layer's hole-fill branch; each stage only owns a 1x1
//! reducer. A leaky ReLU, a 3x3 convolution to RGB and `tanh` finish the
//! image.
//!
//! SPADE blocks (batch normalization without affine parameters, modulated by
//! per-pixel `gamma`/`beta` predicted from the one-hot semantic map) follow
//! the usual SPADE layout: shared 3x3 conv, activation, two 3x3 heads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{panoptic_conv_forward_optimized, standard_conv_forward, ConvParams};
use crate::error::{dim_err, Error, Result};
use crate::init::WeightInit;
use crate::io::{read_tensor_fixture, write_tensor_fixture};
use crate::maps::{PanopticMap, SemanticMap};
use crate::tensor::{leaky_relu, one_hot, Scalar, Tensor};
use crate::upsample::{hole_fill_features, panoptic_upsample, stage_maps, HoleFillParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    F32,
    #[default]
    F64,
}

impl ScalarKind {
    pub fn name(self) -> &'static str {
        match self {
            ScalarKind::F32 => "f32",
            ScalarKind::F64 => "f64",
        }
    }
}

fn default_spade_hidden() -> usize {
    64
}

fn default_slope() -> f64 {
    0.2
}

fn default_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

/// Architecture and initialization of a [`Generator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Output channels of each stage, non-increasing. The first entry is also
    /// the width of the shared semantic encoder.
    pub stage_channels: Vec<usize>,
    pub base_height: usize,
    pub base_width: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scalar: ScalarKind,
    #[serde(default = "default_spade_hidden")]
    pub spade_hidden: usize,
    /// Negative slope of the leaky ReLUs in residual blocks and before the output conv.
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Negative slope of the activation inside SPADE's shared conv.
    #[serde(default = "default_slope")]
    pub spade_slope: f64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl GeneratorConfig {
    /// Toy defaults for maps of `height x width` with `stages` stages.
    pub fn toy(height: usize, width: usize, num_classes: usize, stage_channels: Vec<usize>) -> Result<Self> {
        let span = 1usize << stage_channels.len();
        if height % span != 0 || width % span != 0 {
            return dim_err(format!(
                "{height}x{width} is not divisible by 2^{} stages",
                stage_channels.len()
            ));
        }
        let cfg = Self {
            stage_channels,
            base_height: height / span,
            base_width: width / span,
            num_classes,
            seed: 0,
            scalar: ScalarKind::F64,
            spade_hidden: default_spade_hidden(),
            leaky_slope: default_slope(),
            spade_slope: default_slope(),
            norm_eps: default_eps(),
            init_std: default_init_std(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn output_dims(&self) -> (usize, usize) {
        let span = 1usize << self.num_stages();
        (self.base_height * span, self.base_width * span)
    }

    /// Resolution of the features entering stage `stage`.
    pub fn stage_input_dims(&self, stage: usize) -> (usize, usize) {
        (self.base_height << stage, self.base_width << stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.stage_channels.len() > 16 {
            return Err(Error::Config("at most 16 stages are supported".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channel counts must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(format!(
                "stage channels must be non-increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.base_height == 0 || self.base_width == 0 {
            return Err(Error::Config("base resolution must be positive".into()));
        }
        if self.num_classes == 0 || self.spade_hidden == 0 {
            return Err(Error::Config("class count and SPADE width must be positive".into()));
        }
        if !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("norm_eps must be positive and init_std non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters of one SPADE normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SpadeParams<T = f64> {
    /// `num_classes -> hidden`, 3x3.
    pub shared: ConvParams<T>,
    /// `hidden -> c`, 3x3.
    pub gamma: ConvParams<T>,
    /// `hidden -> c`, 3x3.
    pub beta: ConvParams<T>,
    pub slope: f64,
    pub eps: f64,
}

impl<T: Scalar> SpadeParams<T> {
    pub fn channels(&self) -> usize {
        self.gamma.out_channels()
    }
}

/// Per-channel normalization over batch and spatial positions without
/// affine parameters. Channels whose values are all equal map to zero.
pub fn batch_normalize<T: Scalar>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let count = T::from_f64((n * h * w) as f64);
    let eps = T::from_f64(eps);
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let first = x.get(0, ch, 0, 0);
        let constant = (0..n).all(|b| x.plane(b, ch).iter().all(|&v| v == first));
        if constant {
            continue;
        }
        let mut sum = T::zero();
        for b in 0..n {
            for &v in x.plane(b, ch) {
                sum = sum + v;
            }
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in x.plane(b, ch) {
                sq = sq + (v - mean) * (v - mean);
            }
        }
        let inv_std = T::one() / (sq / count + eps).sqrt();
        for b in 0..n {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * inv_std;
            }
        }
    }
    out
}

/// Modulation maps `(gamma, beta)`, each `(1, c, h, w)`.
pub fn spade_modulation<T: Scalar>(
    s: &SemanticMap,
    params: &SpadeParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let onehot = one_hot::<T>(s, params.shared.in_channels())?;
    let hidden = leaky_relu(&standard_conv_forward(&onehot, &params.shared)?, params.slope);
    let gamma = standard_conv_forward(&hidden, &params.gamma)?;
    let beta = standard_conv_forward(&hidden, &params.beta)?;
    Ok((gamma, beta))
}

/// `normalize(x) * (1 + gamma(s)) + beta(s)`.
pub fn spade_denorm<T: Scalar>(
    x: &Tensor<T>,
    s: &SemanticMap,
    params: &SpadeParams<T>,
) -> Result<Tensor<T>> {
    x.check_spatial(s.height(), s.width(), "SPADE")?;
    if params.channels() != x.channels() {
        return dim_err(format!(
            "SPADE heads produce {} channels, input has {}",
            params.channels(),
            x.channels()
        ));
    }
    let normalized = batch_normalize(x, params.eps);
    let (gamma, beta) = spade_modulation(s, params)?;
    let [n, c, _, _] = x.shape();
    let mut out = normalized;
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.plane(0, ch);
            let bt = beta.plane(0, ch);
            for ((v, &gv), &bv) in out.plane_mut(b, ch).iter_mut().zip(g).zip(bt) {
                *v = *v * (T::one() + gv) + bv;
            }
        }
    }
    Ok(out)
}

/// Residual block with SPADE normalization and panoptic-aware convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams<T = f64> {
    pub norm_0: SpadeParams<T>,
    /// `in -> mid`, 3x3.
    pub conv_0: ConvParams<T>,
    pub norm_1: SpadeParams<T>,
    /// `mid -> out`, 3x3.
    pub conv_1: ConvParams<T>,
    /// Learned 1x1 shortcut, present only when input and output widths differ.
    pub shortcut: Option<(SpadeParams<T>, ConvParams<T>)>,
    pub slope: f64,
}

impl<T: Scalar> ResBlockParams<T> {
    pub fn in_channels(&self) -> usize {
        self.conv_0.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv_1.out_channels()
    }
}

fn norm_act_conv<T: Scalar>(
    x: &Tensor<T>,
    s: &SemanticMap,
    p: &PanopticMap,
    norm: &SpadeParams<T>,
    conv: &ConvParams<T>,
    slope: f64,
) -> Result<Tensor<T>> {
    let h = leaky_relu(&spade_denorm(x, s, norm)?, slope);
    panoptic_conv_forward_optimized(&h, p, conv)
}

pub fn resblock_forward<T: Scalar>(
    x: &Tensor<T>,
    s: &SemanticMap,
    p: &PanopticMap,
    params: &ResBlockParams<T>,
) -> Result<Tensor<T>> {
    x.check_spatial(p.height(), p.width(), "residual block")?;
    let hidden = norm_act_conv(x, s, p, &params.norm_0, &params.conv_0, params.slope)?;
    let main = norm_act_conv(&hidden, s, p, &params.norm_1, &params.conv_1, params.slope)?;
    let skip = match &params.shortcut {
        Some((norm, conv)) => norm_act_conv(x, s, p, norm, conv, params.slope)?,
        None if x.channels() == params.out_channels() => x.clone(),
        None => {
            return dim_err(format!(
                "identity shortcut cannot map {} channels to {}",
                x.channels(),
                params.out_channels()
            ))
        }
    };
    let mut out = main;
    for (o, &sv) in out.data_mut().iter_mut().zip(skip.data()) {
        *o = *o + sv;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T = f64> {
    pub block: ResBlockParams<T>,
    /// `encoder width -> stage width`, 1x1.
    pub reducer: ConvParams<T>,
}

/// Generator weights together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f64> {
    config: GeneratorConfig,
    encoder: ConvParams<T>,
    stages: Vec<StageParams<T>>,
    to_rgb: ConvParams<T>,
}

impl<T: Scalar> Generator<T> {
    /// Draws all weights from `config.seed`. See [`crate::init`] for the
    /// sampling scheme; streams are assigned in the order of
    /// [`Generator::named_params`].
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        if config.scalar.name() != T::NAME {
            return Err(Error::Config(format!(
                "config asks for {} but the generator is built for {}",
                config.scalar.name(),
                T::NAME
            )));
        }
        let mut init = WeightInit::new(config.seed, config.init_std);
        let k = config.num_classes;
        let width = config.stage_channels[0];
        let encoder = init.conv(width, k, 3)?;

        let spade = |init: &mut WeightInit, c: usize| -> Result<SpadeParams<T>> {
            Ok(SpadeParams {
                shared: init.conv(config.spade_hidden, k, 3)?,
                gamma: init.conv(c, config.spade_hidden, 3)?,
                beta: init.conv(c, config.spade_hidden, 3)?,
                slope: config.spade_slope,
                eps: config.norm_eps,
            })
        };

        let mut stages = Vec::with_capacity(config.num_stages());
        let mut c_in = width;
        for &c_out in &config.stage_channels {
            let mid = c_in.min(c_out);
            let norm_0 = spade(&mut init, c_in)?;
            let conv_0 = init.conv(mid, c_in, 3)?;
            let norm_1 = spade(&mut init, mid)?;
            let conv_1 = init.conv(c_out, mid, 3)?;
            let shortcut = if c_in != c_out {
                Some((spade(&mut init, c_in)?, init.conv(c_out, c_in, 1)?))
            } else {
                None
            };
            let reducer = init.conv(c_out, width, 1)?;
            stages.push(StageParams {
                block: ResBlockParams {
                    norm_0,
                    conv_0,
                    norm_1,
                    conv_1,
                    shortcut,
                    slope: config.leaky_slope,
                },
                reducer,
            });
            c_in = c_out;
        }
        let to_rgb = init.conv(3, c_in, 3)?;
        Ok(Self {
            config,
            encoder,
            stages,
            to_rgb,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn encoder(&self) -> &ConvParams<T> {
        &self.encoder
    }

    pub fn stages(&self) -> &[StageParams<T>] {
        &self.stages
    }

    pub fn to_rgb(&self) -> &ConvParams<T> {
        &self.to_rgb
    }

    /// Every convolution with a stable name, in initialization order.
    pub fn named_params(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut out = vec![("encoder".to_string(), &self.encoder)];
        for (i, st) in self.stages.iter().enumerate() {
            let b = &st.block;
            push_spade(&mut out, format!("stage{i}.norm_0"), &b.norm_0);
            out.push((format!("stage{i}.conv_0"), &b.conv_0));
            push_spade(&mut out, format!("stage{i}.norm_1"), &b.norm_1);
            out.push((format!("stage{i}.conv_1"), &b.conv_1));
            if let Some((norm, conv)) = &b.shortcut {
                push_spade(&mut out, format!("stage{i}.norm_s"), norm);
                out.push((format!("stage{i}.conv_s"), conv));
            }
            out.push((format!("stage{i}.reducer"), &st.reducer));
        }
        out.push(("to_rgb".to_string(), &self.to_rgb));
        out
    }

    /// Mutable counterpart of [`Generator::named_params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut out = vec![&mut self.encoder];
        for st in &mut self.stages {
            let b = &mut st.block;
            out.extend([&mut b.norm_0.shared, &mut b.norm_0.gamma, &mut b.norm_0.beta]);
            out.push(&mut b.conv_0);
            out.extend([&mut b.norm_1.shared, &mut b.norm_1.gamma, &mut b.norm_1.beta]);
            out.push(&mut b.conv_1);
            if let Some((norm, conv)) = &mut b.shortcut {
                out.extend([&mut norm.shared, &mut norm.gamma, &mut norm.beta]);
                out.push(conv);
            }
            out.push(&mut st.reducer);
        }
        out.push(&mut self.to_rgb);
        out
    }

    /// Writes every convolution under `dir` as `<name>.weight.txt` and
    /// `<name>.bias.txt` tensor fixtures. Biases are stored as `(1, c, 1, 1)`.
    pub fn save_weights(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, params) in self.named_params() {
            write_tensor_fixture(params.weights(), dir.join(format!("{name}.weight.txt")))?;
            let bias = Tensor::from_vec([1, params.out_channels(), 1, 1], params.bias().to_vec())?;
            write_tensor_fixture(&bias, dir.join(format!("{name}.bias.txt")))?;
        }
        Ok(())
    }

    /// Replaces all weights with fixtures written by [`Generator::save_weights`].
    /// Every stored shape must match the configuration.
    pub fn load_weights(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, params) in names.iter().zip(self.params_mut()) {
            let weights: Tensor<T> = read_tensor_fixture(dir.join(format!("{name}.weight.txt")))?;
            let bias: Tensor<T> = read_tensor_fixture(dir.join(format!("{name}.bias.txt")))?;
            if weights.shape() != params.weights().shape() {
                return dim_err(format!(
                    "{name}: stored weights are {:?}, expected {:?}",
                    weights.shape(),
                    params.weights().shape()
                ));
            }
            if bias.shape() != [1, params.out_channels(), 1, 1] {
                return dim_err(format!(
                    "{name}: stored bias is {:?}, expected [1, {}, 1, 1]",
                    bias.shape(),
                    params.out_channels()
                ));
            }
            *params = ConvParams::new(weights, bias.into_vec())?;
        }
        Ok(())
    }

    fn check_maps(&self, s_full: &SemanticMap, p_full: &PanopticMap) -> Result<()> {
        let dims = self.config.output_dims();
        if s_full.dims() != dims || (p_full.height(), p_full.width()) != dims {
            return dim_err(format!(
                "maps are {:?} and {}x{}, generator expects {}x{}",
                s_full.dims(),
                p_full.height(),
                p_full.width(),
                dims.0,
                dims.1
            ));
        }
        if s_full.num_classes() > self.config.num_classes {
            return Err(Error::Domain(format!(
                "semantic map declares {} classes, generator has {}",
                s_full.num_classes(),
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Shared encoder applied at `dims`, before any reducer.
    pub fn encode(&self, s_full: &SemanticMap, p_full: &PanopticMap, dims: (usize, usize)) -> Result<Tensor<T>> {
        let factor = full_to(s_full.dims(), dims)?;
        let s = s_full.downsample(factor)?;
        let p = p_full.downsample(factor)?;
        let onehot = one_hot::<T>(&s, self.config.num_classes)?;
        panoptic_conv_forward_optimized(&onehot, &p, &self.encoder)
    }

    /// Hole-fill features of stage `stage`: the shared encoder at the stage's
    /// output resolution followed by the stage's reducer.
    pub fn shared_encoder_features(
        &self,
        s_full: &SemanticMap,
        p_full: &PanopticMap,
        stage: usize,
    ) -> Result<Tensor<T>> {
        let st = self.stages.get(stage).ok_or_else(|| {
            Error::Config(format!(
                "stage {stage} out of range for {} stages",
                self.stages.len()
            ))
        })?;
        self.check_maps(s_full, p_full)?;
        let (h, w) = self.config.stage_input_dims(stage);
        let maps = stage_maps(p_full, s_full, (2 * h, 2 * w))?;
        let params = HoleFillParams::new(&self.encoder, &st.reducer)?;
        hole_fill_features(&maps.s_u, &maps.p_u, &params, self.config.num_classes)
    }

    /// Synthesizes a `(1, 3, H, W)` image in `[-1, 1]`.
    pub fn forward(&self, s_full: &SemanticMap, p_full: &PanopticMap) -> Result<Tensor<T>> {
        self.check_maps(s_full, p_full)?;
        let k = self.config.num_classes;
        let mut x = self.encode(s_full, p_full, self.config.stage_input_dims(0))?;
        for (stage, st) in self.stages.iter().enumerate() {
            let dims = self.config.stage_input_dims(stage);
            let factor = full_to(s_full.dims(), dims)?;
            let s = s_full.downsample(factor)?;
            let p = p_full.downsample(factor)?;
            x = resblock_forward(&x, &s, &p, &st.block)?;
            let params = HoleFillParams::new(&self.encoder, &st.reducer)?;
            x = panoptic_upsample(&x, p_full, s_full, &params, k)?;
        }
        let x = leaky_relu(&x, self.config.leaky_slope);
        let rgb = standard_conv_forward(&x, &self.to_rgb)?;
        Ok(rgb.map(|v| v.tanh()))
    }
}

fn push_spade<'a, T>(out: &mut Vec<(String, &'a ConvParams<T>)>, prefix: String, sp: &'a SpadeParams<T>) {
    out.push((format!("{prefix}.shared"), &sp.shared));
    out.push((format!("{prefix}.gamma"), &sp.gamma));
    out.push((format!("{prefix}.beta"), &sp.beta));
}

fn full_to(full: (usize, usize), dims: (usize, usize)) -> Result<usize> {
    if dims.0 == 0 || full.0 % dims.0 != 0 || full.1 % dims.1 != 0 || full.0 / dims.0 != full.1 / dims.1 {
        return dim_err(format!(
            "{}x{} maps cannot be reduced to {}x{}",
            full.0, full.1, dims.0, dims.1
        ));
    }
    Ok(full.0 / dims.0)
}

/// Builds the generator for `config` and runs it once.
pub fn generator_forward<T: Scalar>(
    s_full: &SemanticMap,
    p_full: &PanopticMap,
    config: &GeneratorConfig,
) -> Result<Tensor<T>> {
    Generator::<T>::new(config.clone())?.forward(s_full, p_full)
}

/// Stage `stage` hole-fill features for the generator described by `config`.
pub fn shared_encoder_features<T: Scalar>(
    s_full: &SemanticMap,
    p_full: &PanopticMap,
    stage: usize,
    config: &GeneratorConfig,
) -> Result<Tensor<T>> {
    Generator::<T>::new(config.clone())?.shared_encoder_features(s_full, p_full, stage)
}
