//! Panoptic-aware 2x upsampling.
//!
//! The layer runs in two steps. Alignment correction copies each high
//! resolution pixel's feature from the first of four low resolution
//! candidates whose id matches the pixel's id. The candidates are visited as
//! four full passes in the order `(i/2, j/2)`, `(i/2+1, j/2)`, `(i/2, j/2+1)`,
//! `(i/2+1, j/2+1)`, where `i` is the row. Candidates past the bottom or right
//! edge are skipped. Pixels that find no match are holes; hole filling
//! replaces them with features encoded from the semantic map by the shared
//! panoptic-aware encoder followed by a 1x1 reducer.

use std::collections::HashSet;

use crate::conv::{
    panoptic_conv_backward, panoptic_conv_forward_optimized, standard_conv_backward,
    standard_conv_forward, ConvGrads, ConvParams,
};
use crate::error::{dim_err, Error, Result};
use crate::maps::{BinaryMask, PanopticMap, SemanticMap};
use crate::tensor::{one_hot, Scalar, Tensor};

/// `(row, col)` offsets of the alignment candidates, in pass order.
pub const CANDIDATE_OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Source of every upsampled pixel: a flat index into the low resolution
/// plane, or `None` for a hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Routing {
    src_height: usize,
    src_width: usize,
    sources: Vec<Option<u32>>,
}

impl Routing {
    /// Runs the four alignment passes over a `(p_d, p_u)` pair.
    pub fn from_maps(p_d: &PanopticMap, p_u: &PanopticMap) -> Result<Self> {
        let (h, w) = (p_d.height(), p_d.width());
        if p_u.height() != 2 * h || p_u.width() != 2 * w {
            return dim_err(format!(
                "upsampled map is {}x{}, expected {}x{} for a {h}x{w} source",
                p_u.height(),
                p_u.width(),
                2 * h,
                2 * w
            ));
        }
        let (uh, uw) = (2 * h, 2 * w);
        let mut sources = vec![None; uh * uw];
        for (di, dj) in CANDIDATE_OFFSETS {
            for i in 0..uh {
                let si = i / 2 + di;
                if si >= h {
                    continue;
                }
                for j in 0..uw {
                    let slot = &mut sources[i * uw + j];
                    let sj = j / 2 + dj;
                    if slot.is_some() || sj >= w {
                        continue;
                    }
                    if p_u.get(i, j) == p_d.get(si, sj) {
                        *slot = Some((si * w + sj) as u32);
                    }
                }
            }
        }
        Ok(Self {
            src_height: h,
            src_width: w,
            sources,
        })
    }

    pub fn src_dims(&self) -> (usize, usize) {
        (self.src_height, self.src_width)
    }

    pub fn dst_dims(&self) -> (usize, usize) {
        (2 * self.src_height, 2 * self.src_width)
    }

    /// Low resolution `(row, col)` feeding upsampled pixel `(i, j)`.
    pub fn source(&self, i: usize, j: usize) -> Option<(usize, usize)> {
        self.sources[i * 2 * self.src_width + j]
            .map(|s| (s as usize / self.src_width, s as usize % self.src_width))
    }

    pub fn hole_count(&self) -> usize {
        self.sources.iter().filter(|s| s.is_none()).count()
    }

    pub fn correction_mask<T: Scalar>(&self) -> BinaryMask<T> {
        let (uh, uw) = self.dst_dims();
        let bits: Vec<bool> = self.sources.iter().map(Option::is_some).collect();
        BinaryMask::from_bools(uh, uw, &bits).expect("routing size matches mask size")
    }
}

/// Output of alignment correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignResult<T = f64> {
    /// `(n, c, 2H, 2W)`; zero wherever `correction` is 0.
    pub features: Tensor<T>,
    pub correction: BinaryMask<T>,
    pub routing: Routing,
}

/// Upsamples `f_d` by copying matching low resolution features.
pub fn align_upsample<T: Scalar>(
    f_d: &Tensor<T>,
    p_d: &PanopticMap,
    p_u: &PanopticMap,
) -> Result<AlignResult<T>> {
    f_d.check_spatial(p_d.height(), p_d.width(), "alignment source")?;
    let routing = Routing::from_maps(p_d, p_u)?;
    let [n, c, h, w] = f_d.shape();
    let (uh, uw) = (2 * h, 2 * w);
    let mut features = Tensor::zeros([n, c, uh, uw]);
    for b in 0..n {
        for ch in 0..c {
            let src = f_d.plane(b, ch);
            let dst = features.plane_mut(b, ch);
            for (d, s) in dst.iter_mut().zip(&routing.sources) {
                if let Some(s) = s {
                    *d = src[*s as usize];
                }
            }
        }
    }
    Ok(AlignResult {
        features,
        correction: routing.correction_mask(),
        routing,
    })
}

/// Transpose of [`align_upsample`]: every routed pixel adds its gradient to
/// its source. Hole pixels contribute nothing here; their gradient belongs
/// to the hole-fill parameters.
pub fn align_upsample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    routing: &Routing,
) -> Result<Tensor<T>> {
    let [n, c, uh, uw] = grad_out.shape();
    if (uh, uw) != routing.dst_dims() {
        return Err(Error::Contract(format!(
            "gradient is {uh}x{uw} but the routing was recorded for {:?}",
            routing.dst_dims()
        )));
    }
    let (h, w) = routing.src_dims();
    let mut grad = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            let dst = grad.plane_mut(b, ch);
            for (gv, s) in g.iter().zip(&routing.sources) {
                if let Some(s) = s {
                    let d = &mut dst[*s as usize];
                    *d = *d + *gv;
                }
            }
        }
    }
    Ok(grad)
}

/// Shared semantic encoder plus a per-stage 1x1 channel reducer.
///
/// Borrows the encoder so every stage can use the same weights.
#[derive(Clone, Copy, Debug)]
pub struct HoleFillParams<'a, T = f64> {
    pub encoder: &'a ConvParams<T>,
    pub reducer: &'a ConvParams<T>,
}

impl<'a, T: Scalar> HoleFillParams<'a, T> {
    pub fn new(encoder: &'a ConvParams<T>, reducer: &'a ConvParams<T>) -> Result<Self> {
        if reducer.kernel_size() != 1 {
            return Err(Error::Config(format!(
                "reducer must be a 1x1 convolution, got {0}x{0}",
                reducer.kernel_size()
            )));
        }
        if reducer.in_channels() != encoder.out_channels() {
            return dim_err(format!(
                "reducer takes {} channels but the encoder produces {}",
                reducer.in_channels(),
                encoder.out_channels()
            ));
        }
        Ok(Self { encoder, reducer })
    }

    pub fn out_channels(&self) -> usize {
        self.reducer.out_channels()
    }
}

/// Features proposed for hole pixels: `reducer(encoder(one_hot(s_u)))`, with
/// the encoder guided by `p_u`. Shape `(1, c, h, w)`.
pub fn hole_fill_features<T: Scalar>(
    s_u: &SemanticMap,
    p_u: &PanopticMap,
    params: &HoleFillParams<'_, T>,
    num_classes: usize,
) -> Result<Tensor<T>> {
    if params.encoder.in_channels() != num_classes {
        return dim_err(format!(
            "encoder takes {} channels, semantic map has {num_classes} classes",
            params.encoder.in_channels()
        ));
    }
    if s_u.dims() != (p_u.height(), p_u.width()) {
        return dim_err("semantic and panoptic maps differ in size");
    }
    let onehot = one_hot::<T>(s_u, num_classes)?;
    let encoded = panoptic_conv_forward_optimized(&onehot, p_u, &params.encoder)?;
    standard_conv_forward(&encoded, &params.reducer)
}

/// Fills the holes left by alignment correction.
///
/// Pixels with correction 1 are returned unchanged; every other pixel gets
/// `aligned + f_hole`, i.e. `f_hole` since aligned features are zero there.
pub fn hole_fill<T: Scalar>(
    aligned: &AlignResult<T>,
    s_u: &SemanticMap,
    p_u: &PanopticMap,
    params: &HoleFillParams<'_, T>,
    num_classes: usize,
) -> Result<Tensor<T>> {
    let [n, c, uh, uw] = aligned.features.shape();
    if (p_u.height(), p_u.width()) != (uh, uw) {
        return dim_err("guidance maps do not match the aligned features");
    }
    if params.out_channels() != c {
        return dim_err(format!(
            "hole-fill branch produces {} channels, aligned features have {c}",
            params.out_channels()
        ));
    }
    let fill = hole_fill_features(s_u, p_u, params, num_classes)?;
    let holes = aligned.correction.to_bools();
    let mut out = aligned.features.clone();
    for b in 0..n {
        for ch in 0..c {
            let f = fill.plane(0, ch);
            let dst = out.plane_mut(b, ch);
            for ((d, &fv), &aligned_px) in dst.iter_mut().zip(f).zip(&holes) {
                if !aligned_px {
                    *d = *d + fv;
                }
            }
        }
    }
    Ok(out)
}

/// Maps used by one upsampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMaps {
    pub p_d: PanopticMap,
    pub p_u: PanopticMap,
    pub s_u: SemanticMap,
}

/// Derives the target-scale maps (and the half-scale panoptic map) from the
/// full resolution maps by nearest downsampling.
pub fn stage_maps(
    p_full: &PanopticMap,
    s_full: &SemanticMap,
    target: (usize, usize),
) -> Result<StageMaps> {
    let (fh, fw) = (p_full.height(), p_full.width());
    if s_full.dims() != (fh, fw) {
        return dim_err(format!(
            "semantic map is {:?}, panoptic map is {fh}x{fw}",
            s_full.dims()
        ));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 || fh % th != 0 || fw % tw != 0 || fh / th != fw / tw {
        return dim_err(format!(
            "{fh}x{fw} maps cannot be downsampled to {th}x{tw} by an integer factor"
        ));
    }
    let factor = fh / th;
    let p_u = p_full.downsample(factor)?;
    let s_u = s_full.downsample(factor)?;
    let p_d = p_u.downsample(2)?;
    Ok(StageMaps { p_d, p_u, s_u })
}

/// Full panoptic-aware upsampling layer: alignment correction followed by
/// hole filling. The output is twice the spatial size of `f_d`.
pub fn panoptic_upsample<T: Scalar>(
    f_d: &Tensor<T>,
    p_full: &PanopticMap,
    s_full: &SemanticMap,
    params: &HoleFillParams<'_, T>,
    num_classes: usize,
) -> Result<Tensor<T>> {
    let maps = stage_maps(p_full, s_full, (2 * f_d.height(), 2 * f_d.width()))?;
    let aligned = align_upsample(f_d, &maps.p_d, &maps.p_u)?;
    hole_fill(&aligned, &maps.s_u, &maps.p_u, params, num_classes)
}

/// Gradients of [`panoptic_upsample`].
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleGrads<T = f64> {
    pub grad_features: Tensor<T>,
    pub encoder: ConvGrads<T>,
    pub reducer: ConvGrads<T>,
}

/// Backward pass of [`panoptic_upsample`]. Routing is recomputed from the maps.
pub fn panoptic_upsample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    f_d: &Tensor<T>,
    p_full: &PanopticMap,
    s_full: &SemanticMap,
    params: &HoleFillParams<'_, T>,
    num_classes: usize,
) -> Result<UpsampleGrads<T>> {
    let [n, c, h, w] = f_d.shape();
    if grad_out.shape() != [n, c, 2 * h, 2 * w] {
        return dim_err(format!(
            "output gradient {:?} does not match upsampled shape {:?}",
            grad_out.shape(),
            [n, c, 2 * h, 2 * w]
        ));
    }
    let maps = stage_maps(p_full, s_full, (2 * h, 2 * w))?;
    let routing = Routing::from_maps(&maps.p_d, &maps.p_u)?;
    let grad_features = align_upsample_backward(grad_out, &routing)?;

    // The hole branch is shared across the batch.
    let mut grad_hole = Tensor::zeros([1, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            let dst = grad_hole.plane_mut(0, ch);
            for ((d, &gv), s) in dst.iter_mut().zip(g).zip(&routing.sources) {
                if s.is_none() {
                    *d = *d + gv;
                }
            }
        }
    }
    let onehot = one_hot::<T>(&maps.s_u, num_classes)?;
    let encoded = panoptic_conv_forward_optimized(&onehot, &maps.p_u, &params.encoder)?;
    let reducer = standard_conv_backward(&grad_hole, &encoded, &params.reducer)?;
    let encoder = panoptic_conv_backward(&reducer.grad_input, &onehot, &maps.p_u, &params.encoder)?;
    Ok(UpsampleGrads {
        grad_features,
        encoder,
        reducer,
    })
}

/// Misalignment counts for one upsampling stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageStats {
    pub stage: usize,
    /// Percentage of upsampled pixels whose nearest-neighbour source carries a
    /// different id although the pixel's id exists at the lower scale.
    pub pct_misaligned: f64,
    /// Percentage of upsampled pixels whose id does not exist at the lower scale.
    pub pct_new: f64,
    pub n_misaligned: usize,
    pub n_new: usize,
    pub n_total: usize,
}

/// Measures how often plain nearest-neighbour upsampling maps features to
/// the wrong id, and how often ids appear for the first time, per stage.
///
/// Stage `s` upsamples from the map downsampled by `base_scale / 2^s` to the
/// map downsampled by `base_scale / 2^(s+1)`, both taken from `p_full`.
/// Percentages are relative to all pixels at the upsampled scale.
pub fn misalignment_stats(
    p_full: &PanopticMap,
    num_stages: usize,
    base_scale: usize,
) -> Result<Vec<StageStats>> {
    if num_stages == 0 {
        return Err(Error::Config("at least one stage is required".into()));
    }
    let span = 1usize
        .checked_shl(num_stages as u32)
        .ok_or_else(|| Error::Config(format!("{num_stages} stages is too many")))?;
    if base_scale == 0 || base_scale % span != 0 {
        return dim_err(format!(
            "base scale {base_scale} is not divisible by 2^{num_stages}"
        ));
    }
    let (fh, fw) = (p_full.height(), p_full.width());
    if fh % base_scale != 0 || fw % base_scale != 0 {
        return dim_err(format!(
            "{fh}x{fw} map is not divisible by base scale {base_scale}"
        ));
    }

    let mut stats = Vec::with_capacity(num_stages);
    for stage in 0..num_stages {
        let p_d = p_full.downsample(base_scale >> stage)?;
        let p_u = p_full.downsample(base_scale >> (stage + 1))?;
        let present: HashSet<u32> = p_d.distinct_ids();
        let (mut n_misaligned, mut n_new) = (0, 0);
        for i in 0..p_u.height() {
            for j in 0..p_u.width() {
                let id = p_u.get(i, j);
                if !present.contains(&id) {
                    n_new += 1;
                } else if id != p_d.get(i / 2, j / 2) {
                    n_misaligned += 1;
                }
            }
        }
        let n_total = p_u.height() * p_u.width();
        let pct = |count: usize| 100.0 * count as f64 / n_total as f64;
        stats.push(StageStats {
            stage,
            pct_misaligned: pct(n_misaligned),
            pct_new: pct(n_new),
            n_misaligned,
            n_new,
            n_total,
        });
    }
    Ok(stats)
}
