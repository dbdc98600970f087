//! Panoptic-aware partial convolution.
//!
//! Every output location looks at a `k x k` window of the panoptic map and
//! keeps only the window pixels whose id equals the id under the window
//! center. The masked sum is rescaled by `k² / valid_count` before the bias
//! is added, so a location sees the same total weight regardless of how many
//! of its neighbours belong to the same instance. Positions outside the map
//! read as [`PAD_ID`](crate::maps::PAD_ID) and therefore never count as valid.
//!
//! The spatial mask is shared by all input channels. Convolutions are stride
//! 1 with `(k - 1) / 2` zero padding, so outputs keep the input's spatial size.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::maps::{BinaryMask, PanopticMap};
use crate::tensor::{Scalar, Tensor};

/// Convolution weights `(c_out, c_in, k, k)` plus one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f64> {
    weights: Tensor<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let [c_out, _, kh, kw] = weights.shape();
        if kh != kw {
            return dim_err(format!("kernel must be square, got {kh}x{kw}"));
        }
        if kh % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd so the window has a center, got {kh}"
            )));
        }
        if bias.len() != c_out {
            return dim_err(format!(
                "bias has {} entries for {c_out} output channels",
                bias.len()
            ));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("convolution parameters must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(Tensor::zeros([c_out, c_in, k, k]), vec![T::zero(); c_out])
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// Mutable access for finite-difference probing and weight loading.
    pub fn weights_mut(&mut self) -> &mut [T] {
        self.weights.data_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.in_channels() {
            return dim_err(format!(
                "input has {} channels, kernel expects {}",
                x.channels(),
                self.in_channels()
            ));
        }
        Ok(())
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f64> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Scalar> ConvGrads<T> {
    fn zeros(x_shape: [usize; 4], w_shape: [usize; 4]) -> Self {
        Self {
            grad_input: Tensor::zeros(x_shape),
            grad_weights: Tensor::zeros(w_shape),
            grad_bias: vec![T::zero(); w_shape[0]],
        }
    }
}

#[inline]
fn renorm_ratio<T: Scalar>(k: usize, valid: usize) -> T {
    T::from_f64((k * k) as f64) / T::from_f64(valid as f64)
}

/// Fills `bits` (row-major `k x k`) with the same-id mask around `(i, j)` and
/// returns the number of set positions.
#[inline]
fn fill_window(p: &PanopticMap, i: usize, j: usize, k: usize, bits: &mut [bool]) -> usize {
    let r = (k / 2) as isize;
    let center = p.get(i, j);
    let mut count = 0;
    for u in 0..k {
        for v in 0..k {
            let id = p.get_padded(i as isize + u as isize - r, j as isize + v as isize - r);
            let on = id == center;
            bits[u * k + v] = on;
            count += on as usize;
        }
    }
    count
}

/// Binary `k x k` mask of window pixels sharing the center pixel's id.
pub fn window_mask<T: Scalar>(
    p: &PanopticMap,
    center: (usize, usize),
    k: usize,
) -> Result<BinaryMask<T>> {
    let (i, j) = center;
    if i >= p.height() || j >= p.width() {
        return Err(Error::Index {
            row: i,
            col: j,
            height: p.height(),
            width: p.width(),
        });
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("window size must be odd, got {k}")));
    }
    let mut bits = vec![false; k * k];
    fill_window(p, i, j, k, &mut bits);
    BinaryMask::from_bools(k, k, &bits)
}

fn check_map<T: Scalar>(x: &Tensor<T>, p: &PanopticMap) -> Result<()> {
    x.check_spatial(p.height(), p.width(), "panoptic convolution")
}

/// Reference panoptic-aware convolution, evaluated window by window.
pub fn panoptic_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &PanopticMap,
    params: &ConvParams<T>,
) -> Result<Tensor<T>> {
    check_map(x, p)?;
    params.check_input(x)?;
    let [n, c_in, h, w] = x.shape();
    let c_out = params.out_channels();
    let k = params.kernel_size();
    let r = k / 2;
    let wt = params.weights.data();
    let mut out = Tensor::zeros([n, c_out, h, w]);
    let mut bits = vec![false; k * k];

    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let valid = fill_window(p, i, j, k, &mut bits);
                debug_assert!(valid >= 1, "window center always matches itself");
                if valid == 0 {
                    continue;
                }
                let ratio: T = renorm_ratio(k, valid);
                for co in 0..c_out {
                    let mut acc = T::zero();
                    for ci in 0..c_in {
                        let plane = x.plane(b, ci);
                        let wbase = (co * c_in + ci) * k * k;
                        for u in 0..k {
                            for v in 0..k {
                                if bits[u * k + v] {
                                    let (ii, jj) = (i + u - r, j + v - r);
                                    acc = acc + wt[wbase + u * k + v] * plane[ii * w + jj];
                                }
                            }
                        }
                    }
                    out.set(b, co, i, j, ratio * acc + params.bias[co]);
                }
            }
        }
    }
    Ok(out)
}

const TILE: usize = 64;
const CO_BLOCK: usize = 4;

struct RowScratch<T> {
    cols: Vec<T>,
    bits: Vec<bool>,
    ratio: Vec<T>,
}

/// Optimized panoptic-aware convolution.
///
/// Each output row is split into column tiles. For a tile the window masks
/// and ratios are computed once, the masked input patches are gathered into
/// a `(c_in·k², tile)` panel, and output channels are accumulated four at a
/// time over that panel. Per output element the products are summed in the
/// same order as [`panoptic_conv_forward`]. Rows are distributed over the
/// current rayon pool and computed independently, so the result does not
/// depend on the thread count.
pub fn panoptic_conv_forward_optimized<T: Scalar>(
    x: &Tensor<T>,
    p: &PanopticMap,
    params: &ConvParams<T>,
) -> Result<Tensor<T>> {
    check_map(x, p)?;
    params.check_input(x)?;
    let [n, c_in, h, w] = x.shape();
    let c_out = params.out_channels();
    let k = params.kernel_size();
    let kdim = c_in * k * k;

    let rows: Vec<Vec<T>> = (0..n * h)
        .into_par_iter()
        .map_init(
            || RowScratch {
                cols: vec![T::zero(); kdim * TILE],
                bits: vec![false; k * k * TILE],
                ratio: vec![T::zero(); TILE],
            },
            |scratch, row| {
                let mut out_row = vec![T::zero(); c_out * w];
                conv_row(x, p, params, row / h, row % h, scratch, &mut out_row);
                out_row
            },
        )
        .collect();

    let mut out = Tensor::zeros([n, c_out, h, w]);
    for (row, vals) in rows.iter().enumerate() {
        let (b, i) = (row / h, row % h);
        for co in 0..c_out {
            let dst = out.offset(b, co, i, 0);
            out.data_mut()[dst..dst + w].copy_from_slice(&vals[co * w..(co + 1) * w]);
        }
    }
    Ok(out)
}

fn conv_row<T: Scalar>(
    x: &Tensor<T>,
    p: &PanopticMap,
    params: &ConvParams<T>,
    b: usize,
    i: usize,
    scratch: &mut RowScratch<T>,
    out_row: &mut [T],
) {
    let [_, c_in, h, w] = x.shape();
    let c_out = params.out_channels();
    let k = params.kernel_size();
    let kk2 = k * k;
    let kdim = c_in * kk2;
    let r = (k / 2) as isize;
    let wt = params.weights.data();
    let bias = &params.bias;

    let mut j0 = 0;
    while j0 < w {
        let tw = TILE.min(w - j0);

        for t in 0..tw {
            let valid = fill_window(p, i, j0 + t, k, &mut scratch.bits[t * kk2..(t + 1) * kk2]);
            debug_assert!(valid >= 1);
            scratch.ratio[t] = if valid == 0 {
                T::zero()
            } else {
                renorm_ratio(k, valid)
            };
        }

        // Gather masked patches: cols[(ci, u, v)][t].
        for ci in 0..c_in {
            let plane = x.plane(b, ci);
            for u in 0..k {
                let ii = i as isize + u as isize - r;
                for v in 0..k {
                    let kk = (ci * k + u) * k + v;
                    let dst = &mut scratch.cols[kk * TILE..kk * TILE + tw];
                    if ii < 0 || ii as usize >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (t, slot) in dst.iter_mut().enumerate() {
                        let jj = (j0 + t) as isize + v as isize - r;
                        // Out-of-bounds positions are always masked off.
                        *slot = if scratch.bits[t * kk2 + u * k + v] {
                            src_row[jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }

        let cols = &scratch.cols;
        let ratio = &scratch.ratio[..tw];
        let mut co = 0;
        while co + CO_BLOCK <= c_out {
            let mut acc = [[T::zero(); TILE]; CO_BLOCK];
            let wrows: [&[T]; CO_BLOCK] =
                std::array::from_fn(|q| &wt[(co + q) * kdim..(co + q + 1) * kdim]);
            for kk in 0..kdim {
                let col = &cols[kk * TILE..kk * TILE + tw];
                let (w0, w1, w2, w3) = (wrows[0][kk], wrows[1][kk], wrows[2][kk], wrows[3][kk]);
                let [a0, a1, a2, a3] = &mut acc;
                for ((((&cv, a0), a1), a2), a3) in col
                    .iter()
                    .zip(&mut a0[..tw])
                    .zip(&mut a1[..tw])
                    .zip(&mut a2[..tw])
                    .zip(&mut a3[..tw])
                {
                    *a0 = *a0 + w0 * cv;
                    *a1 = *a1 + w1 * cv;
                    *a2 = *a2 + w2 * cv;
                    *a3 = *a3 + w3 * cv;
                }
            }
            for (q, a) in acc.iter().enumerate() {
                let dst = &mut out_row[(co + q) * w + j0..(co + q) * w + j0 + tw];
                for ((d, &av), &rt) in dst.iter_mut().zip(&a[..tw]).zip(ratio) {
                    *d = rt * av + bias[co + q];
                }
            }
            co += CO_BLOCK;
        }
        while co < c_out {
            let mut acc = [T::zero(); TILE];
            let wrow = &wt[co * kdim..(co + 1) * kdim];
            for (kk, &wv) in wrow.iter().enumerate() {
                let col = &cols[kk * TILE..kk * TILE + tw];
                for (a, &cv) in acc[..tw].iter_mut().zip(col) {
                    *a = *a + wv * cv;
                }
            }
            let dst = &mut out_row[co * w + j0..co * w + j0 + tw];
            for ((d, &av), &rt) in dst.iter_mut().zip(&acc[..tw]).zip(ratio) {
                *d = rt * av + bias[co];
            }
            co += 1;
        }

        j0 += tw;
    }
}

/// Gradients of [`panoptic_conv_forward`]. The masks and ratios depend only
/// on the panoptic map, so the layer is linear in both input and weights.
pub fn panoptic_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    p: &PanopticMap,
    params: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    check_map(x, p)?;
    params.check_input(x)?;
    let [n, c_in, h, w] = x.shape();
    let c_out = params.out_channels();
    if grad_out.shape() != [n, c_out, h, w] {
        return dim_err(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_out.shape(),
            [n, c_out, h, w]
        ));
    }
    let k = params.kernel_size();
    let r = k / 2;
    let wt = params.weights.data();
    let mut grads = ConvGrads::zeros(x.shape(), params.weights.shape());
    let mut bits = vec![false; k * k];

    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let valid = fill_window(p, i, j, k, &mut bits);
                if valid == 0 {
                    continue;
                }
                let ratio: T = renorm_ratio(k, valid);
                for co in 0..c_out {
                    let g = grad_out.get(b, co, i, j);
                    grads.grad_bias[co] = grads.grad_bias[co] + g;
                    let gr = g * ratio;
                    for ci in 0..c_in {
                        let wbase = (co * c_in + ci) * k * k;
                        for u in 0..k {
                            for v in 0..k {
                                if !bits[u * k + v] {
                                    continue;
                                }
                                let (ii, jj) = (i + u - r, j + v - r);
                                let xo = x.offset(b, ci, ii, jj);
                                let gw = &mut grads.grad_weights.data_mut()[wbase + u * k + v];
                                *gw = *gw + gr * x.data()[xo];
                                let gx = &mut grads.grad_input.data_mut()[xo];
                                *gx = *gx + gr * wt[wbase + u * k + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Ordinary stride-1 zero-padded convolution.
pub fn standard_conv_forward<T: Scalar>(x: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    params.check_input(x)?;
    let [n, c_in, h, w] = x.shape();
    let c_out = params.out_channels();
    let k = params.kernel_size();
    let r = (k / 2) as isize;
    let wt = params.weights.data();
    let mut out = Tensor::zeros([n, c_out, h, w]);
    for b in 0..n {
        for co in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for ci in 0..c_in {
                        let plane = x.plane(b, ci);
                        let wbase = (co * c_in + ci) * k * k;
                        for u in 0..k {
                            let ii = i as isize + u as isize - r;
                            if ii < 0 || ii as usize >= h {
                                continue;
                            }
                            for v in 0..k {
                                let jj = j as isize + v as isize - r;
                                if jj < 0 || jj as usize >= w {
                                    continue;
                                }
                                acc = acc
                                    + wt[wbase + u * k + v] * plane[ii as usize * w + jj as usize];
                            }
                        }
                    }
                    out.set(b, co, i, j, acc + params.bias[co]);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`standard_conv_forward`].
pub fn standard_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    params.check_input(x)?;
    let [n, c_in, h, w] = x.shape();
    let c_out = params.out_channels();
    if grad_out.shape() != [n, c_out, h, w] {
        return dim_err(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_out.shape(),
            [n, c_out, h, w]
        ));
    }
    let k = params.kernel_size();
    let r = (k / 2) as isize;
    let wt = params.weights.data();
    let mut grads = ConvGrads::zeros(x.shape(), params.weights.shape());
    for b in 0..n {
        for co in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let g = grad_out.get(b, co, i, j);
                    grads.grad_bias[co] = grads.grad_bias[co] + g;
                    for ci in 0..c_in {
                        let wbase = (co * c_in + ci) * k * k;
                        for u in 0..k {
                            let ii = i as isize + u as isize - r;
                            if ii < 0 || ii as usize >= h {
                                continue;
                            }
                            for v in 0..k {
                                let jj = j as isize + v as isize - r;
                                if jj < 0 || jj as usize >= w {
                                    continue;
                                }
                                let xo = x.offset(b, ci, ii as usize, jj as usize);
                                let gw = &mut grads.grad_weights.data_mut()[wbase + u * k + v];
                                *gw = *gw + g * x.data()[xo];
                                let gx = &mut grads.grad_input.data_mut()[xo];
                                *gx = *gx + g * wt[wbase + u * k + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Number of in-bounds positions of the `k x k` window centered at `(i, j)`.
pub fn in_bounds_count(h: usize, w: usize, i: usize, j: usize, k: usize) -> usize {
    let r = k / 2;
    let rows = (i + r).min(h - 1) + 1 - i.saturating_sub(r);
    let cols = (j + r).min(w - 1) + 1 - j.saturating_sub(r);
    rows * cols
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[u32]]) -> PanopticMap {
        let h = rows.len();
        let w = rows[0].len();
        PanopticMap::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn mask_from_mixed_window() {
        let p = map(&[&[1, 1, 2], &[1, 1, 2], &[3, 3, 2]]);
        let m: BinaryMask = window_mask(&p, (1, 1), 3).unwrap();
        assert_eq!(
            m.data(),
            &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn mask_uniform_map_all_ones() {
        let p = PanopticMap::constant(7, 9, 42).unwrap();
        for k in [1, 3, 5] {
            for &(i, j) in &[(3, 4), (2, 2)] {
                let m: BinaryMask = window_mask(&p, (i, j), k).unwrap();
                assert_eq!(m.count_ones(), k * k);
            }
        }
    }

    #[test]
    fn mask_corner_padding_never_matches() {
        let p = PanopticMap::constant(4, 4, 0).unwrap();
        let m: BinaryMask = window_mask(&p, (0, 0), 3).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_errors() {
        let p = PanopticMap::constant(2, 2, 0).unwrap();
        assert!(matches!(window_mask::<f64>(&p, (2, 0), 3), Err(Error::Index { .. })));
        assert!(window_mask::<f64>(&p, (0, 0), 2).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(ConvParams::<f64>::zeros(1, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn all_ones_kernel_renormalizes_borders() {
        let p = PanopticMap::constant(5, 6, 3).unwrap();
        let x = Tensor::full([1, 1, 5, 6], 1.0);
        let params = ConvParams::new(Tensor::full([1, 1, 3, 3], 1.0), vec![0.0]).unwrap();
        let y = panoptic_conv_forward(&x, &p, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 9.0), "{:?}", y.data());
        let y = panoptic_conv_forward_optimized(&x, &p, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn identity_kernel_standard_conv() {
        let x = Tensor::from_fn([1, 1, 3, 4], |_, _, i, j| (i * 4 + j) as f64 * 0.5 - 1.0);
        let params = ConvParams::new(Tensor::full([1, 1, 1, 1], 1.0), vec![0.0]).unwrap();
        assert_eq!(standard_conv_forward(&x, &params).unwrap(), x);
    }

    #[test]
    fn all_ones_standard_conv_interior() {
        let x = Tensor::full([1, 1, 5, 5], 1.0);
        let params = ConvParams::new(Tensor::full([1, 1, 3, 3], 1.0), vec![0.0]).unwrap();
        let y = standard_conv_forward(&x, &params).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(y.get(0, 0, i, j), 9.0);
            }
        }
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let p = map(&[&[1, 1, 2], &[1, 3, 2]]);
        let x = Tensor::from_fn([1, 2, 2, 3], |_, c, i, j| (c + i * 3 + j) as f64 * 0.3);
        let params = ConvParams::new(
            Tensor::from_fn([2, 2, 3, 3], |a, b, u, v| (a + b + u + v) as f64 * 0.1 - 0.4),
            vec![0.5, -0.5],
        )
        .unwrap();
        let g = panoptic_conv_backward(&Tensor::zeros([1, 2, 2, 3]), &x, &p, &params).unwrap();
        assert!(g.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = PanopticMap::constant(4, 4, 0).unwrap();
        let x = Tensor::<f64>::zeros([1, 1, 4, 5]);
        let params = ConvParams::zeros(1, 1, 3).unwrap();
        assert!(matches!(panoptic_conv_forward(&x, &p, &params), Err(Error::Dimension(_))));
        assert!(panoptic_conv_forward_optimized(&x, &p, &params).is_err());
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        assert!(panoptic_conv_forward(&x, &p, &params).is_err());
        let x = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let bad_grad = Tensor::zeros([1, 2, 4, 4]);
        assert!(panoptic_conv_backward(&bad_grad, &x, &p, &params).is_err());
    }

    #[test]
    fn in_bounds_counts() {
        assert_eq!(in_bounds_count(5, 5, 0, 0, 3), 4);
        assert_eq!(in_bounds_count(5, 5, 0, 2, 3), 6);
        assert_eq!(in_bounds_count(5, 5, 2, 2, 3), 9);
        assert_eq!(in_bounds_count(5, 5, 4, 4, 5), 9);
        assert_eq!(in_bounds_count(1, 1, 0, 0, 3), 1);
    }
}
