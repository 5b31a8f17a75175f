//! Affine sampling grids and the differentiable bilinear sampler.
//!
//! Coordinates are normalized so that the image extent is `[-1, 1]` on both
//! axes and pixel `i` of an axis of length `n` has its center at
//! `(2i + 1) / n - 1` (no corner alignment). Samples that fall outside the
//! source contribute zero.
//!
//! The slice kernels ([`sample_into`], [`sample_backward`]) are shared with
//! the autodiff graph so the network path and the typed API below can never
//! disagree on conventions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape, Result};
use crate::scalar::Scalar;

/// A planar (channel-major) image of any channel count and size.
#[derive(Clone, Debug, PartialEq)]
pub struct Planar<S> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Planar<S> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape(alloc::format!(
                "planar {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![S::zero(); channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut S {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-output-pixel source coordinates, `height x width x (x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<S> {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<S>,
}

impl<S: Scalar> SamplingGrid<S> {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> (S, S) {
        let k = 2 * (i * self.width + j);
        (self.coords[k], self.coords[k + 1])
    }
}

/// Normalized center of pixel `i` on an axis of length `n`.
#[inline]
pub fn pixel_center<S: Scalar>(i: usize, n: usize) -> S {
    S::from_f64_lossy((2 * i + 1) as f64 / n as f64 - 1.0)
}

/// Normalized coordinate to continuous pixel index (pixel centers at integers).
#[inline]
pub fn unnormalize<S: Scalar>(v: S, n: usize) -> S {
    let half = S::from_f64_lossy(0.5);
    ((v + S::one()) * S::from_usize(n).unwrap() - S::one()) * half
}

/// Writes `theta . (x_j, y_i, 1)` for every output pixel into `out`
/// (`out_h * out_w * 2` values). `theta` is row-major `[a, b, tx, c, d, ty]`.
pub fn affine_grid_into<S: Scalar>(theta: &[S], out_h: usize, out_w: usize, out: &mut [S]) {
    debug_assert_eq!(theta.len(), 6);
    debug_assert_eq!(out.len(), out_h * out_w * 2);
    for i in 0..out_h {
        let y: S = pixel_center(i, out_h);
        for j in 0..out_w {
            let x: S = pixel_center(j, out_w);
            let k = 2 * (i * out_w + j);
            out[k] = theta[0] * x + theta[1] * y + theta[2];
            out[k + 1] = theta[3] * x + theta[4] * y + theta[5];
        }
    }
}

/// Accumulates the gradient of a loss with respect to `theta` given the
/// gradient with respect to the grid it produced.
pub fn affine_grid_backward<S: Scalar>(grad_grid: &[S], out_h: usize, out_w: usize, grad_theta: &mut [S]) {
    for i in 0..out_h {
        let y: S = pixel_center(i, out_h);
        for j in 0..out_w {
            let x: S = pixel_center(j, out_w);
            let k = 2 * (i * out_w + j);
            let (gx, gy) = (grad_grid[k], grad_grid[k + 1]);
            grad_theta[0] += gx * x;
            grad_theta[1] += gx * y;
            grad_theta[2] += gx;
            grad_theta[3] += gy * x;
            grad_theta[4] += gy * y;
            grad_theta[5] += gy;
        }
    }
}

struct Taps<S> {
    x0: isize,
    y0: isize,
    wx: S,
    wy: S,
}

#[inline]
fn taps<S: Scalar>(gx: S, gy: S, h: usize, w: usize) -> Taps<S> {
    let px = unnormalize(gx, w);
    let py = unnormalize(gy, h);
    let fx = px.floor();
    let fy = py.floor();
    Taps {
        x0: fx.to_isize().unwrap_or(isize::MIN / 2),
        y0: fy.to_isize().unwrap_or(isize::MIN / 2),
        wx: px - fx,
        wy: py - fy,
    }
}

#[inline]
fn inside(x: isize, y: isize, h: usize, w: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

/// Bilinear sampling of a `c x h x w` source at every grid location, writing
/// `c x out_h x out_w` values into `out`.
pub fn sample_into<S: Scalar>(
    src: &[S],
    c: usize,
    h: usize,
    w: usize,
    grid: &[S],
    out_h: usize,
    out_w: usize,
    out: &mut [S],
) {
    let plane = h * w;
    let out_plane = out_h * out_w;
    for p in 0..out_plane {
        let (gx, gy) = (grid[2 * p], grid[2 * p + 1]);
        if !(gx.is_finite() && gy.is_finite()) {
            for ch in 0..c {
                out[ch * out_plane + p] = S::zero();
            }
            continue;
        }
        let t = taps(gx, gy, h, w);
        let one = S::one();
        let corners = [
            (t.x0, t.y0, (one - t.wx) * (one - t.wy)),
            (t.x0 + 1, t.y0, t.wx * (one - t.wy)),
            (t.x0, t.y0 + 1, (one - t.wx) * t.wy),
            (t.x0 + 1, t.y0 + 1, t.wx * t.wy),
        ];
        for ch in 0..c {
            let base = &src[ch * plane..(ch + 1) * plane];
            let mut acc = S::zero();
            for &(x, y, wt) in &corners {
                if inside(x, y, h, w) {
                    acc += wt * base[y as usize * w + x as usize];
                }
            }
            out[ch * out_plane + p] = acc;
        }
    }
}

/// Backward pass of [`sample_into`]. Gradients are accumulated (`+=`) into
/// whichever of `grad_src` / `grad_grid` is requested.
#[allow(clippy::too_many_arguments)]
pub fn sample_backward<S: Scalar>(
    src: &[S],
    c: usize,
    h: usize,
    w: usize,
    grid: &[S],
    out_h: usize,
    out_w: usize,
    upstream: &[S],
    mut grad_src: Option<&mut [S]>,
    mut grad_grid: Option<&mut [S]>,
) {
    let plane = h * w;
    let out_plane = out_h * out_w;
    let half_w = S::from_usize(w).unwrap() * S::from_f64_lossy(0.5);
    let half_h = S::from_usize(h).unwrap() * S::from_f64_lossy(0.5);
    let one = S::one();
    for p in 0..out_plane {
        let (gx, gy) = (grid[2 * p], grid[2 * p + 1]);
        if !(gx.is_finite() && gy.is_finite()) {
            continue;
        }
        let t = taps(gx, gy, h, w);
        let (x0, y0, x1, y1) = (t.x0, t.y0, t.x0 + 1, t.y0 + 1);
        let in00 = inside(x0, y0, h, w);
        let in10 = inside(x1, y0, h, w);
        let in01 = inside(x0, y1, h, w);
        let in11 = inside(x1, y1, h, w);
        let mut dgx = S::zero();
        let mut dgy = S::zero();
        for ch in 0..c {
            let g = upstream[ch * out_plane + p];
            if g == S::zero() {
                continue;
            }
            let base = ch * plane;
            let v = |inb: bool, x: isize, y: isize| {
                if inb {
                    src[base + y as usize * w + x as usize]
                } else {
                    S::zero()
                }
            };
            let v00 = v(in00, x0, y0);
            let v10 = v(in10, x1, y0);
            let v01 = v(in01, x0, y1);
            let v11 = v(in11, x1, y1);
            if grad_grid.is_some() {
                let dx = (one - t.wy) * (v10 - v00) + t.wy * (v11 - v01);
                let dy = (one - t.wx) * (v01 - v00) + t.wx * (v11 - v10);
                dgx += g * dx;
                dgy += g * dy;
            }
            if let Some(gs) = grad_src.as_deref_mut() {
                let mut put = |inb: bool, x: isize, y: isize, wt: S| {
                    if inb {
                        gs[base + y as usize * w + x as usize] += g * wt;
                    }
                };
                put(in00, x0, y0, (one - t.wx) * (one - t.wy));
                put(in10, x1, y0, t.wx * (one - t.wy));
                put(in01, x0, y1, (one - t.wx) * t.wy);
                put(in11, x1, y1, t.wx * t.wy);
            }
        }
        if let Some(gg) = grad_grid.as_deref_mut() {
            gg[2 * p] += dgx * half_w;
            gg[2 * p + 1] += dgy * half_h;
        }
    }
}

/// Sampling grid for `theta` over an `out_height x out_width` output.
pub fn affine_grid<S: Scalar>(theta: &[S; 6], out_height: usize, out_width: usize) -> SamplingGrid<S> {
    let mut coords = vec![S::zero(); out_height * out_width * 2];
    affine_grid_into(theta, out_height, out_width, &mut coords);
    SamplingGrid { height: out_height, width: out_width, coords }
}

pub fn bilinear_sample<S: Scalar>(source: &Planar<S>, grid: &SamplingGrid<S>) -> Planar<S> {
    let mut out = Planar::zeros(source.channels, grid.height, grid.width);
    sample_into(
        &source.data,
        source.channels,
        source.height,
        source.width,
        &grid.coords,
        grid.height,
        grid.width,
        &mut out.data,
    );
    out
}

/// Exact gradients of [`bilinear_sample`] with respect to the source pixels
/// and the grid coordinates.
pub fn bilinear_sample_grad<S: Scalar>(
    source: &Planar<S>,
    grid: &SamplingGrid<S>,
    upstream_grad: &Planar<S>,
) -> Result<(Planar<S>, SamplingGrid<S>)> {
    if upstream_grad.channels != source.channels
        || upstream_grad.height != grid.height
        || upstream_grad.width != grid.width
    {
        return Err(shape("upstream gradient does not match sampler output"));
    }
    let mut grad_source = Planar::zeros(source.channels, source.height, source.width);
    let mut grad_grid =
        SamplingGrid { height: grid.height, width: grid.width, coords: vec![S::zero(); grid.coords.len()] };
    sample_backward(
        &source.data,
        source.channels,
        source.height,
        source.width,
        &grid.coords,
        grid.height,
        grid.width,
        &upstream_grad.data,
        Some(&mut grad_source.data),
        Some(&mut grad_grid.coords),
    );
    Ok((grad_source, grad_grid))
}
