//! Shared domain types: images, holes, affine transforms, training examples,
//! and the naive cut-paste compositor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::warp::{self, Planar};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

/// An RGB image in storage form, values in `[0, 1]`, planar layout.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitImage(Planar<f64>);

/// An RGB image in network form, values in `[-1, 1]`, planar layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Planar<f64>);

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(validation(format!("image {height}x{width} smaller than {MIN_SIDE}x{MIN_SIDE}")));
    }
    if len != 3 * height * width {
        return Err(validation(format!("image {height}x{width} needs {} values, got {len}", 3 * height * width)));
    }
    Ok(())
}

fn check_range(data: &[f64], lo: f64, hi: f64) -> Result<()> {
    match data.iter().position(|v| !(v.is_finite() && *v >= lo && *v <= hi)) {
        Some(i) => Err(validation(format!("value {} at index {i} outside [{lo}, {hi}]", data[i]))),
        None => Ok(()),
    }
}

impl UnitImage {
    /// `data` is planar RGB (`3 x height x width`).
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        check_range(&data, 0.0, 1.0)?;
        Ok(Self(Planar { channels: 3, height, width, data }))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn planar(&self) -> &Planar<f64> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at(c, y, x)
    }
}

impl ImageTensor {
    /// `data` is planar RGB (`3 x height x width`) in `[-1, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        check_range(&data, -1.0, 1.0)?;
        Ok(Self(Planar { channels: 3, height, width, data }))
    }

    /// Wraps sampler or network output. Values are clamped into `[-1, 1]`
    /// to absorb rounding; non-finite values are rejected.
    pub fn from_planar(p: Planar<f64>) -> Result<Self> {
        if p.channels != 3 {
            return Err(validation(format!("expected 3 channels, got {}", p.channels)));
        }
        check_dims(p.height, p.width, p.data.len())?;
        if p.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains NaN or infinity".into()));
        }
        let mut p = p;
        for v in &mut p.data {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(Self(p))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(core::iter::repeat_n(v, height * width));
        }
        Self::new(height, width, data)
    }

    pub fn planar(&self) -> &Planar<f64> {
        &self.0
    }

    pub fn into_planar(self) -> Planar<f64> {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at(c, y, x)
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }
}

/// `v' = 2v - 1`.
pub fn normalize(image: &UnitImage) -> ImageTensor {
    let p = image.planar();
    ImageTensor(Planar { data: p.data.iter().map(|v| 2.0 * v - 1.0).collect(), ..p.clone() })
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &ImageTensor) -> UnitImage {
    let p = image.planar();
    UnitImage(Planar { data: p.data.iter().map(|v| (v + 1.0) * 0.5).collect(), ..p.clone() })
}

/// Half-open integer pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRegion {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// `other` lies inside `self` (boundaries may touch).
    pub fn encloses(&self, other: &BoxRegion) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Grows every side by `margin`, clipped to a `width x height` frame.
    pub fn dilate_clipped(&self, margin: usize, width: usize, height: usize) -> BoxRegion {
        BoxRegion {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }

    /// Center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 * 0.5, (self.y0 + self.y1) as f64 * 0.5)
    }
}

/// A hole: bounding box plus binary mask (1 inside the hole).
#[derive(Clone, Debug, PartialEq)]
pub struct HoleSpec {
    bbox: BoxRegion,
    height: usize,
    width: usize,
    mask: Vec<u8>,
}

impl HoleSpec {
    /// Rectangular hole; the mask is the rasterization of `bbox`.
    pub fn rect(bbox: BoxRegion, height: usize, width: usize) -> Result<Self> {
        if !(bbox.x0 < bbox.x1 && bbox.x1 <= width && bbox.y0 < bbox.y1 && bbox.y1 <= height) {
            return Err(Error::DegenerateHole(format!("{bbox:?} invalid in {width}x{height} frame")));
        }
        let mut mask = vec![0u8; height * width];
        for y in bbox.y0..bbox.y1 {
            mask[y * width + bbox.x0..y * width + bbox.x1].fill(1);
        }
        Ok(Self { bbox, height, width, mask })
    }

    /// Arbitrary-shape hole; nonzero mask entries are inside. The box is the
    /// tight bounding box.
    pub fn from_mask(height: usize, width: usize, mask: &[u8]) -> Result<Self> {
        if mask.len() != height * width {
            return Err(validation(format!("mask has {} entries, expected {}", mask.len(), height * width)));
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut bin = vec![0u8; mask.len()];
        for y in 0..height {
            for x in 0..width {
                if mask[y * width + x] != 0 {
                    bin[y * width + x] = 1;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            return Err(Error::DegenerateHole("mask is empty".into()));
        }
        Ok(Self { bbox: BoxRegion { x0, y0, x1, y1 }, height, width, mask: bin })
    }

    pub fn bbox(&self) -> BoxRegion {
        self.bbox
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major 0/1 mask.
    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn is_rectangular(&self) -> bool {
        self.area() == self.bbox.area()
    }

    pub fn mask_values<S: crate::Scalar>(&self) -> Vec<S> {
        self.mask.iter().map(|&m| if m != 0 { S::one() } else { S::zero() }).collect()
    }
}

/// 2x3 affine map `[[a, b, tx], [c, d, ty]]` on normalized coordinates,
/// taking output-grid positions to guidance-image positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub theta: [f64; 6],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform { theta: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };

    pub fn new(theta: [f64; 6]) -> Self {
        Self { theta }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { theta: [1.0, 0.0, tx, 0.0, 1.0, ty] }
    }

    pub fn scale_translation(scale: f64, tx: f64, ty: f64) -> Self {
        Self { theta: [scale, 0.0, tx, 0.0, scale, ty] }
    }

    /// Builds the normalized transform equivalent to the pixel-space map
    /// `q = scale * u + offset` between two frames of the same size.
    pub fn from_pixel_map(scale: f64, offset: (f64, f64), width: usize, height: usize) -> Self {
        Self::from_pixel_affine([[scale, 0.0], [0.0, scale]], offset, width, height)
    }

    /// General form of [`Self::from_pixel_map`]: `q = linear * u + offset`
    /// in continuous pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub fn from_pixel_affine(linear: [[f64; 2]; 2], offset: (f64, f64), width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        let [[a, b], [c, d]] = linear;
        Self {
            theta: [
                a,
                b * h / w,
                a + b * h / w + 2.0 * offset.0 / w - 1.0,
                c * w / h,
                d,
                c * w / h + d + 2.0 * offset.1 / h - 1.0,
            ],
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.theta;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5])
    }

    pub fn determinant(&self) -> f64 {
        self.theta[0] * self.theta[4] - self.theta[1] * self.theta[3]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        let (a, b) = (&self.theta, &inner.theta);
        AffineTransform {
            theta: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn inverse(&self) -> Option<AffineTransform> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let t = &self.theta;
        let (ia, ib, ic, id) = (t[4] / det, -t[1] / det, -t[3] / det, t[0] / det);
        Some(AffineTransform {
            theta: [ia, ib, -(ia * t[2] + ib * t[5]), ic, id, -(ic * t[2] + id * t[5])],
        })
    }

    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        self.theta.iter().zip(&other.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Applies `t` to homogeneous points `(x, y, 1)`.
pub fn apply_transform_to_points(t: &AffineTransform, points: &[[f64; 3]]) -> Vec<[f64; 2]> {
    let m = &t.theta;
    points
        .iter()
        .map(|p| [m[0] * p[0] + m[1] * p[1] + m[2] * p[2], m[3] * p[0] + m[4] * p[1] + m[5] * p[2]])
        .collect()
}

/// Warps `guidance` by `transform` onto an `out_height x out_width` grid.
pub fn warp_image(guidance: &ImageTensor, transform: &AffineTransform, out_height: usize, out_width: usize) -> ImageTensor {
    let grid = warp::affine_grid(&transform.theta, out_height, out_width);
    ImageTensor(warp::bilinear_sample(guidance.planar(), &grid))
}

/// Output keeps `base` where the mask is 0 and takes `fill` where it is 1.
pub fn composite(fill: &ImageTensor, base: &ImageTensor, hole: &HoleSpec) -> Result<ImageTensor> {
    if !fill.same_size(base) || hole.height() != base.height() || hole.width() != base.width() {
        return Err(crate::error::shape("composite: image and hole sizes differ"));
    }
    let plane = base.height() * base.width();
    let mut out = base.planar().clone();
    for c in 0..3 {
        for (p, &m) in hole.mask().iter().enumerate() {
            if m != 0 {
                out.data[c * plane + p] = fill.data()[c * plane + p];
            }
        }
    }
    Ok(ImageTensor(out))
}

/// The naive baseline: paste guidance content, warped by `transform`, into
/// the hole and keep the context untouched.
pub fn cut_paste(
    incomplete: &ImageTensor,
    guidance: &ImageTensor,
    hole: &HoleSpec,
    transform: &AffineTransform,
) -> Result<ImageTensor> {
    if !transform.is_finite() || transform.determinant().abs() < 1e-8 {
        return Err(validation(format!("transform {:?} is not invertible", transform.theta)));
    }
    let (h, w) = (incomplete.height(), incomplete.width());
    let grid = warp::affine_grid(&transform.theta, h, w);
    let any_inside = (0..h).any(|i| {
        (0..w).any(|j| {
            if !hole.contains(j, i) {
                return false;
            }
            let (x, y) = grid.at(i, j);
            x.abs() < 1.0 + 1.0 / guidance.width() as f64 && y.abs() < 1.0 + 1.0 / guidance.height() as f64
        })
    });
    if !any_inside {
        log::warn!("cut_paste: transform samples entirely outside the guidance image; hole filled with zeros");
    }
    let warped = ImageTensor(warp::bilinear_sample(guidance.planar(), &grid));
    composite(&warped, incomplete, hole)
}

/// One synthetic training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub ground_truth: ImageTensor,
    pub incomplete: ImageTensor,
    pub guidance: ImageTensor,
    pub hole: HoleSpec,
    pub gt_transform: AffineTransform,
    /// The corrupted patch (hole shrunk by the gap widths), in the image frame.
    pub patch_box: BoxRegion,
    /// Pixel box covered by the pasted patch in the guidance image.
    pub patch_box_in_guidance: BoxRegion,
}

impl TrainingExample {
    /// Checks that the incomplete image equals the ground truth outside the
    /// hole and is mid-gray (normalized zero) inside it.
    pub fn check_incomplete(&self) -> Result<()> {
        let (h, w) = (self.ground_truth.height(), self.ground_truth.width());
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = self.incomplete.at(c, y, x);
                    let expected = if self.hole.contains(x, y) { 0.0 } else { self.ground_truth.at(c, y, x) };
                    if v != expected {
                        return Err(validation(format!(
                            "incomplete image mismatch at c={c} y={y} x={x}: {v} != {expected}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Removes the hole content: hole pixels become normalized zero (mid-gray).
pub fn make_incomplete(ground_truth: &ImageTensor, hole: &HoleSpec) -> ImageTensor {
    let plane = ground_truth.height() * ground_truth.width();
    let mut p = ground_truth.planar().clone();
    for c in 0..3 {
        for (i, &m) in hole.mask().iter().enumerate() {
            if m != 0 {
                p.data[c * plane + i] = 0.0;
            }
        }
    }
    ImageTensor(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let u = UnitImage::from_fn(8, 8, |c, y, _| if c == 0 { 0.5 } else if y % 2 == 0 { 0.0 } else { 1.0 }).unwrap();
        let n = normalize(&u);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(n.at(0, y, x), 0.0);
                assert_eq!(n.at(1, y, x), if y % 2 == 0 { -1.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        assert!(UnitImage::new(8, 8, vec![1.5; 192]).is_err());
        assert!(UnitImage::new(8, 8, vec![f64::NAN; 192]).is_err());
        assert!(ImageTensor::new(4, 4, vec![0.0; 48]).is_err());
    }

    #[test]
    fn hole_mask_matches_box() {
        let hole = HoleSpec::rect(BoxRegion::new(2, 3, 6, 7), 8, 10).unwrap();
        assert_eq!(hole.area(), 16);
        assert!(hole.is_rectangular());
        assert!(HoleSpec::rect(BoxRegion::new(3, 3, 3, 5), 8, 8).is_err());
        assert!(HoleSpec::rect(BoxRegion::new(0, 0, 9, 5), 8, 8).is_err());
    }

    #[test]
    fn from_mask_computes_bounding_box() {
        let mut m = vec![0u8; 64];
        m[2 * 8 + 3] = 1;
        m[5 * 8 + 6] = 255;
        let hole = HoleSpec::from_mask(8, 8, &m).unwrap();
        assert_eq!(hole.bbox(), BoxRegion::new(3, 2, 7, 6));
        assert_eq!(hole.area(), 2);
        assert!(!hole.is_rectangular());
        assert!(HoleSpec::from_mask(8, 8, &[0u8; 64]).is_err());
    }

    #[test]
    fn translation_on_origin() {
        let t = AffineTransform::new([1.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        assert_eq!(apply_transform_to_points(&t, &[[0.0, 0.0, 1.0]]), vec![[0.5, 0.0]]);
        let pts = [[0.3, -0.7, 1.0], [1.0, 1.0, 1.0]];
        let same = apply_transform_to_points(&AffineTransform::IDENTITY, &pts);
        assert_eq!(same, vec![[0.3, -0.7], [1.0, 1.0]]);
    }

    #[test]
    fn inverse_round_trips() {
        let t = AffineTransform::new([1.2, 0.1, -0.3, -0.2, 0.8, 0.25]);
        let id = t.compose(&t.inverse().unwrap());
        assert!(id.max_abs_diff(&AffineTransform::IDENTITY) < 1e-14);
        assert!(AffineTransform::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]).inverse().is_none());
    }

    #[test]
    fn pixel_map_translation_moves_whole_pixels() {
        // q = u + (3, -2) on a 16x8 frame
        let t = AffineTransform::from_pixel_map(1.0, (3.0, -2.0), 16, 8);
        assert!((t.theta[2] - 3.0 * 2.0 / 16.0).abs() < 1e-15);
        assert!((t.theta[5] + 2.0 * 2.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn pixel_affine_agrees_with_pixel_space_map() {
        let (w, h) = (20usize, 12usize);
        let lin = [[0.9, -0.2], [0.15, 1.1]];
        let off = (2.5, -1.25);
        let t = AffineTransform::from_pixel_affine(lin, off, w, h);
        for &(ux, uy) in &[(0.0, 0.0), (3.5, 7.25), (20.0, 12.0)] {
            let qx = lin[0][0] * ux + lin[0][1] * uy + off.0;
            let qy = lin[1][0] * ux + lin[1][1] * uy + off.1;
            let (nx, ny) = t.apply(2.0 * ux / w as f64 - 1.0, 2.0 * uy / h as f64 - 1.0);
            assert!((nx - (2.0 * qx / w as f64 - 1.0)).abs() < 1e-12);
            assert!((ny - (2.0 * qy / h as f64 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_cut_paste_of_ground_truth_restores_it() {
        let gt = ramp(8, 8);
        let hole = HoleSpec::rect(BoxRegion::new(2, 2, 6, 6), 8, 8).unwrap();
        let incomplete = make_incomplete(&gt, &hole);
        let out = cut_paste(&incomplete, &gt, &hole, &AffineTransform::IDENTITY).unwrap();
        assert_eq!(out, gt);
    }

    #[test]
    fn constant_guidance_fills_hole_only() {
        let gt = ramp(8, 8);
        let hole = HoleSpec::rect(BoxRegion::new(1, 2, 5, 7), 8, 8).unwrap();
        let incomplete = make_incomplete(&gt, &hole);
        let guide = ImageTensor::filled(8, 8, [0.25, -0.5, 0.75]).unwrap();
        let out = cut_paste(&incomplete, &guide, &hole, &AffineTransform::IDENTITY).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let want = if hole.contains(x, y) { [0.25, -0.5, 0.75][c] } else { gt.at(c, y, x) };
                    assert!((out.at(c, y, x) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn singular_transform_is_rejected() {
        let gt = ramp(8, 8);
        let hole = HoleSpec::rect(BoxRegion::new(2, 2, 6, 6), 8, 8).unwrap();
        let t = AffineTransform::new([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(cut_paste(&gt, &gt, &hole, &t).is_err());
    }
}
