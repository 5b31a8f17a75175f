//! Synthetic corruption generator.
//!
//! An original image gets a rectangular hole. A smaller patch inside the hole
//! is colour-shifted, rescaled and feather-blended into a second (target)
//! image, which becomes the guidance. The ring between patch and hole shows
//! target content after alignment, so a synthesizer must invent it.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{make_incomplete, AffineTransform, BoxRegion, HoleSpec, ImageTensor, TrainingExample, MIN_SIDE};
use crate::error::{validation, Error, Result};

/// Placement attempts before [`corrupt_patch`] gives up.
pub const PLACEMENT_TRIES: usize = 100;

/// Per-channel colour shift applied to the pasted patch in `[0, 1]` units:
/// `v' = clamp(gain * v + bias)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceJitter {
    pub gain: [f64; 2],
    pub bias: [f64; 2],
}

impl Default for AppearanceJitter {
    fn default() -> Self {
        Self { gain: [0.7, 1.3], bias: [-0.15, 0.15] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub resolution: usize,
    /// Hole width and height, as fractions of `resolution`.
    pub hole_side_range: [f64; 2],
    /// Per-side gap between hole and patch, as fractions of the hole side.
    pub gap_range: [f64; 2],
    /// Width in original-image pixels of the linear alpha ramp at the patch border.
    pub feather_width: f64,
    pub scale_jitter: [f64; 2],
    /// Largest absolute rotation of the pasted patch, radians.
    pub max_rotation: f64,
    /// `None` pastes the original colours unchanged.
    pub appearance: Option<AppearanceJitter>,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            resolution: 224,
            hole_side_range: [0.25, 0.55],
            gap_range: [0.0, 0.25],
            feather_width: 7.0,
            scale_jitter: [0.8, 1.25],
            max_rotation: 0.0,
            appearance: Some(AppearanceJitter::default()),
            seed: 0,
        }
    }
}

fn ordered(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(validation(format!("{name} {r:?} must satisfy {lo} <= lo <= hi <= {hi}")));
    }
    Ok(())
}

impl DatagenConfig {
    pub fn with_resolution(resolution: usize) -> Self {
        Self { resolution, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < MIN_SIDE {
            return Err(validation(format!("resolution {} below {MIN_SIDE}", self.resolution)));
        }
        ordered("hole_side_range", self.hole_side_range, 0.0, 1.0)?;
        let (lo, hi) = self.side_bounds();
        if lo == 0 || lo > hi {
            return Err(validation(format!("hole_side_range {:?} admits no integer side", self.hole_side_range)));
        }
        // Gaps on opposite sides must leave at least one patch pixel.
        ordered("gap_range", self.gap_range, 0.0, 0.5)?;
        if self.gap_range[1] >= 0.5 {
            return Err(validation("gap_range upper bound must be below 0.5"));
        }
        if !(self.feather_width.is_finite() && self.feather_width >= 0.0) {
            return Err(validation(format!("feather_width {} must be >= 0", self.feather_width)));
        }
        ordered("scale_jitter", self.scale_jitter, f64::MIN_POSITIVE, f64::MAX)?;
        if !(self.max_rotation.is_finite() && self.max_rotation >= 0.0) {
            return Err(validation("max_rotation must be finite and >= 0"));
        }
        if let Some(a) = &self.appearance {
            ordered("appearance.gain", a.gain, 0.0, f64::MAX)?;
            ordered("appearance.bias", a.bias, -1.0, 1.0)?;
        }
        Ok(())
    }

    /// Inclusive integer range of hole sides.
    pub fn side_bounds(&self) -> (usize, usize) {
        let r = self.resolution as f64;
        let lo = libm::ceil(self.hole_side_range[0] * r) as usize;
        let hi = (libm::floor(self.hole_side_range[1] * r) as usize).min(self.resolution);
        (lo.max(1), hi)
    }
}

/// Where and how the patch was pasted into the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub scale: f64,
    pub rotation: f64,
    /// Pixel offset `o` of the map `q = s R u + o` from the original frame
    /// into the guidance frame.
    pub offset: [f64; 2],
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

impl Placement {
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = (libm::sin(self.rotation), libm::cos(self.rotation));
        [[self.scale * c, -self.scale * s], [self.scale * s, self.scale * c]]
    }

    /// Pixel-space map from the original frame into the guidance frame.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let l = self.linear();
        (l[0][0] * x + l[0][1] * y + self.offset[0], l[1][0] * x + l[1][1] * y + self.offset[1])
    }

    /// Inverse of [`Self::apply`].
    pub fn unapply(&self, x: f64, y: f64) -> (f64, f64) {
        let l = self.linear();
        let det = l[0][0] * l[1][1] - l[0][1] * l[1][0];
        let (dx, dy) = (x - self.offset[0], y - self.offset[1]);
        ((l[1][1] * dx - l[0][1] * dy) / det, (l[0][0] * dy - l[1][0] * dx) / det)
    }

    pub fn transform(&self, width: usize, height: usize) -> AffineTransform {
        AffineTransform::from_pixel_affine(self.linear(), (self.offset[0], self.offset[1]), width, height)
    }

    /// Colour shift of one normalized channel value.
    pub fn recolor(&self, c: usize, v: f64) -> f64 {
        let u = (self.gain[c] * (v + 1.0) * 0.5 + self.bias[c]).clamp(0.0, 1.0);
        2.0 * u - 1.0
    }
}

/// Geometry of one corruption. `placement` is filled by [`corrupt_patch`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub hole_box: BoxRegion,
    pub patch_box: BoxRegion,
    /// Gap widths: left, top, right, bottom.
    pub gaps: [usize; 4],
    pub placement: Option<Placement>,
}

/// The RNG for example `index` of a corpus seeded with `seed`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn gap<R: Rng + ?Sized>(rng: &mut R, side: usize, r: [f64; 2]) -> usize {
    let lo = libm::ceil(r[0] * side as f64) as usize;
    let hi = libm::floor(r[1] * side as f64) as usize;
    if lo >= hi {
        lo.min(hi)
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a hole box and per-side gaps.
pub fn sample_geometry<R: Rng + ?Sized>(rng: &mut R, config: &DatagenConfig) -> Result<CorruptionRecord> {
    config.validate()?;
    let res = config.resolution;
    let (lo, hi) = config.side_bounds();
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let x0 = rng.random_range(0..=res - w);
    let y0 = rng.random_range(0..=res - h);
    let hole_box = BoxRegion::new(x0, y0, x0 + w, y0 + h);
    let gaps = [
        gap(rng, w, config.gap_range),
        gap(rng, h, config.gap_range),
        gap(rng, w, config.gap_range),
        gap(rng, h, config.gap_range),
    ];
    let patch_box = BoxRegion::new(x0 + gaps[0], y0 + gaps[1], x0 + w - gaps[2], y0 + h - gaps[3]);
    debug_assert!(patch_box.area() > 0);
    Ok(CorruptionRecord { hole_box, patch_box, gaps, placement: None })
}

fn corners(b: &BoxRegion) -> [(f64, f64); 4] {
    let (x0, y0, x1, y1) = (b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64);
    [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
}

fn sample_placement<R: Rng + ?Sized>(rng: &mut R, hole: &BoxRegion, config: &DatagenConfig) -> Result<Placement> {
    let res = config.resolution as f64;
    for _ in 0..PLACEMENT_TRIES {
        let scale = uniform(rng, config.scale_jitter);
        let rotation = if config.max_rotation > 0.0 {
            rng.random_range(-config.max_rotation..=config.max_rotation)
        } else {
            0.0
        };
        let mut p = Placement { scale, rotation, offset: [0.0; 2], gain: [1.0; 3], bias: [0.0; 3] };
        let mapped = corners(hole).map(|(x, y)| p.apply(x, y));
        let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| mapped.iter().map(pick).fold(init, f);
        let lo_x = libm::ceil(-fold(f64::min, f64::INFINITY, |q| q.0));
        let hi_x = libm::floor(res - fold(f64::max, f64::NEG_INFINITY, |q| q.0));
        let lo_y = libm::ceil(-fold(f64::min, f64::INFINITY, |q| q.1));
        let hi_y = libm::floor(res - fold(f64::max, f64::NEG_INFINITY, |q| q.1));
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let ox = rng.random_range(lo_x as i64..=hi_x as i64) as f64;
        let oy = rng.random_range(lo_y as i64..=hi_y as i64) as f64;
        p.offset = [ox, oy];
        if let Some(a) = &config.appearance {
            for c in 0..3 {
                p.gain[c] = uniform(rng, a.gain);
                p.bias[c] = uniform(rng, a.bias);
            }
        }
        return Ok(p);
    }
    Err(Error::Placement {
        tries: PLACEMENT_TRIES,
        reason: format!("hole {hole:?} does not fit a {}px guidance at the sampled scales", config.resolution),
    })
}

/// Bilinear sample at continuous pixel position `(x, y)`, zero outside.
fn sample_px(img: &ImageTensor, c: usize, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (libm::floor(fx), libm::floor(fy));
    let (wx, wy) = (fx - x0, fy - y0);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            img.at(c, yi as usize, xi as usize)
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    at(xi, yi) * (1.0 - wx) * (1.0 - wy)
        + at(xi + 1, yi) * wx * (1.0 - wy)
        + at(xi, yi + 1) * (1.0 - wx) * wy
        + at(xi + 1, yi + 1) * wx * wy
}

/// Paste opacity at original-frame position `(x, y)`: a linear ramp from the
/// patch border reaching 1 at `feather` pixels inside, 0 outside.
pub fn paste_alpha(patch: &BoxRegion, feather: f64, x: f64, y: f64) -> f64 {
    let d = (x - patch.x0 as f64).min(patch.x1 as f64 - x).min(y - patch.y0 as f64).min(patch.y1 as f64 - y);
    if d <= 0.0 {
        0.0
    } else if feather <= 0.0 {
        1.0
    } else {
        (d / feather).min(1.0)
    }
}

/// Result of [`corrupt_patch`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub guidance: ImageTensor,
    pub gt_transform: AffineTransform,
    pub placement: Placement,
    pub patch_box_in_guidance: BoxRegion,
}

/// Pastes the recoloured patch of `original` into `target` at a random
/// position and scale, alpha-feathered at its border.
pub fn corrupt_patch<R: Rng + ?Sized>(
    original: &ImageTensor,
    target: &ImageTensor,
    record: &CorruptionRecord,
    rng: &mut R,
    config: &DatagenConfig,
) -> Result<Corruption> {
    config.validate()?;
    let res = config.resolution;
    for (name, img) in [("original", original), ("target", target)] {
        if img.height() != res || img.width() != res {
            return Err(validation(format!("{name} is {}x{}, expected {res}x{res}", img.height(), img.width())));
        }
    }
    let placement = sample_placement(rng, &record.hole_box, config)?;
    let plane = res * res;
    let mut data = target.data().to_vec();
    for y in 0..res {
        for x in 0..res {
            let (ux, uy) = placement.unapply(x as f64 + 0.5, y as f64 + 0.5);
            let alpha = paste_alpha(&record.patch_box, config.feather_width, ux, uy);
            if alpha == 0.0 {
                continue;
            }
            for c in 0..3 {
                let v = placement.recolor(c, sample_px(original, c, ux, uy));
                let i = c * plane + y * res + x;
                data[i] = alpha * v + (1.0 - alpha) * data[i];
            }
        }
    }
    let guidance = ImageTensor::new(res, res, data)?;

    let mapped = corners(&record.patch_box).map(|(x, y)| placement.apply(x, y));
    let min = |f: fn(&(f64, f64)) -> f64| mapped.iter().map(f).fold(f64::INFINITY, f64::min);
    let max = |f: fn(&(f64, f64)) -> f64| mapped.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let clip = |v: f64| libm::fmax(0.0, libm::fmin(v, res as f64)) as usize;
    let patch_box_in_guidance = BoxRegion::new(
        clip(libm::floor(min(|q| q.0))),
        clip(libm::floor(min(|q| q.1))),
        clip(libm::ceil(max(|q| q.0))),
        clip(libm::ceil(max(|q| q.1))),
    );
    Ok(Corruption { guidance, gt_transform: placement.transform(res, res), placement, patch_box_in_guidance })
}

/// Draws geometry and placement, and assembles the training example.
pub fn make_example<R: Rng + ?Sized>(
    original: &ImageTensor,
    target: &ImageTensor,
    rng: &mut R,
    config: &DatagenConfig,
) -> Result<(TrainingExample, CorruptionRecord)> {
    let mut record = sample_geometry(rng, config)?;
    let corruption = corrupt_patch(original, target, &record, rng, config)?;
    record.placement = Some(corruption.placement);
    let hole = HoleSpec::rect(record.hole_box, config.resolution, config.resolution)?;
    let example = TrainingExample {
        ground_truth: original.clone(),
        incomplete: make_incomplete(original, &hole),
        guidance: corruption.guidance,
        hole,
        gt_transform: corruption.gt_transform,
        patch_box: record.patch_box,
        patch_box_in_guidance: corruption.patch_box_in_guidance,
    };
    Ok((example, record))
}

/// The hole-box pixels whose aligned guidance value comes purely from the
/// pasted patch: all four bilinear neighbours of the aligned sample position
/// are fully opaque. On these pixels warping the guidance by the
/// ground-truth transform reproduces the (recoloured, resampled) patch.
pub fn interior_pixels(record: &CorruptionRecord, config: &DatagenConfig) -> Vec<(usize, usize)> {
    let Some(p) = record.placement else { return Vec::new() };
    let res = config.resolution as f64;
    let mut out = Vec::new();
    let hb = record.hole_box;
    for y in hb.y0..hb.y1 {
        for x in hb.x0..hb.x1 {
            let (qx, qy) = p.apply(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = (libm::floor(qx - 0.5), libm::floor(qy - 0.5));
            let opaque = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].iter().all(|(dx, dy)| {
                let (gx, gy) = (fx + dx + 0.5, fy + dy + 0.5);
                if gx < 0.0 || gy < 0.0 || gx > res || gy > res {
                    return false;
                }
                let (ux, uy) = p.unapply(gx, gy);
                paste_alpha(&record.patch_box, config.feather_width, ux, uy) >= 1.0
            });
            if opaque {
                out.push((x, y));
            }
        }
    }
    out
}
