//! Reference implementations written independently of the library kernels.
//! Each one is a direct, unoptimized loop over the definition.

#![allow(dead_code)]

use guided_inpaint_core::domain::{BoxRegion, HoleSpec, ImageTensor};
use guided_inpaint_core::eval::{lab_to_rgb, rgb_to_lab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bilinear sample of one channel of a `h x w` planar image at normalized
/// `(gx, gy)`, zero outside. Pixel `i` covers `[-1 + 2i/n, -1 + 2(i+1)/n]`.
pub fn bilinear_at(plane: &[f64], h: usize, w: usize, gx: f64, gy: f64) -> f64 {
    // Position in units of pixels with centers on integers.
    let px = (gx + 1.0) * w as f64 / 2.0 - 0.5;
    let py = (gy + 1.0) * h as f64 / 2.0 - 0.5;
    let left = px.floor();
    let top = py.floor();
    let mut acc = 0.0;
    for (xi, wx) in [(left, 1.0 - (px - left)), (left + 1.0, px - left)] {
        for (yi, wy) in [(top, 1.0 - (py - top)), (top + 1.0, py - top)] {
            if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
                acc += wx * wy * plane[yi as usize * w + xi as usize];
            }
        }
    }
    acc
}

/// Bilinear sample at continuous pixel position `(x, y)` (pixel `i` spans
/// `[i, i + 1)`), zero outside.
pub fn bilinear_px(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    bilinear_at(plane, h, w, 2.0 * x / w as f64 - 1.0, 2.0 * y / h as f64 - 1.0)
}

/// `theta . (x, y, 1)` for every output pixel center, row-major, `(x, y)` pairs.
pub fn grid_points(theta: &[f64; 6], out_h: usize, out_w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let x = -1.0 + (2 * j + 1) as f64 / out_w as f64;
            let y = -1.0 + (2 * i + 1) as f64 / out_h as f64;
            out.push((theta[0] * x + theta[1] * y + theta[2], theta[3] * x + theta[4] * y + theta[5]));
        }
    }
    out
}

/// `(l1, l2)` over the hole in `[0, 1]` units.
pub fn naive_metrics(pred: &ImageTensor, gt: &ImageTensor, hole: &HoleSpec) -> (f64, f64) {
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
    for c in 0..3 {
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if hole.contains(x, y) {
                    let d = (pred.at(c, y, x) - gt.at(c, y, x)) / 2.0;
                    s1 += d.abs();
                    s2 += d * d;
                    n += 1.0;
                }
            }
        }
    }
    (s1 / n, s2 / n)
}

fn unit(img: &ImageTensor, c: usize, y: usize, x: usize) -> f64 {
    ((img.at(c, y, x) + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn lab_at(img: &ImageTensor, x: usize, y: usize) -> [f64; 3] {
    rgb_to_lab([unit(img, 0, y, x), unit(img, 1, y, x), unit(img, 2, y, x)])
}

/// Bilinear Lab sample at continuous pixel position, edge-clamped.
pub fn lab_clamped(img: &ImageTensor, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let mut acc = [0.0; 3];
    for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
        for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
            let xi = (x0 as i64 + dx).clamp(0, w - 1) as usize;
            let yi = (y0 as i64 + dy).clamp(0, h - 1) as usize;
            let v = lab_at(img, xi, yi);
            for k in 0..3 {
                acc[k] += wx * wy * v[k];
            }
        }
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub scale: f64,
    pub scale_index: usize,
    pub dx: i64,
    pub dy: i64,
    pub score: f64,
}

/// Every admissible placement of the context-matching search, scored by
/// brute force and sorted best first: score, then `|d|^2`, then `|s - 1|`,
/// then `dy`, `dx`, then scale-list position.
pub fn lcm_candidates(
    incomplete: &ImageTensor,
    guidance: &ImageTensor,
    hole: &HoleSpec,
    context_width: usize,
    scales: &[f64],
) -> Vec<Candidate> {
    let b = hole.bbox();
    let (w, h) = (incomplete.width(), incomplete.height());
    let ox0 = b.x0.saturating_sub(context_width);
    let oy0 = b.y0.saturating_sub(context_width);
    let ox1 = (b.x1 + context_width).min(w);
    let oy1 = (b.y1 + context_width).min(h);
    let cx = (b.x0 + b.x1) as f64 / 2.0;
    let cy = (b.y0 + b.y1) as f64 / 2.0;
    let (gw, gh) = (guidance.width() as f64, guidance.height() as f64);
    let span = (gw.max(gh) * 4.0) as i64;
    let mut out = Vec::new();
    for (si, &s) in scales.iter().enumerate() {
        for dy in -span..=span {
            for dx in -span..=span {
                let map = |x: f64, y: f64| (s * (x - cx) + cx + dx as f64, s * (y - cy) + cy + dy as f64);
                let corners = [(ox0, oy0), (ox1, oy0), (ox0, oy1), (ox1, oy1)];
                let inside = corners.iter().all(|&(x, y)| {
                    let (qx, qy) = map(x as f64, y as f64);
                    qx >= 0.0 && qy >= 0.0 && qx <= gw && qy <= gh
                });
                if !inside {
                    continue;
                }
                let mut score = 0.0;
                for y in oy0..oy1 {
                    for x in ox0..ox1 {
                        if hole.contains(x, y) {
                            continue;
                        }
                        let (qx, qy) = map(x as f64 + 0.5, y as f64 + 0.5);
                        let g = lab_clamped(guidance, qx, qy);
                        let a = lab_at(incomplete, x, y);
                        score += (0..3).map(|k| (a[k] - g[k]).powi(2)).sum::<f64>();
                    }
                }
                out.push(Candidate { scale: s, scale_index: si, dx, dy, score });
            }
        }
    }
    out.sort_by(|a, b| {
        let key = |c: &Candidate| (c.dx * c.dx + c.dy * c.dy, (c.scale - 1.0).abs(), c.dy, c.dx, c.scale_index);
        a.score.partial_cmp(&b.score).unwrap().then(key(a).partial_cmp(&key(b)).unwrap())
    });
    out
}

/// A context-matching problem with a known exact answer.
pub struct Planted {
    pub incomplete: ImageTensor,
    pub guidance: ImageTensor,
    pub hole: HoleSpec,
    pub scale: f64,
    pub dx: i64,
    pub dy: i64,
}

fn smooth_texture(rng: &mut ChaCha8Rng, side: usize) -> ImageTensor {
    // Sum of a few random sinusoids per channel, kept well inside the gamut
    // so interpolated Lab values convert back to valid RGB.
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| [rng.random_range(0.2..1.3), rng.random_range(0.2..1.3), rng.random_range(0.0..6.3), rng.random_range(0.02..0.08)])
        .collect();
    let mut data = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let v: f64 = waves[c * 3..c * 3 + 3]
                    .iter()
                    .map(|[fx, fy, ph, a]| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                data.push(v);
            }
        }
    }
    ImageTensor::new(side, side, data).unwrap()
}

/// Builds an instance whose context ring equals the guidance under the
/// placement `q = s (u - c) + c + d`. At `s = 1` the ring pixels are exact
/// copies; otherwise they are the RGB of the interpolated Lab value, so the
/// planted score is zero up to the Lab round trip.
pub fn planted_lcm(seed: u64, side: usize, hole: BoxRegion, context_width: usize, scale: f64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let guidance = smooth_texture(&mut rng, side);
    let hole_spec = HoleSpec::rect(hole, side, side).unwrap();
    let ox0 = hole.x0.saturating_sub(context_width) as f64;
    let oy0 = hole.y0.saturating_sub(context_width) as f64;
    let ox1 = (hole.x1 + context_width).min(side) as f64;
    let oy1 = (hole.y1 + context_width).min(side) as f64;
    let cx = (hole.x0 + hole.x1) as f64 / 2.0;
    let cy = (hole.y0 + hole.y1) as f64 / 2.0;
    // Admissible integer offsets: the mapped outer box stays in the frame.
    let lo_x = (-(scale * (ox0 - cx) + cx)).ceil() as i64;
    let hi_x = (side as f64 - (scale * (ox1 - cx) + cx)).floor() as i64;
    let lo_y = (-(scale * (oy0 - cy) + cy)).ceil() as i64;
    let hi_y = (side as f64 - (scale * (oy1 - cy) + cy)).floor() as i64;
    assert!(lo_x <= hi_x && lo_y <= hi_y, "no admissible placement");
    let dx = rng.random_range(lo_x..=hi_x);
    let dy = rng.random_range(lo_y..=hi_y);

    let plane = side * side;
    let mut data: Vec<f64> = (0..3 * plane).map(|_| rng.random_range(-1.0..1.0)).collect();
    for y in 0..side {
        for x in 0..side {
            let in_outer = (x as f64) >= ox0 && (x as f64) < ox1 && (y as f64) >= oy0 && (y as f64) < oy1;
            if !in_outer {
                continue;
            }
            if hole_spec.contains(x, y) {
                for c in 0..3 {
                    data[c * plane + y * side + x] = 0.0;
                }
                continue;
            }
            let qx = scale * (x as f64 + 0.5 - cx) + cx + dx as f64;
            let qy = scale * (y as f64 + 0.5 - cy) + cy + dy as f64;
            let rgb = if scale == 1.0 {
                let (gx, gy) = (qx.floor() as usize, qy.floor() as usize);
                [0, 1, 2].map(|c| guidance.at(c, gy, gx))
            } else {
                let rgb = lab_to_rgb(lab_clamped(&guidance, qx, qy));
                assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)), "planted colour out of gamut");
                rgb.map(|v| 2.0 * v - 1.0)
            };
            for c in 0..3 {
                data[c * plane + y * side + x] = rgb[c];
            }
        }
    }
    Planted { incomplete: ImageTensor::new(side, side, data).unwrap(), guidance, hole: hole_spec, scale, dx, dy }
}

/// Random rectangular hole whose dilated box leaves room for placements.
pub fn random_hole(rng: &mut ChaCha8Rng, side: usize, min: usize, max: usize) -> BoxRegion {
    let w = rng.random_range(min..=max);
    let h = rng.random_range(min..=max);
    let x0 = rng.random_range(0..=side - w);
    let y0 = rng.random_range(0..=side - h);
    BoxRegion::new(x0, y0, x0 + w, y0 + h)
}

/// Opacity of the pasted patch at original-frame position `(x, y)`.
fn feather_alpha(patch: &BoxRegion, feather: f64, x: f64, y: f64) -> f64 {
    let inset = [x - patch.x0 as f64, patch.x1 as f64 - x, y - patch.y0 as f64, patch.y1 as f64 - y];
    let d = inset.iter().cloned().fold(f64::INFINITY, f64::min);
    if d <= 0.0 {
        0.0
    } else if feather == 0.0 {
        1.0
    } else {
        (d / feather).min(1.0)
    }
}

/// Rebuilds, from the corruption record alone, what the ground-truth warp
/// of the guidance must show at every hole pixel whose four bilinear taps
/// land on fully opaque patch pixels, and compares with `aligned`.
/// Returns `(pixels checked, max abs error)`.
pub fn check_patch_reproduction(
    aligned: &ImageTensor,
    original: &ImageTensor,
    record: &guided_inpaint_core::datagen::CorruptionRecord,
    feather: f64,
) -> (usize, f64) {
    let p = record.placement.expect("record has a placement");
    let (sn, cs) = p.rotation.sin_cos();
    let [a, b, c, d] = [p.scale * cs, -p.scale * sn, p.scale * sn, p.scale * cs];
    let forward = |x: f64, y: f64| (a * x + b * y + p.offset[0], c * x + d * y + p.offset[1]);
    let det = a * d - b * c;
    let back = |x: f64, y: f64| {
        let (u, v) = (x - p.offset[0], y - p.offset[1]);
        ((d * u - b * v) / det, (a * v - c * u) / det)
    };
    let n = original.width();
    let plane = |ch: usize| &original.data()[ch * n * n..(ch + 1) * n * n];
    let recolor = |ch: usize, v: f64| 2.0 * (p.gain[ch] * (v + 1.0) / 2.0 + p.bias[ch]).clamp(0.0, 1.0) - 1.0;
    let (mut count, mut worst) = (0, 0.0f64);
    let hb = record.hole_box;
    for y in hb.y0..hb.y1 {
        for x in hb.x0..hb.x1 {
            let (qx, qy) = forward(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = ((qx - 0.5).floor(), (qy - 0.5).floor());
            let (wx, wy) = (qx - 0.5 - fx, qy - 0.5 - fy);
            let taps = [(0.0, 0.0, (1.0 - wx) * (1.0 - wy)), (1.0, 0.0, wx * (1.0 - wy)), (0.0, 1.0, (1.0 - wx) * wy), (1.0, 1.0, wx * wy)];
            let opaque = taps.iter().all(|&(dx, dy, _)| {
                let (gx, gy) = (fx + dx, fy + dy);
                let in_frame = gx >= 0.0 && gy >= 0.0 && gx < n as f64 && gy < n as f64;
                let (ux, uy) = back(gx + 0.5, gy + 0.5);
                in_frame && feather_alpha(&record.patch_box, feather, ux, uy) >= 1.0
            });
            if !opaque {
                continue;
            }
            count += 1;
            for ch in 0..3 {
                let expected: f64 = taps
                    .iter()
                    .map(|&(dx, dy, w)| {
                        let (ux, uy) = back(fx + dx + 0.5, fy + dy + 0.5);
                        w * recolor(ch, bilinear_px(plane(ch), n, n, ux, uy))
                    })
                    .sum();
                worst = worst.max((aligned.at(ch, y, x) - expected).abs());
            }
        }
    }
    (count, worst)
}

/// Mean absolute difference in `[0, 1]` units between `a` and `b` over the
/// hole box minus the patch box, or `None` when that ring is empty.
pub fn gap_ring_difference(
    a: &ImageTensor,
    b: &ImageTensor,
    record: &guided_inpaint_core::datagen::CorruptionRecord,
) -> Option<f64> {
    let (hb, pb) = (record.hole_box, record.patch_box);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in hb.y0..hb.y1 {
        for x in hb.x0..hb.x1 {
            if pb.contains(x, y) {
                continue;
            }
            for c in 0..3 {
                sum += (a.at(c, y, x) - b.at(c, y, x)).abs() / 2.0;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
