//! Seeded procedural RGB scenes: gradients, blobs, boxes, stripes and fine
//! texture. Used as a stand-in image corpus for tests and demos.

use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::UnitImage;

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// A deterministic `height x width` scene for `seed`.
pub fn random_scene(seed: u64, height: usize, width: usize) -> UnitImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7e5ce7e);
    let (h, w) = (height as f64, width as f64);
    let mut img = vec![0.0f64; 3 * height * width];
    let plane = height * width;

    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..core::f64::consts::TAU);
    let (ca, sa) = (libm::cos(angle), libm::sin(angle));
    for y in 0..height {
        for x in 0..width {
            let t = (((x as f64 / w - 0.5) * ca + (y as f64 / h - 0.5) * sa) + 0.75) / 1.5;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + y * width + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let blobs = rng.random_range(3..8);
    for _ in 0..blobs {
        let col = color(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let (rx, ry) = (rng.random_range(0.05..0.3) * w, rng.random_range(0.05..0.3) * h);
        let alpha = rng.random_range(0.7..1.0);
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let d = dx * dx + dy * dy;
                if d < 1.0 {
                    let a = alpha * (1.0 - d).min(0.25) * 4.0;
                    for c in 0..3 {
                        let v = &mut img[c * plane + y * width + x];
                        *v = *v * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }

    let boxes = rng.random_range(1..4);
    for _ in 0..boxes {
        let col = color(&mut rng);
        let x0 = rng.random_range(0..width);
        let y0 = rng.random_range(0..height);
        let x1 = (x0 + rng.random_range(width / 8..width / 2 + 1)).min(width);
        let y1 = (y0 + rng.random_range(height / 8..height / 2 + 1)).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    img[c * plane + y * width + x] = col[c];
                }
            }
        }
    }

    if rng.random_bool(0.6) {
        let freq = rng.random_range(2.0..9.0) * core::f64::consts::TAU;
        let phi: f64 = rng.random_range(0.0..core::f64::consts::TAU);
        let amp = rng.random_range(0.05..0.2);
        let (cb, sb) = (libm::cos(phi), libm::sin(phi));
        for y in 0..height {
            for x in 0..width {
                let s = libm::sin((x as f64 / w * cb + y as f64 / h * sb) * freq + phi) * amp;
                for c in 0..3 {
                    img[c * plane + y * width + x] += s * if c == 1 { 0.6 } else { 1.0 };
                }
            }
        }
    }

    for v in img.iter_mut() {
        *v = (*v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    UnitImage::new(height, width, img).expect("scene dimensions and range are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_varied() {
        let a = random_scene(3, 32, 32);
        assert_eq!(a, random_scene(3, 32, 32));
        let b = random_scene(4, 32, 32);
        let diff: f64 = a.planar().data.iter().zip(&b.planar().data).map(|(x, y)| (x - y).abs()).sum::<f64>()
            / a.planar().data.len() as f64;
        assert!(diff > 0.05);
    }
}
