//! Restoration metrics, the local-context-matching localizer, and method
//! evaluation over a set of examples.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::domain::{composite, cut_paste, AffineTransform, BoxRegion, HoleSpec, ImageTensor, TrainingExample};
use crate::error::{shape, validation, Error, Result};
use crate::locnet::{align_guidance, LocNet};
use crate::scalar::Scalar;
use crate::synthnet::SynthNet;

/// Pixels the metrics average over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricRegion {
    #[default]
    Hole,
    Whole,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l1: f64,
    pub l2: f64,
    /// `+inf` when the images agree exactly.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
}

/// PSNR in dB for a `[0, 1]` dynamic range.
pub fn psnr_from_l2(l2: f64) -> f64 {
    if l2 == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(l2)
    }
}

/// Metrics over the hole, in `[0, 1]` storage units.
pub fn restoration_metrics(prediction: &ImageTensor, ground_truth: &ImageTensor, hole: &HoleSpec) -> Result<Metrics> {
    restoration_metrics_in(prediction, ground_truth, hole, MetricRegion::Hole)
}

pub fn restoration_metrics_in(
    prediction: &ImageTensor,
    ground_truth: &ImageTensor,
    hole: &HoleSpec,
    region: MetricRegion,
) -> Result<Metrics> {
    if !prediction.same_size(ground_truth) || hole.height() != ground_truth.height() || hole.width() != ground_truth.width()
    {
        return Err(shape("metrics: prediction, ground truth and hole sizes differ"));
    }
    if hole.area() == 0 {
        return Err(Error::DegenerateHole("metrics over an empty hole".to_string()));
    }
    let plane = ground_truth.height() * ground_truth.width();
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0usize);
    for c in 0..3 {
        for (p, &m) in hole.mask().iter().enumerate() {
            if region == MetricRegion::Hole && m == 0 {
                continue;
            }
            let a = (prediction.data()[c * plane + p] + 1.0) * 0.5;
            let b = (ground_truth.data()[c * plane + p] + 1.0) * 0.5;
            let d = a - b;
            s1 += d.abs();
            s2 += d * d;
            n += 1;
        }
    }
    let (l1, l2) = (s1 / n as f64, s2 / n as f64);
    Ok(Metrics { l1, l2, psnr: psnr_from_l2(l2) })
}

fn ser_db<Z: Serializer>(v: &f64, s: Z) -> core::result::Result<Z::Ok, Z::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
    }
}

const D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        libm::cbrt(t)
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D {
        t * t * t
    } else {
        3.0 * D * D * (t - 4.0 / 29.0)
    }
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        libm::pow((v + 0.055) / 1.055, 2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * libm::pow(v, 1.0 / 2.4) - 0.055
    }
}

/// sRGB in `[0, 1]` to CIE L*a*b* under D65.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / D65[0]), lab_f(y / D65[1]), lab_f(z / D65[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab`] (not clamped to the gamut).
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let (x, y, z) = (lab_f_inv(fx) * D65[0], lab_f_inv(fy) * D65[1], lab_f_inv(fz) * D65[2]);
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let b = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [r, g, b].map(linear_to_srgb)
}

/// Planar Lab image of a normalized RGB image.
pub fn lab_image(img: &ImageTensor) -> Vec<[f64; 3]> {
    let plane = img.height() * img.width();
    let d = img.data();
    (0..plane).map(|p| rgb_to_lab([0, 1, 2].map(|c| ((d[c * plane + p] + 1.0) * 0.5).clamp(0.0, 1.0)))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcmConfig {
    /// Ring width around the hole, pixels.
    pub context_width: usize,
    pub scales: Vec<f64>,
}

impl Default for LcmConfig {
    fn default() -> Self {
        Self { context_width: 8, scales: alloc::vec![0.75, 1.0, 1.25] }
    }
}

/// A candidate placement: guidance position `q = s (u - c) + c + d` for
/// image position `u`, with `c` the hole-box center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcmMatch {
    pub scale: f64,
    pub dx: i64,
    pub dy: i64,
    /// Sum of squared Lab differences over the context ring.
    pub score: f64,
    pub transform: AffineTransform,
}

/// Ordering of equal-score candidates: smaller `|d|^2`, then scale closer to
/// 1, then row-major `(dy, dx)`, then scale-list order.
pub fn lcm_tie_key(dx: i64, dy: i64, scale: f64, scale_index: usize) -> (i64, f64, i64, i64, usize) {
    (dx * dx + dy * dy, (scale - 1.0).abs(), dy, dx, scale_index)
}

fn key_less(a: (f64, (i64, f64, i64, i64, usize)), b: (f64, (i64, f64, i64, i64, usize))) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1.partial_cmp(&b.1) == Some(core::cmp::Ordering::Less))
}

/// Context-ring pixels: the hole box dilated by `width` (clipped) minus the hole.
pub fn context_ring(hole: &HoleSpec, width: usize) -> (BoxRegion, Vec<(usize, usize)>) {
    let outer = hole.bbox().dilate_clipped(width, hole.width(), hole.height());
    let mut ring = Vec::new();
    for y in outer.y0..outer.y1 {
        for x in outer.x0..outer.x1 {
            if !hole.contains(x, y) {
                ring.push((x, y));
            }
        }
    }
    (outer, ring)
}

fn sample_lab(lab: &[[f64; 3]], w: usize, h: usize, x: f64, y: f64) -> [f64; 3] {
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (libm::floor(fx), libm::floor(fy));
    let (wx, wy) = (fx - x0, fy - y0);
    let at = |xi: i64, yi: i64| -> [f64; 3] {
        let xi = xi.clamp(0, w as i64 - 1) as usize;
        let yi = yi.clamp(0, h as i64 - 1) as usize;
        lab[yi * w + xi]
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let (a, b, c, d) = (at(xi, yi), at(xi + 1, yi), at(xi, yi + 1), at(xi + 1, yi + 1));
    core::array::from_fn(|k| {
        a[k] * (1.0 - wx) * (1.0 - wy) + b[k] * wx * (1.0 - wy) + c[k] * (1.0 - wx) * wy + d[k] * wx * wy
    })
}

/// Exhaustive search over integer translations and `scales` of the
/// placement minimizing the Lab SSD between the incomplete image's context
/// ring and the guidance under the placement. Only placements that keep
/// the whole dilated hole box inside the guidance frame are considered.
pub fn local_context_matching(
    incomplete: &ImageTensor,
    guidance: &ImageTensor,
    hole: &HoleSpec,
    context_width: usize,
    scales: &[f64],
) -> Result<LcmMatch> {
    if hole.height() != incomplete.height() || hole.width() != incomplete.width() {
        return Err(shape("lcm: hole and incomplete image sizes differ"));
    }
    if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(validation(format!("lcm scales {scales:?} must be positive")));
    }
    let (outer, ring) = context_ring(hole, context_width);
    if ring.is_empty() {
        return Err(validation("lcm: context ring is empty"));
    }
    let src = lab_image(incomplete);
    let glab = lab_image(guidance);
    let (gw, gh) = (guidance.width(), guidance.height());
    let (cx, cy) = hole.bbox().center();
    let iw = incomplete.width();
    let mut best: Option<((f64, (i64, f64, i64, i64, usize)), LcmMatch)> = None;
    for (si, &s) in scales.iter().enumerate() {
        // Range of d keeping the mapped outer box inside [0, gw] x [0, gh].
        let lo_x = libm::ceil(-(s * (outer.x0 as f64 - cx) + cx)) as i64;
        let hi_x = libm::floor(gw as f64 - (s * (outer.x1 as f64 - cx) + cx)) as i64;
        let lo_y = libm::ceil(-(s * (outer.y0 as f64 - cy) + cy)) as i64;
        let hi_y = libm::floor(gh as f64 - (s * (outer.y1 as f64 - cy) + cy)) as i64;
        for dy in lo_y..=hi_y {
            for dx in lo_x..=hi_x {
                let mut score = 0.0;
                for &(x, y) in &ring {
                    let qx = s * (x as f64 + 0.5 - cx) + cx + dx as f64;
                    let qy = s * (y as f64 + 0.5 - cy) + cy + dy as f64;
                    let g = sample_lab(&glab, gw, gh, qx, qy);
                    let a = src[y * iw + x];
                    score += (0..3).map(|k| (a[k] - g[k]) * (a[k] - g[k])).sum::<f64>();
                }
                let key = (score, lcm_tie_key(dx, dy, s, si));
                if best.as_ref().is_none_or(|(k, _)| key_less(key, *k)) {
                    let offset = (cx + dx as f64 - s * cx, cy + dy as f64 - s * cy);
                    let transform = AffineTransform::from_pixel_map(s, offset, iw, incomplete.height());
                    best = Some((key, LcmMatch { scale: s, dx, dy, score, transform }));
                }
            }
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| Error::EmptySearch("guidance too small for the hole and its context at every scale".into()))
}

/// Fills a hole from aligned guidance.
pub trait HoleFiller {
    fn fill(&self, incomplete: &ImageTensor, aligned: &ImageTensor, hole: &HoleSpec) -> Result<ImageTensor>;
}

impl<S: Scalar> HoleFiller for SynthNet<S> {
    fn fill(&self, incomplete: &ImageTensor, aligned: &ImageTensor, hole: &HoleSpec) -> Result<ImageTensor> {
        SynthNet::fill(self, incomplete, aligned, hole)
    }
}

/// Pastes the aligned guidance into the hole unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct PasteFiller;

impl HoleFiller for PasteFiller {
    fn fill(&self, incomplete: &ImageTensor, aligned: &ImageTensor, hole: &HoleSpec) -> Result<ImageTensor> {
        composite(aligned, incomplete, hole)
    }
}

/// Align the guidance by `transform`, then fill.
pub fn inpaint<F: HoleFiller + ?Sized>(
    incomplete: &ImageTensor,
    guidance: &ImageTensor,
    hole: &HoleSpec,
    transform: &AffineTransform,
    filler: &F,
) -> Result<ImageTensor> {
    let aligned = align_guidance(guidance, transform, incomplete.height(), incomplete.width());
    filler.fill(incomplete, &aligned, hole)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Learned localization, learned synthesis.
    #[serde(rename = "ours")]
    Ours,
    /// Ground-truth alignment, guidance pasted unchanged.
    #[serde(rename = "cut_paste")]
    CutPaste,
    /// Local context matching, learned synthesis.
    #[serde(rename = "lcm+ours")]
    LcmOurs,
    /// Ground-truth alignment, learned synthesis.
    #[serde(rename = "gt-align+ours")]
    GtAlignOurs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ours, Method::CutPaste, Method::LcmOurs, Method::GtAlignOurs];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::CutPaste => "cut_paste",
            Method::LcmOurs => "lcm+ours",
            Method::GtAlignOurs => "gt-align+ours",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| validation(format!("unknown method {s:?}; expected ours, cut_paste, lcm+ours or gt-align+ours")))
    }

    pub fn needs_localizer(&self) -> bool {
        matches!(self, Method::Ours)
    }

    pub fn needs_synthesizer(&self) -> bool {
        !matches!(self, Method::CutPaste)
    }
}

/// Networks and settings an evaluation may use.
pub struct Models<'a, S: Scalar> {
    pub localizer: Option<&'a LocNet<S>>,
    pub filler: Option<&'a dyn HoleFiller>,
    pub lcm: LcmConfig,
    pub region: MetricRegion,
}

impl<S: Scalar> Default for Models<'_, S> {
    fn default() -> Self {
        Self { localizer: None, filler: None, lcm: LcmConfig::default(), region: MetricRegion::Hole }
    }
}

/// Output of `method` on one example.
pub fn run_method<S: Scalar>(example: &TrainingExample, method: Method, models: &Models<'_, S>) -> Result<ImageTensor> {
    let missing = |what: &str| Error::Validation(format!("method {} needs a {what}", method.label()));
    let filler = || models.filler.ok_or_else(|| missing("synthesis network"));
    let (inc, guide, hole) = (&example.incomplete, &example.guidance, &example.hole);
    match method {
        Method::CutPaste => cut_paste(inc, guide, hole, &example.gt_transform),
        Method::GtAlignOurs => inpaint(inc, guide, hole, &example.gt_transform, filler()?),
        Method::Ours => {
            let net = models.localizer.ok_or_else(|| missing("localization network"))?;
            let t = net.predict_transform(inc, guide, hole)?;
            inpaint(inc, guide, hole, &t, filler()?)
        }
        Method::LcmOurs => {
            let m = local_context_matching(inc, guide, hole, models.lcm.context_width, &models.lcm.scales)?;
            inpaint(inc, guide, hole, &m.transform, filler()?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub method: Method,
    pub config_hash: String,
    pub region: MetricRegion,
    pub examples: Vec<ExampleMetrics>,
    pub mean: Metrics,
}

impl RestorationReport {
    /// Per-example rows plus their arithmetic means.
    pub fn from_rows(method: Method, config_hash: String, region: MetricRegion, rows: Vec<ExampleMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(validation("report over zero examples"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let mean = Metrics { l1: mean(|m| m.l1), l2: mean(|m| m.l2), psnr: mean(|m| m.psnr) };
        Ok(Self { method, config_hash, region, examples: rows, mean })
    }
}

/// Runs `method` on every example and aggregates the metrics.
pub fn evaluate_method<S: Scalar>(
    examples: &[(String, TrainingExample)],
    method: Method,
    models: &Models<'_, S>,
    config_hash: &str,
) -> Result<RestorationReport> {
    let mut rows = Vec::with_capacity(examples.len());
    for (id, ex) in examples {
        let out = run_method(ex, method, models)?;
        let metrics = restoration_metrics_in(&out, &ex.ground_truth, &ex.hole, models.region)?;
        rows.push(ExampleMetrics { id: id.clone(), metrics });
    }
    RestorationReport::from_rows(method, config_hash.to_string(), models.region, rows)
}

/// Boxed filler for callers that pick the synthesizer at run time.
pub type DynFiller = Box<dyn HoleFiller>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_offset_metrics() {
        let gt = ImageTensor::filled(8, 8, [-0.5, 0.0, 0.25]).unwrap();
        let hole = HoleSpec::rect(BoxRegion::new(2, 2, 6, 6), 8, 8).unwrap();
        let mut d = gt.data().to_vec();
        let plane = 64;
        for c in 0..3 {
            for p in 0..plane {
                if hole.mask()[p] != 0 {
                    d[c * plane + p] += 0.2;
                }
            }
        }
        let pred = ImageTensor::new(8, 8, d).unwrap();
        let m = restoration_metrics(&pred, &gt, &hole).unwrap();
        assert!((m.l1 - 0.1).abs() < 1e-12 && (m.l2 - 0.01).abs() < 1e-12 && (m.psnr - 20.0).abs() < 1e-9);
        let same = restoration_metrics(&gt, &gt, &hole).unwrap();
        assert_eq!((same.l1, same.l2), (0.0, 0.0));
        assert!(same.psnr.is_infinite());
    }

    #[test]
    fn lab_reference_colors() {
        let white = rgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert!(rgb_to_lab([0.0, 0.0, 0.0])[0].abs() < 1e-9);
        let rt = lab_to_rgb(rgb_to_lab([0.2, 0.6, 0.9]));
        assert!(rt.iter().zip([0.2, 0.6, 0.9]).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn methods_round_trip_labels() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.label()).unwrap(), m);
        }
        assert!(Method::parse("magic").is_err());
    }
}
