//! SURF interest points: box-filtered Hessian determinants over integral
//! images, scale-space non-maximum suppression, and oriented 64-D
//! descriptors built from Haar wavelet responses.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalogram::Spectrogram;

pub const DESCRIPTOR_DIM: usize = 64;

/// Cumulative 2-D sum table with one guard row/column of zeros, so any
/// axis-aligned box sum costs four lookups.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    /// (width+1) x (height+1), exclusive prefix sums.
    table: Vec<f64>,
}

impl IntegralImage {
    pub fn new(img: &Spectrogram) -> Self {
        Self::from_values(img.height(), img.width(), |y, x| f64::from(img.at(y, x)))
    }

    pub fn from_values(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let stride = width + 1;
        let mut table = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row_sum = 0.0;
            for x in 0..width {
                row_sum += f(y, x);
                table[(y + 1) * stride + (x + 1)] = table[y * stride + (x + 1)] + row_sum;
            }
        }
        IntegralImage {
            width,
            height,
            table,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Sum over the inclusive pixel box [x0..=x1] x [y0..=y1].
    pub fn box_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        debug_assert!(x1 < self.width && y1 < self.height && x0 <= x1 && y0 <= y1);
        let s = self.width + 1;
        self.table[(y1 + 1) * s + (x1 + 1)] + self.table[y0 * s + x0]
            - self.table[y0 * s + (x1 + 1)]
            - self.table[(y1 + 1) * s + x0]
    }

    /// Box sum with coordinates clamped into the image; empty boxes are 0.
    pub fn box_sum_clamped(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> f64 {
        let x0 = x0.max(0) as usize;
        let y0 = y0.max(0) as usize;
        if x1 < x0 as i64 || y1 < y0 as i64 {
            return 0.0;
        }
        let x1 = (x1 as usize).min(self.width - 1);
        let y1 = (y1 as usize).min(self.height - 1);
        if x0 > x1 || y0 > y1 {
            return 0.0;
        }
        self.box_sum(x0, y0, x1, y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub response: f64,
    pub orientation: f64,
}

#[derive(Debug, Clone)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub keypoint: Keypoint,
    /// True when the window had no response; the raw vector was zero and
    /// normalization was skipped.
    pub zero_response: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurfConfig {
    pub hessian_threshold: f64,
    /// Area-overlap suppression ratio in (0, 1].
    pub nms_overlap: f64,
    /// None = one octave for small images, two when min(h, w) >= 300.
    pub octaves: Option<usize>,
}

impl Default for SurfConfig {
    fn default() -> Self {
        SurfConfig {
            hessian_threshold: 400.0,
            nms_overlap: 0.6,
            octaves: None,
        }
    }
}

impl SurfConfig {
    fn octaves_for(&self, height: usize, width: usize) -> usize {
        self.octaves
            .unwrap_or(if height.min(width) >= 300 { 2 } else { 1 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hessian_threshold > 0.0) {
            return Err(Error::Parameter("hessian threshold must be > 0".into()));
        }
        if !(self.nms_overlap > 0.0 && self.nms_overlap <= 1.0) {
            return Err(Error::Parameter("nms overlap must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Eq.-style determinant arithmetic with the 0.9 cross-term weight.
pub fn det_from_responses(lxx: f64, lyy: f64, lxy: f64) -> f64 {
    lxx * lyy - (0.9 * lxy) * (0.9 * lxy)
}

fn sigma_for_size(size: usize) -> f64 {
    1.2 * size as f64 / 9.0
}

/// Box-filter Hessian determinant at integer point (x, y) for a filter of
/// `size` pixels (odd multiple of 3). Responses are normalized by filter
/// area so thresholds are comparable across scales. None when the filter
/// does not fit inside the image.
pub fn det_at(ii: &IntegralImage, x: usize, y: usize, size: usize) -> Option<f64> {
    debug_assert!(size % 3 == 0 && size % 2 == 1);
    let border = (size - 1) / 2;
    if x < border || y < border || x + border >= ii.width() || y + border >= ii.height() {
        return None;
    }
    let lobe = size / 3;
    let (x, y, b, l) = (x as i64, y as i64, border as i64, lobe as i64);

    // Dyy: three stacked bands of height `lobe` (2*lobe-1 wide), the middle
    // one weighted -2, computed as whole - 3*middle.
    let half = (l - 1) / 2;
    let whole = ii.box_sum_clamped(x - (l - 1), y - b, x + (l - 1), y + b);
    let middle = ii.box_sum_clamped(x - (l - 1), y - half, x + (l - 1), y + half);
    let dyy = whole - 3.0 * middle;

    let whole_t = ii.box_sum_clamped(x - b, y - (l - 1), x + b, y + (l - 1));
    let middle_t = ii.box_sum_clamped(x - half, y - (l - 1), x + half, y + (l - 1));
    let dxx = whole_t - 3.0 * middle_t;

    // Dxy: four diagonal lobes of lobe x lobe.
    let dxy = ii.box_sum_clamped(x - l, y - l, x - 1, y - 1)
        + ii.box_sum_clamped(x + 1, y + 1, x + l, y + l)
        - ii.box_sum_clamped(x + 1, y - l, x + l, y - 1)
        - ii.box_sum_clamped(x - l, y + 1, x - 1, y + l);

    let inv_area = 1.0 / (size * size) as f64;
    Some(det_from_responses(dxx * inv_area, dyy * inv_area, dxy * inv_area))
}

/// Determinant of the box-approximated Hessian at detection scale `sigma`;
/// the nearest valid filter size on the SURF lattice is used.
pub fn hessian_det(ii: &IntegralImage, x: usize, y: usize, sigma: f64) -> Option<f64> {
    let raw = (9.0 * sigma / 1.2).round() as i64;
    // nearest odd multiple of 3, at least 9
    let mut best = 9i64;
    let mut best_d = (raw - 9).abs();
    let mut l = 15i64;
    while l <= raw + 6 {
        let d = (raw - l).abs();
        if d < best_d {
            best = l;
            best_d = d;
        }
        l += 6;
    }
    det_at(ii, x, y, best as usize)
}

fn octave_sizes(octave: usize) -> [usize; 4] {
    let step = 6 << octave;
    let start = step + 3;
    [start, start + step, start + 2 * step, start + 3 * step]
}

/// Interest points above `threshold`, locally maximal in a 3x3x3
/// scale-space neighborhood, with circle-overlap suppression (ratio
/// `nms`, strongest response kept; ties broken row-major then smaller
/// sigma).
pub fn detect(ii: &IntegralImage, cfg: &SurfConfig) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    let (w, h) = (ii.width(), ii.height());
    let mut candidates: Vec<Keypoint> = Vec::new();

    for octave in 0..cfg.octaves_for(h, w) {
        let sizes = octave_sizes(octave);
        let maps: Vec<Vec<f64>> = sizes
            .par_iter()
            .map(|&size| {
                let mut map = vec![f64::NEG_INFINITY; w * h];
                for y in 0..h {
                    for x in 0..w {
                        if let Some(d) = det_at(ii, x, y, size) {
                            map[y * w + x] = d;
                        }
                    }
                }
                map
            })
            .collect();

        for k in 1..3usize {
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    let v = maps[k][y * w + x];
                    if !v.is_finite() || v < cfg.hessian_threshold {
                        continue;
                    }
                    let mut is_max = true;
                    'nbr: for dk in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                if dk == 0 && dy == 0 && dx == 0 {
                                    continue;
                                }
                                let nk = (k as i64 + dk) as usize;
                                let ny = (y as i64 + dy) as usize;
                                let nx = (x as i64 + dx) as usize;
                                if maps[nk][ny * w + nx] >= v {
                                    is_max = false;
                                    break 'nbr;
                                }
                            }
                        }
                    }
                    if is_max {
                        candidates.push(Keypoint {
                            x: x as f64,
                            y: y as f64,
                            sigma: sigma_for_size(sizes[k]),
                            response: v,
                            orientation: 0.0,
                        });
                    }
                }
            }
        }
    }

    // Greedy overlap suppression, strongest first.
    candidates.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
            .then(a.x.partial_cmp(&b.x).unwrap())
            .then(a.sigma.partial_cmp(&b.sigma).unwrap())
    });
    let mut kept: Vec<Keypoint> = Vec::new();
    for cand in candidates {
        if kept
            .iter()
            .all(|k| circle_overlap_ratio(k, &cand) <= cfg.nms_overlap)
        {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Intersection area of the two detection circles (radius 2.5 sigma) over
/// the smaller circle area.
fn circle_overlap_ratio(a: &Keypoint, b: &Keypoint) -> f64 {
    let r1 = 2.5 * a.sigma;
    let r2 = 2.5 * b.sigma;
    let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    let lens = if d >= r1 + r2 {
        0.0
    } else if d <= (r1 - r2).abs() {
        std::f64::consts::PI * r1.min(r2).powi(2)
    } else {
        let alpha = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0);
        let beta = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0);
        let tri = 0.5
            * ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
                .max(0.0)
                .sqrt();
        r1 * r1 * alpha.acos() + r2 * r2 * beta.acos() - tri
    };
    lens / (std::f64::consts::PI * r1.min(r2).powi(2))
}

fn haar_x(ii: &IntegralImage, cx: i64, cy: i64, s: i64) -> f64 {
    ii.box_sum_clamped(cx, cy - s, cx + s - 1, cy + s - 1)
        - ii.box_sum_clamped(cx - s, cy - s, cx - 1, cy + s - 1)
}

fn haar_y(ii: &IntegralImage, cx: i64, cy: i64, s: i64) -> f64 {
    ii.box_sum_clamped(cx - s, cy, cx + s - 1, cy + s - 1)
        - ii.box_sum_clamped(cx - s, cy - s, cx + s - 1, cy - 1)
}

/// Dominant orientation: Haar responses on a 6-sigma disc, Gaussian
/// weighted, scanned with a sliding 60-degree sector; the sector with the
/// largest summed response vector wins.
pub fn orientation(ii: &IntegralImage, kp: &Keypoint) -> f64 {
    let s = kp.sigma.round().max(1.0) as i64;
    let mut responses: Vec<(f64, f64, f64)> = Vec::new(); // (angle, gx, gy)
    for j in -6i64..=6 {
        for i in -6i64..=6 {
            if i * i + j * j > 36 {
                continue;
            }
            let px = kp.x as i64 + i * s;
            let py = kp.y as i64 + j * s;
            let g = (-((i * i + j * j) as f64) / (2.0 * 2.5 * 2.5)).exp();
            let gx = g * haar_x(ii, px, py, 2 * s);
            let gy = g * haar_y(ii, px, py, 2 * s);
            if gx != 0.0 || gy != 0.0 {
                responses.push((gy.atan2(gx), gx, gy));
            }
        }
    }
    if responses.is_empty() {
        return 0.0;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let sector = std::f64::consts::PI / 3.0;
    let mut best = (0.0f64, 0.0f64, -1.0f64); // (sum_x, sum_y, norm^2)
    for w in 0..64 {
        let start = w as f64 * two_pi / 64.0 - std::f64::consts::PI;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(ang, gx, gy) in &responses {
            let mut d = ang - start;
            while d < 0.0 {
                d += two_pi;
            }
            while d >= two_pi {
                d -= two_pi;
            }
            if d < sector {
                sx += gx;
                sy += gy;
            }
        }
        let n = sx * sx + sy * sy;
        if n > best.2 {
            best = (sx, sy, n);
        }
    }
    best.1.atan2(best.0)
}

/// Oriented 64-D descriptor: a 20-sigma window split into 4x4 subregions,
/// each contributing [sum dx, sum dy, sum |dx|, sum |dy|] of rotated,
/// Gaussian-weighted Haar responses; L2-normalized.
pub fn describe(ii: &IntegralImage, kp: &Keypoint) -> Descriptor {
    let theta = orientation(ii, kp);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let s = kp.sigma;
    let hs = s.round().max(1.0) as i64;
    let mut values = vec![0.0; DESCRIPTOR_DIM];

    for sub_y in 0..4usize {
        for sub_x in 0..4usize {
            let base = (sub_y * 4 + sub_x) * 4;
            for v in 0..5usize {
                for u in 0..5usize {
                    let du = ((sub_x * 5 + u) as f64 - 10.0 + 0.5) * s;
                    let dv = ((sub_y * 5 + v) as f64 - 10.0 + 0.5) * s;
                    let px = (kp.x + du * cos_t - dv * sin_t).round() as i64;
                    let py = (kp.y + du * sin_t + dv * cos_t).round() as i64;
                    let hx = haar_x(ii, px, py, hs);
                    let hy = haar_y(ii, px, py, hs);
                    let rdx = cos_t * hx + sin_t * hy;
                    let rdy = -sin_t * hx + cos_t * hy;
                    let g = (-(du * du + dv * dv) / (2.0 * (3.3 * s) * (3.3 * s))).exp();
                    values[base] += g * rdx;
                    values[base + 1] += g * rdy;
                    values[base + 2] += g * rdx.abs();
                    values[base + 3] += g * rdy.abs();
                }
            }
        }
    }

    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Descriptor {
            values: vec![0.0; DESCRIPTOR_DIM],
            keypoint: Keypoint {
                orientation: theta,
                ..*kp
            },
            zero_response: true,
        };
    }
    for v in values.iter_mut() {
        *v /= norm;
    }
    Descriptor {
        values,
        keypoint: Keypoint {
            orientation: theta,
            ..*kp
        },
        zero_response: false,
    }
}

/// Detect-then-describe; keypoints whose descriptor collapsed to zero are
/// dropped.
pub fn extract_all(img: &Spectrogram, cfg: &SurfConfig) -> Result<Vec<Descriptor>> {
    let ii = IntegralImage::new(img);
    let kps = detect(&ii, cfg)?;
    Ok(kps
        .par_iter()
        .map(|kp| describe(&ii, kp))
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|d| !d.zero_response)
        .collect())
}

const DUMP_MAGIC: &[u8; 4] = b"SURF";

/// Binary descriptor dump: magic `SURF`, count u32, dim u32 (=64), then per
/// record x, y, sigma, orientation and 64 values, all little-endian f32.
pub fn write_descriptors(descriptors: &[Descriptor], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DUMP_MAGIC)?;
    f.write_all(&(descriptors.len() as u32).to_le_bytes())?;
    f.write_all(&(DESCRIPTOR_DIM as u32).to_le_bytes())?;
    for d in descriptors {
        for v in [
            d.keypoint.x,
            d.keypoint.y,
            d.keypoint.sigma,
            d.keypoint.orientation,
        ] {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
        for v in &d.values {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_descriptors(path: &Path) -> Result<Vec<Descriptor>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Data(format!("{}: bad descriptor magic", path.display())));
    }
    let count = read_u32(&mut f)? as usize;
    let dim = read_u32(&mut f)? as usize;
    if dim != DESCRIPTOR_DIM {
        return Err(Error::Data(format!("descriptor dim {dim} != {DESCRIPTOR_DIM}")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut head = [0.0f32; 4];
        let mut buf = [0u8; 4];
        for h in head.iter_mut() {
            f.read_exact(&mut buf)?;
            *h = f32::from_le_bytes(buf);
        }
        let mut values = vec![0.0f64; dim];
        for v in values.iter_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from(f32::from_le_bytes(buf));
        }
        out.push(Descriptor {
            values,
            keypoint: Keypoint {
                x: f64::from(head[0]),
                y: f64::from(head[1]),
                sigma: f64::from(head[2]),
                response: 0.0,
                orientation: f64::from(head[3]),
            },
            zero_response: false,
        });
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalogram::Spectrogram;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn image_from(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Spectrogram {
        let pixels: Vec<u8> = (0..height * width)
            .map(|i| f(i / width, i % width).round().clamp(0.0, 255.0) as u8)
            .collect();
        Spectrogram::from_pixels(height, width, pixels, "t", None).unwrap()
    }

    fn blob(cx: f64, cy: f64, sigma: f64, amp: f64) -> impl Fn(usize, usize) -> f64 {
        move |y, x| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        }
    }

    #[test]
    fn integral_of_ones_counts_pixels() {
        let img = image_from(3, 3, |_, _| 1.0);
        let ii = IntegralImage::new(&img);
        assert_eq!(ii.box_sum(0, 0, 2, 2), 9.0);
        assert_eq!(ii.box_sum(1, 1, 2, 2), 4.0);
    }

    #[test]
    fn integral_of_zero_image_is_zero() {
        let img = image_from(4, 5, |_, _| 0.0);
        let ii = IntegralImage::new(&img);
        assert_eq!(ii.box_sum(0, 0, 4, 3), 0.0);
    }

    #[test]
    fn random_box_sums_match_direct_summation_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pixels: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
        let img = Spectrogram::from_pixels(16, 16, pixels.clone(), "r", None).unwrap();
        let ii = IntegralImage::new(&img);
        for _ in 0..100 {
            let x0 = rng.gen_range(0..16);
            let x1 = rng.gen_range(x0..16);
            let y0 = rng.gen_range(0..16);
            let y1 = rng.gen_range(y0..16);
            let mut direct = 0.0;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    direct += f64::from(pixels[y * 16 + x]);
                }
            }
            assert_eq!(ii.box_sum(x0, y0, x1, y1), direct);
        }
    }

    #[test]
    fn determinant_arithmetic_fixture() {
        assert_eq!(det_from_responses(2.0, 2.0, 1.0), 4.0 - 0.81);
        assert!((det_from_responses(2.0, 2.0, 1.0) - 3.19).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_determinant_everywhere() {
        let img = image_from(32, 32, |_, _| 137.0);
        let ii = IntegralImage::new(&img);
        for y in 0..32 {
            for x in 0..32 {
                if let Some(d) = det_at(&ii, x, y, 9) {
                    assert_eq!(d, 0.0, "at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn determinant_is_invariant_to_constant_shift() {
        let base = image_from(32, 32, blob(16.0, 16.0, 3.0, 150.0));
        let shifted = image_from(32, 32, |y, x| blob(16.0, 16.0, 3.0, 150.0)(y, x) + 100.0);
        let ii_a = IntegralImage::new(&base);
        let ii_b = IntegralImage::new(&shifted);
        for y in 10..22 {
            for x in 10..22 {
                let a = det_at(&ii_a, x, y, 15).unwrap();
                let b = det_at(&ii_b, x, y, 15).unwrap();
                assert!((a - b).abs() < 1e-9, "({x},{y}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn blob_determinant_peaks_at_center() {
        // dense brute-force scan at the matched scale
        let img = image_from(48, 48, blob(24.0, 24.0, 2.0, 255.0));
        let ii = IntegralImage::new(&img);
        let mut best = (0usize, 0usize, f64::MIN);
        for y in 8..40 {
            for x in 8..40 {
                if let Some(d) = det_at(&ii, x, y, 15) {
                    if d > best.2 {
                        best = (x, y, d);
                    }
                }
            }
        }
        assert!(
            (best.0 as f64 - 24.0).abs() <= 2.0 && (best.1 as f64 - 24.0).abs() <= 2.0,
            "peak at ({}, {})",
            best.0,
            best.1
        );
    }

    #[test]
    fn constant_image_yields_no_keypoints() {
        let img = image_from(64, 64, |_, _| 200.0);
        let ii = IntegralImage::new(&img);
        let kps = detect(&ii, &SurfConfig::default()).unwrap();
        assert!(kps.is_empty());
    }

    #[test]
    fn nine_blob_grid_detects_nine_keypoints() {
        let img = image_from(96, 96, |y, x| {
            let mut v = 0.0;
            for by in 0..3 {
                for bx in 0..3 {
                    v += blob(16.0 + 32.0 * bx as f64, 16.0 + 32.0 * by as f64, 2.5, 255.0)(y, x);
                }
            }
            v
        });
        let ii = IntegralImage::new(&img);
        let kps = detect(&ii, &SurfConfig::default()).unwrap();
        assert_eq!(kps.len(), 9, "got {kps:?}");
        for by in 0..3 {
            for bx in 0..3 {
                let (cx, cy) = (16.0 + 32.0 * bx as f64, 16.0 + 32.0 * by as f64);
                assert!(
                    kps.iter()
                        .any(|k| (k.x - cx).abs() <= 2.0 && (k.y - cy).abs() <= 2.0),
                    "no keypoint near ({cx},{cy})"
                );
            }
        }
    }

    #[test]
    fn overlap_ratio_extremes() {
        let at = |x: f64, y: f64, sigma: f64| Keypoint {
            x,
            y,
            sigma,
            response: 1.0,
            orientation: 0.0,
        };
        assert!((circle_overlap_ratio(&at(10.0, 10.0, 2.0), &at(10.0, 10.0, 2.0)) - 1.0).abs() < 1e-12);
        assert_eq!(circle_overlap_ratio(&at(0.0, 0.0, 2.0), &at(100.0, 0.0, 2.0)), 0.0);
        // small circle fully inside a big one
        assert!((circle_overlap_ratio(&at(50.0, 50.0, 2.0), &at(51.0, 50.0, 8.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_detections_collapse_to_the_strongest() {
        // two nested blob structures: cross-octave duplicates at the same
        // spot whose detection circles overlap far above 0.6
        let img = image_from(96, 96, |y, x| {
            (blob(46.0, 48.0, 2.5, 255.0)(y, x) + blob(50.0, 48.0, 5.0, 200.0)(y, x)).min(255.0)
        });
        let ii = IntegralImage::new(&img);
        let keep_all = SurfConfig {
            hessian_threshold: 300.0,
            nms_overlap: 1.0,
            octaves: Some(2),
        };
        let raw = detect(&ii, &keep_all).unwrap();
        assert!(raw.len() >= 2, "want overlapping candidates, got {raw:?}");
        let strongest = raw
            .iter()
            .map(|k| k.response)
            .fold(f64::MIN, f64::max);

        let suppressed = detect(
            &ii,
            &SurfConfig {
                hessian_threshold: 300.0,
                nms_overlap: 0.6,
                octaves: Some(2),
            },
        )
        .unwrap();
        assert_eq!(suppressed.len(), 1, "got {suppressed:?}");
        assert_eq!(suppressed[0].response, strongest);
    }

    #[test]
    fn translation_moves_keypoint_with_the_blob() {
        let a = image_from(64, 64, blob(20.0, 24.0, 2.5, 255.0));
        let b = image_from(64, 64, blob(25.0, 27.0, 2.5, 255.0));
        let ka = detect(&IntegralImage::new(&a), &SurfConfig::default()).unwrap();
        let kb = detect(&IntegralImage::new(&b), &SurfConfig::default()).unwrap();
        assert!(!ka.is_empty() && !kb.is_empty());
        assert!((kb[0].x - ka[0].x - 5.0).abs() <= 1.0);
        assert!((kb[0].y - ka[0].y - 3.0).abs() <= 1.0);
    }

    #[test]
    fn constant_window_descriptor_is_flagged_zero() {
        let img = image_from(64, 64, |_, _| 99.0);
        let ii = IntegralImage::new(&img);
        let kp = Keypoint {
            x: 32.0,
            y: 32.0,
            sigma: 2.0,
            response: 1.0,
            orientation: 0.0,
        };
        let d = describe(&ii, &kp);
        assert!(d.zero_response);
        assert_eq!(d.values, vec![0.0; DESCRIPTOR_DIM]);
    }

    #[test]
    fn descriptors_have_dim_64_and_unit_norm() {
        let img = image_from(96, 96, |y, x| {
            blob(30.0, 40.0, 2.5, 200.0)(y, x) + blob(60.0, 50.0, 3.0, 255.0)(y, x)
        });
        let ds = extract_all(&img, &SurfConfig::default()).unwrap();
        assert!(!ds.is_empty());
        for d in &ds {
            assert_eq!(d.values.len(), 64);
            let norm: f64 = d.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn rotated_pattern_keeps_descriptor_by_orientation() {
        // an intensity ramp has one unambiguous gradient direction; the
        // 90-degree rotated ramp must produce the same oriented descriptor
        let a = image_from(64, 64, |_, x| 128.0 + 8.0 * (x as f64 - 32.0));
        let b = image_from(64, 64, |y, _| 128.0 + 8.0 * (y as f64 - 32.0));
        let kp = Keypoint {
            x: 32.0,
            y: 32.0,
            sigma: 2.0,
            response: 1.0,
            orientation: 0.0,
        };
        let da = describe(&IntegralImage::new(&a), &kp);
        let db = describe(&IntegralImage::new(&b), &kp);
        assert!(!da.zero_response && !db.zero_response);
        assert!((db.keypoint.orientation - da.keypoint.orientation).abs() > 1.0);
        let cos: f64 = da
            .values
            .iter()
            .zip(db.values.iter())
            .map(|(x, y)| x * y)
            .sum();
        assert!(cos > 0.9, "cosine similarity {cos}");
    }

    #[test]
    fn contrast_scaling_leaves_descriptor_unchanged() {
        let a = image_from(64, 64, blob(36.0, 30.0, 2.5, 60.0));
        let mut scaled = a.pixels.clone();
        for p in &mut scaled {
            *p *= 4; // exact: base pixels stay below 64
        }
        let b = Spectrogram::from_pixels(64, 64, scaled, "b", None).unwrap();
        let kp = Keypoint {
            x: 32.0,
            y: 32.0,
            sigma: 2.5,
            response: 1.0,
            orientation: 0.0,
        };
        let da = describe(&IntegralImage::new(&a), &kp);
        let db = describe(&IntegralImage::new(&b), &kp);
        for (x, y) in da.values.iter().zip(db.values.iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_image_extracts_nothing() {
        let img = image_from(48, 48, |_, _| 17.0);
        assert!(extract_all(&img, &SurfConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn descriptor_dump_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.surf");
        let img = image_from(96, 96, blob(48.0, 48.0, 2.5, 255.0));
        let ds = extract_all(&img, &SurfConfig::default()).unwrap();
        assert!(!ds.is_empty());
        write_descriptors(&ds, &path).unwrap();
        let back = read_descriptors(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.iter().zip(back.iter()) {
            assert_eq!(a.keypoint.x, b.keypoint.x);
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert!((x - y).abs() < 1e-6); // f32 storage
            }
        }
    }
}
