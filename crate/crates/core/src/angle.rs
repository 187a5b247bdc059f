//! Reference-relative orientation of a detected part.
//!
//! The estimator binarizes a crop, takes the principal axis from second-order
//! central moments and resolves the 180° ambiguity with the third moment along
//! that axis. The result is reported relative to a calibrated reference pose,
//! which by definition sits at 0°.
//!
//! Angles are counterclockwise as seen on screen (image rows grow downward, so
//! moments are taken with the vertical axis flipped).

use std::io::Cursor;

use base64::Engine as _;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{canonicalize_angle, circ_diff, ModelError, ObjAngle, TimeMs};

pub const DEFAULT_BIN_THRESHOLD: f64 = 0.5;
/// Minimum mask size for a usable reference or observation.
pub const MIN_MASK_PIXELS: usize = 16;
/// Both |mu20 - mu02| and |mu11| below this fraction of the mask mass means
/// the shape has no preferred axis.
pub const ISOTROPY_EPS: f64 = 1e-3;
/// Anisotropy at which confidence saturates at 1.
const ANISOTROPY_SATURATION: f64 = 0.5;
/// Normalized skew below which the axis direction is not flipped.
const SKEW_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AngleError {
    #[error("invalid angle: {0} is not finite")]
    InvalidAngle(f64),
    #[error("mask has {0} pixels, fewer than the required {MIN_MASK_PIXELS}")]
    EmptyMask(usize),
    #[error("mask is isotropic; orientation is ambiguous")]
    AmbiguousOrientation,
    #[error("grid: {0}")]
    Grid(String),
    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
    #[error("descriptor: {0}")]
    Descriptor(String),
}

impl From<ModelError> for AngleError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidAngle(v) => AngleError::InvalidAngle(v),
            other => AngleError::Grid(other.to_string()),
        }
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, AngleError> {
        if data.len() != width * height {
            return Err(AngleError::Grid(format!(
                "{} values for a {}x{} grid",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(AngleError::Grid(format!("intensity {v} outside [0,1]")));
        }
        Ok(GrayGrid { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        GrayGrid {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn binarize(&self, threshold: f64) -> BitMask {
        let mut m = BitMask::new(self.width, self.height);
        for (i, v) in self.data.iter().enumerate() {
            if *v >= threshold {
                m.set_index(i);
            }
        }
        m
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, AngleError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
        GrayGrid::new(w as usize, h as usize, data)
    }

    /// Binary (P5) 8-bit PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let raw: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let mut out = Cursor::new(Vec::new());
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&raw, self.width as u32, self.height as u32, ExtendedColorType::L8)
            .expect("in-memory PGM encode");
        out.into_inner()
    }
}

/// Packed binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Self {
        BitMask {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn set_index(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.set_index(y * self.width + x);
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).filter(move |&x| self.get(x, y)).map(move |x| (x, y)))
    }

    pub fn to_grid(&self) -> GrayGrid {
        let mut g = GrayGrid::zeros(self.width, self.height);
        for (x, y) in self.iter_set() {
            g.set(x, y, 1.0);
        }
        g
    }

    /// Row-major bitstream, most significant bit first, rows not padded; the
    /// final byte is zero-filled.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = vec![0u8; n.div_ceil(8)];
        for i in 0..n {
            if self.words[i / 64] >> (i % 64) & 1 == 1 {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn from_packed_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, AngleError> {
        let n = width * height;
        if bytes.len() != n.div_ceil(8) {
            return Err(AngleError::Descriptor(format!(
                "{} mask bytes for a {}x{} mask",
                bytes.len(),
                width,
                height
            )));
        }
        let mut m = BitMask::new(width, height);
        for i in 0..n {
            if bytes[i / 8] & (0x80 >> (i % 8)) != 0 {
                m.set_index(i);
            }
        }
        Ok(m)
    }
}

/// Rotates `img` counterclockwise by `theta_deg` about the grid center using
/// bilinear interpolation. Samples falling outside the grid read as 0.
pub fn rotate_grid(img: &GrayGrid, theta_deg: f64) -> Result<GrayGrid, AngleError> {
    let canonical = canonicalize_angle(theta_deg)?;
    if canonical == 0.0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width, img.height);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = theta_deg.to_radians().sin_cos();
    let mut out = GrayGrid::zeros(w, h);
    let sample = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            img.data[yi as usize * w + xi as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            // vertical axis flipped so positive angles turn counterclockwise on screen
            let u = x as f64 - cx;
            let v = cy - y as f64;
            let us = u * c + v * s;
            let vs = -u * s + v * c;
            let xs = cx + us;
            let ys = cy - vs;
            let x0 = xs.floor();
            let y0 = ys.floor();
            let fx = xs - x0;
            let fy = ys - y0;
            let (xi, yi) = (x0 as i64, y0 as i64);
            let val = sample(xi, yi) * (1.0 - fx) * (1.0 - fy)
                + sample(xi + 1, yi) * fx * (1.0 - fy)
                + sample(xi, yi + 1) * (1.0 - fx) * fy
                + sample(xi + 1, yi + 1) * fx * fy;
            out.data[y * w + x] = val.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Second- and third-order shape statistics of a binary mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskMoments {
    pub mass: f64,
    pub centroid: (f64, f64),
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
}

impl MaskMoments {
    pub fn of(mask: &BitMask) -> Result<Self, AngleError> {
        let n = mask.count();
        if n < MIN_MASK_PIXELS {
            return Err(AngleError::EmptyMask(n));
        }
        let mass = n as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in mask.iter_set() {
            sx += x as f64;
            sy += y as f64;
        }
        let centroid = (sx / mass, sy / mass);
        let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
        for (x, y) in mask.iter_set() {
            let u = x as f64 - centroid.0;
            let v = centroid.1 - y as f64;
            mu20 += u * u;
            mu02 += v * v;
            mu11 += u * v;
        }
        Ok(MaskMoments {
            mass,
            centroid,
            mu20,
            mu02,
            mu11,
        })
    }

    pub fn is_isotropic(&self) -> bool {
        let eps = ISOTROPY_EPS * self.mass;
        (self.mu20 - self.mu02).abs() < eps && self.mu11.abs() < eps
    }

    /// Eccentricity of the second-moment ellipse in `[0, 1]`.
    pub fn anisotropy(&self) -> f64 {
        let spread = self.mu20 + self.mu02;
        if spread <= 0.0 {
            return 0.0;
        }
        ((self.mu20 - self.mu02).powi(2) + 4.0 * self.mu11 * self.mu11).sqrt() / spread
    }

    /// Principal-axis angle in `(-90, 90]` degrees, before direction
    /// disambiguation.
    pub fn axis_deg(&self) -> f64 {
        0.5 * (2.0 * self.mu11).atan2(self.mu20 - self.mu02).to_degrees()
    }
}

/// Oriented principal axis: the axis direction is chosen so the third moment
/// along it is non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    pub theta_deg: f64,
    /// Sign of the third moment along the raw axis.
    pub skew_sign: i8,
    pub anisotropy: f64,
}

pub fn orientation(mask: &BitMask) -> Result<Orientation, AngleError> {
    let m = MaskMoments::of(mask)?;
    if m.is_isotropic() {
        return Err(AngleError::AmbiguousOrientation);
    }
    let axis = m.axis_deg();
    let (s, c) = axis.to_radians().sin_cos();
    let mut m3 = 0.0;
    for (x, y) in mask.iter_set() {
        let u = x as f64 - m.centroid.0;
        let v = m.centroid.1 - y as f64;
        let p = u * c + v * s;
        m3 += p * p * p;
    }
    let sigma = ((m.mu20 + m.mu02) / m.mass).sqrt();
    let skew = m3 / (m.mass * sigma.powi(3));
    let flip = skew < -SKEW_EPS;
    let theta = if flip { axis + 180.0 } else { axis };
    Ok(Orientation {
        theta_deg: canonicalize_angle(theta)?,
        skew_sign: if m3 < 0.0 { -1 } else { 1 },
        anisotropy: m.anisotropy(),
    })
}

/// The calibrated 0° pose of a part.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDescriptor {
    pub theta_ref_deg: f64,
    pub skew_sign: i8,
    pub mask: BitMask,
    pub source: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorFile {
    theta_ref_deg: f64,
    skew_sign: i8,
    mask: MaskFile,
    meta: MetaFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    width: usize,
    height: usize,
    bits: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    source: String,
}

impl ReferenceDescriptor {
    pub fn to_json(&self) -> String {
        let file = DescriptorFile {
            theta_ref_deg: self.theta_ref_deg,
            skew_sign: self.skew_sign,
            mask: MaskFile {
                width: self.mask.width,
                height: self.mask.height,
                bits: base64::engine::general_purpose::STANDARD.encode(self.mask.to_packed_bytes()),
            },
            meta: MetaFile {
                source: self.source.clone(),
            },
        };
        serde_json::to_string_pretty(&file).expect("descriptor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AngleError> {
        let f: DescriptorFile = serde_json::from_str(text).map_err(|e| AngleError::Descriptor(e.to_string()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&f.mask.bits)
            .map_err(|e| AngleError::Descriptor(e.to_string()))?;
        let mask = BitMask::from_packed_bytes(f.mask.width, f.mask.height, &bytes)?;
        if canonicalize_angle(f.theta_ref_deg).ok() != Some(f.theta_ref_deg) {
            return Err(AngleError::Descriptor(format!("theta_ref_deg {} outside [0,360)", f.theta_ref_deg)));
        }
        if f.skew_sign != 1 && f.skew_sign != -1 {
            return Err(AngleError::Descriptor("skew_sign must be +1 or -1".into()));
        }
        Ok(ReferenceDescriptor {
            theta_ref_deg: f.theta_ref_deg,
            skew_sign: f.skew_sign,
            mask,
            source: f.meta.source,
        })
    }
}

/// Calibrates the 0° pose from an image of the part in its reference
/// placement.
pub fn make_reference(img: &GrayGrid, bin_threshold: f64, source: &str) -> Result<ReferenceDescriptor, AngleError> {
    let mask = img.binarize(bin_threshold);
    let o = orientation(&mask)?;
    Ok(ReferenceDescriptor {
        theta_ref_deg: o.theta_deg,
        skew_sign: o.skew_sign,
        mask,
        source: source.to_string(),
    })
}

/// Orientation of the part in `img` relative to the reference pose.
pub fn estimate_angle(img: &GrayGrid, reference: &ReferenceDescriptor, bin_threshold: f64) -> Result<ObjAngle, AngleError> {
    estimate_angle_at(img, reference, bin_threshold, 0)
}

pub fn estimate_angle_at(
    img: &GrayGrid,
    reference: &ReferenceDescriptor,
    bin_threshold: f64,
    t_ms: TimeMs,
) -> Result<ObjAngle, AngleError> {
    let o = orientation(&img.binarize(bin_threshold))?;
    let degrees = canonicalize_angle(o.theta_deg - reference.theta_ref_deg)?;
    Ok(ObjAngle {
        t_ms,
        degrees,
        conf: (o.anisotropy / ANISOTROPY_SATURATION).clamp(0.0, 1.0),
    })
}

/// Pluggable orientation regressor. A learned model trained on
/// [`gen_rotated_sample`] output can sit behind the same interface.
pub trait AngleEstimator {
    fn estimate(&self, img: &GrayGrid, t_ms: TimeMs) -> Result<ObjAngle, AngleError>;
}

/// The analytic moment estimator bound to one reference pose.
#[derive(Debug, Clone)]
pub struct MomentEstimator {
    pub reference: ReferenceDescriptor,
    pub bin_threshold: f64,
}

impl AngleEstimator for MomentEstimator {
    fn estimate(&self, img: &GrayGrid, t_ms: TimeMs) -> Result<ObjAngle, AngleError> {
        estimate_angle_at(img, &self.reference, self.bin_threshold, t_ms)
    }
}

/// A training pair: rotated image and the rotation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedSample {
    pub image: GrayGrid,
    pub label_deg: f64,
}

/// Rotates `img` by an angle drawn uniformly from `[0, 360)`.
pub fn gen_rotated_sample<R: Rng + ?Sized>(img: &GrayGrid, rng: &mut R) -> RotatedSample {
    let label_deg = rng.random_range(0.0..360.0);
    let image = rotate_grid(img, label_deg).expect("finite label");
    RotatedSample { image, label_deg }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Plain |x - y|, blind to wraparound.
    Literal,
    /// Shortest angular distance.
    Circular,
}

pub fn angle_loss(x: f64, y: f64, mode: LossMode) -> Result<f64, AngleError> {
    if !x.is_finite() {
        return Err(AngleError::InvalidAngle(x));
    }
    if !y.is_finite() {
        return Err(AngleError::InvalidAngle(y));
    }
    Ok(match mode {
        LossMode::Literal => (x - y).abs(),
        LossMode::Circular => circ_diff(x, y)?,
    })
}

/// Exhaustive-search orientation oracle: the integer angle in `0..360` whose
/// nearest-neighbour rotation of the reference mask best overlaps the
/// observation (intersection over union, centroids aligned). Ties go to the
/// smaller angle.
pub fn oracle_angle(img: &GrayGrid, reference: &ReferenceDescriptor) -> Result<u32, AngleError> {
    oracle_angle_with(img, reference, DEFAULT_BIN_THRESHOLD)
}

pub fn oracle_angle_with(img: &GrayGrid, reference: &ReferenceDescriptor, bin_threshold: f64) -> Result<u32, AngleError> {
    let obs = img.binarize(bin_threshold);
    let obs_m = MaskMoments::of(&obs)?;
    let ref_m = MaskMoments::of(&reference.mask)?;
    let (rcx, rcy) = ref_m.centroid;
    let (ocx, ocy) = obs_m.centroid;
    let radius = reference
        .mask
        .iter_set()
        .map(|(x, y)| ((x as f64 - rcx).powi(2) + (y as f64 - rcy).powi(2)).sqrt())
        .fold(0.0, f64::max)
        + 2.0;
    let x_lo = (ocx - radius).floor().max(0.0) as usize;
    let y_lo = (ocy - radius).floor().max(0.0) as usize;
    let x_hi = ((ocx + radius).ceil() as usize).min(obs.width() - 1);
    let y_hi = ((ocy + radius).ceil() as usize).min(obs.height() - 1);
    let obs_count = obs.count();
    let (rw, rh) = (reference.mask.width() as i64, reference.mask.height() as i64);

    let mut best = (0u32, -1.0f64);
    for theta in 0..360u32 {
        let (s, c) = f64::from(theta).to_radians().sin_cos();
        let mut inter = 0usize;
        let mut rotated = 0usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let u = x as f64 - ocx;
                let v = ocy - y as f64;
                let us = u * c + v * s;
                let vs = -u * s + v * c;
                let xs = (rcx + us).round() as i64;
                let ys = (rcy - vs).round() as i64;
                if xs < 0 || ys < 0 || xs >= rw || ys >= rh {
                    continue;
                }
                if reference.mask.get(xs as usize, ys as usize) {
                    rotated += 1;
                    if obs.get(x, y) {
                        inter += 1;
                    }
                }
            }
        }
        let union = rotated + obs_count - inter;
        let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if iou > best.1 {
            best = (theta, iou);
        }
    }
    Ok(best.0)
}

/// Synthetic fixtures with known geometry.
pub mod fixtures {
    use super::GrayGrid;

    /// An actuator-arm silhouette: a long beam with a round pivot hub at one
    /// end and a small head at the other. Asymmetric under 180° rotation.
    pub fn arm_image(size: usize) -> GrayGrid {
        let s = size as f64;
        let (cx, cy) = ((s - 1.0) / 2.0, (s - 1.0) / 2.0);
        let mut g = GrayGrid::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                // coordinates in units of the grid size, vertical axis up
                let u = (x as f64 - cx) / s;
                let v = (cy - y as f64) / s;
                let beam = (-0.30..=0.33).contains(&u) && v.abs() <= 0.035;
                let hub = (u + 0.22).powi(2) + v.powi(2) <= 0.11f64.powi(2);
                let head = (0.24..=0.33).contains(&u) && (-0.035..=0.075).contains(&v);
                if beam || hub || head {
                    g.set(x, y, 1.0);
                }
            }
        }
        g
    }

    /// Filled disk centred on the grid.
    pub fn disk_image(size: usize, radius_frac: f64) -> GrayGrid {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let r = radius_frac * s;
        let mut g = GrayGrid::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                if (x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= r * r {
                    g.set(x, y, 1.0);
                }
            }
        }
        g
    }

    /// Horizontal bar centred on the grid.
    pub fn bar_image(size: usize) -> GrayGrid {
        let mut g = GrayGrid::zeros(size, size);
        let (x0, x1) = (size / 5, size - size / 5);
        let (y0, y1) = (size / 2 - size / 16, size / 2 + size / 16);
        for y in y0..y1 {
            for x in x0..x1 {
                g.set(x, y, 1.0);
            }
        }
        g
    }

    /// An L-shaped plate.
    pub fn l_image(size: usize) -> GrayGrid {
        let mut g = GrayGrid::zeros(size, size);
        let a = size / 4;
        let b = size - size / 4;
        let t = size / 8;
        for y in a..b {
            for x in a..b {
                let in_stem = x < a + t;
                let in_foot = y >= b - t;
                if in_stem || in_foot {
                    g.set(x, y, 1.0);
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SIZE: usize = 96;

    #[test]
    fn zero_rotation_is_bit_identical() {
        let img = arm_image(SIZE);
        assert_eq!(rotate_grid(&img, 0.0).unwrap(), img);
        assert_eq!(rotate_grid(&img, 720.0).unwrap(), img);
        assert!(matches!(rotate_grid(&img, f64::NAN), Err(AngleError::InvalidAngle(_))));
    }

    #[test]
    fn quarter_turn_round_trip() {
        let img = arm_image(SIZE);
        let back = rotate_grid(&rotate_grid(&img, 90.0).unwrap(), -90.0).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-6, "max error {max_err}");
    }

    #[test]
    fn quarter_turn_is_counterclockwise_on_screen() {
        // a single bright pixel right of centre must move above centre
        let mut g = GrayGrid::zeros(9, 9);
        g.set(7, 4, 1.0);
        let r = rotate_grid(&g, 90.0).unwrap();
        assert!((r.get(4, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disk_mass_is_preserved_under_rotation() {
        let disk = disk_image(SIZE, 0.3);
        let total: f64 = disk.data().iter().sum();
        for theta in [7.0, 33.3, 45.0, 90.0, 151.0, 222.2, 300.0] {
            let r: f64 = rotate_grid(&disk, theta).unwrap().data().iter().sum();
            assert!((r - total).abs() / total < 0.01, "theta {theta}: {r} vs {total}");
        }
    }

    #[test]
    fn bar_reference_is_zero_and_disk_is_ambiguous() {
        let r = make_reference(&bar_image(SIZE), 0.5, "bar").unwrap();
        assert_eq!(r.theta_ref_deg, 0.0);
        assert!(matches!(
            make_reference(&disk_image(SIZE, 0.3), 0.5, "disk"),
            Err(AngleError::AmbiguousOrientation)
        ));
        assert!(matches!(
            make_reference(&GrayGrid::zeros(SIZE, SIZE), 0.5, "blank"),
            Err(AngleError::EmptyMask(0))
        ));
    }

    #[test]
    fn l_shape_reference_matches_brute_force_axis() {
        // Oracle: the axis maximising the second moment, found by scanning
        // integer angles directly, independent of the closed-form atan2.
        let img = l_image(SIZE);
        let mask = img.binarize(0.5);
        let m = MaskMoments::of(&mask).unwrap();
        let spread = |deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            mask.iter_set()
                .map(|(x, y)| {
                    let u = x as f64 - m.centroid.0;
                    let v = m.centroid.1 - y as f64;
                    (u * c + v * s).powi(2)
                })
                .sum::<f64>()
        };
        let best_axis = (0..180).max_by(|a, b| spread(*a as f64).total_cmp(&spread(*b as f64))).unwrap() as f64;
        let r = make_reference(&img, 0.5, "L").unwrap();
        let err = circ_diff(r.theta_ref_deg, best_axis).unwrap().min(circ_diff(r.theta_ref_deg, best_axis + 180.0).unwrap());
        assert!(err <= 1.0, "theta_ref {} vs oracle axis {best_axis}", r.theta_ref_deg);
    }

    #[test]
    fn reference_image_reads_zero() {
        let img = arm_image(SIZE);
        let r = make_reference(&img, 0.5, "arm").unwrap();
        let a = estimate_angle(&img, &r, 0.5).unwrap();
        assert!(circ_diff(a.degrees, 0.0).unwrap() <= 0.5);
        assert!(a.conf > 0.9);
        assert_eq!(oracle_angle(&img, &r).unwrap(), 0);
    }

    #[test]
    fn rotated_reference_reads_applied_angle() {
        let img = arm_image(SIZE);
        let r = make_reference(&img, 0.5, "arm").unwrap();
        let a37 = estimate_angle(&rotate_grid(&img, 37.0).unwrap(), &r, 0.5).unwrap();
        assert!(circ_diff(a37.degrees, 37.0).unwrap() <= 2.0, "{}", a37.degrees);
        let a180 = estimate_angle(&rotate_grid(&img, 180.0).unwrap(), &r, 0.5).unwrap();
        assert!(circ_diff(a180.degrees, 180.0).unwrap() <= 2.0, "{}", a180.degrees);
        assert_eq!(oracle_angle(&rotate_grid(&img, 90.0).unwrap(), &r).unwrap(), 90);
    }

    #[test]
    fn equivariance_on_fixture() {
        let img = arm_image(SIZE);
        let r = make_reference(&img, 0.5, "arm").unwrap();
        let base = estimate_angle(&img, &r, 0.5).unwrap().degrees;
        for theta in (0..360).step_by(15) {
            let t = theta as f64 + 0.4;
            let got = estimate_angle(&rotate_grid(&img, t).unwrap(), &r, 0.5).unwrap().degrees;
            let want = canonicalize_angle(base + t).unwrap();
            assert!(circ_diff(got, want).unwrap() <= 2.0, "theta {t}: {got} vs {want}");
        }
    }

    #[test]
    fn rotated_samples_are_deterministic() {
        let img = arm_image(32);
        let a = gen_rotated_sample(&img, &mut ChaCha8Rng::seed_from_u64(9));
        let b = gen_rotated_sample(&img, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!((0.0..360.0).contains(&a.label_deg));
        assert_eq!((a.image.width(), a.image.height()), (32, 32));
    }

    #[test]
    fn loss_modes() {
        assert_eq!(angle_loss(37.0, 37.0, LossMode::Literal).unwrap(), 0.0);
        assert_eq!(angle_loss(350.0, 10.0, LossMode::Literal).unwrap(), 340.0);
        assert_eq!(angle_loss(350.0, 10.0, LossMode::Circular).unwrap(), 20.0);
    }

    proptest::proptest! {
        #[test]
        fn circular_loss_never_exceeds_literal(x in -720.0f64..720.0, y in -720.0f64..720.0) {
            let c = angle_loss(x, y, LossMode::Circular).unwrap();
            let l = angle_loss(x, y, LossMode::Literal).unwrap();
            proptest::prop_assert!(c <= l + 1e-9);
        }
    }

    #[test]
    fn descriptor_json_round_trip() {
        let r = make_reference(&arm_image(40), 0.5, "arm.pgm").unwrap();
        let back = ReferenceDescriptor::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn packed_mask_layout_is_msb_first() {
        let mut m = BitMask::new(3, 3);
        m.set(0, 0);
        m.set(2, 2);
        // bits 0 and 8 -> 0b1000_0000, 0b1000_0000
        assert_eq!(m.to_packed_bytes(), vec![0x80, 0x80]);
    }

    #[test]
    fn pgm_round_trip() {
        let img = arm_image(24);
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(GrayGrid::from_pgm(&bytes).unwrap(), img);
    }
}
