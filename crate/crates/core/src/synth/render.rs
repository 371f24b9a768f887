//! Deterministic face rasterizer. Pure f32 arithmetic with a fixed
//! evaluation order, so identical attributes give byte-identical pixels on
//! every platform. All shapes are implicit (ellipses, boxes, a triangle)
//! drawn with one-pixel smoothstep edges.

use super::AttributeVector;
use crate::{Error, Result};
use promptface_tensor::Tensor;

pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [16, 32, 64];

pub const BACKGROUND: [f32; 3] = [0.82, 0.86, 0.90];
pub const SKIN_PALETTE: [[f32; 3]; 4] = [
    [0.96, 0.83, 0.72], // pale
    [0.85, 0.66, 0.50], // tan
    [0.72, 0.57, 0.38], // olive
    [0.45, 0.31, 0.22], // dark
];
pub const HAIR_PALETTE: [[f32; 3]; 6] = [
    [0.08, 0.08, 0.09], // black
    [0.88, 0.78, 0.45], // blond
    [0.42, 0.26, 0.14], // brown
    [0.55, 0.10, 0.08], // red
    [0.62, 0.63, 0.66], // gray
    [0.15, 0.25, 0.80], // blue
];
const EYE: [f32; 3] = [0.07, 0.07, 0.09];
const BROW: [f32; 3] = [0.11, 0.09, 0.06];
const LIP: [f32; 3] = [0.62, 0.25, 0.28];

// Face layout in normalized [0,1] coordinates (u right, v down).
const CY: f32 = 0.54;
const RY: f32 = 0.34;

/// Square RGB image, planar channel layout, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    resolution: usize,
    data: Vec<f32>,
}

impl FaceImage {
    pub fn new(resolution: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * resolution * resolution {
            return Err(Error::invalid(format!(
                "image buffer has {} values, resolution {resolution} needs {}",
                data.len(),
                3 * resolution * resolution
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(FaceImage {
            resolution,
            data: data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(resolution: usize, value: f32) -> Self {
        FaceImage {
            resolution,
            data: vec![value.clamp(0.0, 1.0); 3 * resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.resolution * self.resolution;
        let i = y * self.resolution + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.resolution, self.resolution], self.data.clone())
            .expect("image buffer is finite and sized")
    }

    /// Splits a [N,3,R,R] tensor into per-sample images, clamping to [0,1].
    pub fn from_batch_tensor(t: &Tensor<f32>) -> Result<Vec<FaceImage>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::invalid(format!("expected [N,3,R,R] tensor, got {s:?}")));
        }
        let (n, r) = (s[0], s[2]);
        let plane = 3 * r * r;
        (0..n)
            .map(|i| FaceImage::new(r, t.data()[i * plane..(i + 1) * plane].to_vec()))
            .collect()
    }

    pub fn mse(&self, other: &FaceImage) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::invalid(format!(
                "resolution mismatch: {} vs {}",
                self.resolution, other.resolution
            )));
        }
        let acc: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(acc / self.data.len() as f64)
    }

    pub fn mean_abs_diff(&self, other: &FaceImage) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::invalid("resolution mismatch".to_string()));
        }
        let acc: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((*a - *b) as f64).abs())
            .sum();
        Ok(acc / self.data.len() as f64)
    }

    /// Per-channel pixel variance, averaged over channels.
    pub fn variance(&self) -> f64 {
        let plane = self.resolution * self.resolution;
        let mut total = 0.0;
        for c in 0..3 {
            let ch = &self.data[c * plane..(c + 1) * plane];
            let mean: f64 = ch.iter().map(|v| *v as f64).sum::<f64>() / plane as f64;
            let var: f64 = ch
                .iter()
                .map(|v| {
                    let d = *v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / plane as f64;
            total += var;
        }
        total / 3.0
    }
}

fn smoothstep01(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coverage of a shape from its signed distance (negative = inside),
/// antialiased over `aa` world units.
fn coverage(dist: f32, aa: f32) -> f32 {
    smoothstep01(0.5 - dist / aa)
}

/// Signed distance to an ellipse boundary, approximated radially.
fn ellipse_dist(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let qx = (u - cx) / rx;
    let qy = (v - cy) / ry;
    ((qx * qx + qy * qy).sqrt() - 1.0) * rx.min(ry)
}

/// Signed distance to an axis-aligned box with half-extents (hw, hh).
fn box_dist(u: f32, v: f32, cx: f32, cy: f32, hw: f32, hh: f32) -> f32 {
    ((u - cx).abs() - hw).max((v - cy).abs() - hh)
}

fn lerp3(dst: &mut [f32; 3], color: [f32; 3], t: f32) {
    for c in 0..3 {
        dst[c] += (color[c] - dst[c]) * t;
    }
}

fn darken(dst: &mut [f32; 3], factor: f32, t: f32) {
    for c in 0..3 {
        dst[c] += (dst[c] * factor - dst[c]) * t;
    }
}

/// Van der Corput radical inverse — the deterministic low-discrepancy
/// sequence that places freckles.
fn halton(mut index: u32, base: u32) -> f32 {
    let mut f = 1.0f32;
    let mut r = 0.0f32;
    while index > 0 {
        f /= base as f32;
        r += f * (index % base) as f32;
        index /= base;
    }
    r
}

struct Layout {
    rx: f32,
    jaw: f32,
    hair_bottom: f32,
    hair_pad: f32,
    nose_h: f32,
    nose_w: f32,
    lip_hw: f32,
    lip_hh: f32,
    brow_hh: f32,
    freckles: u32,
}

impl Layout {
    fn of(a: &AttributeVector) -> Layout {
        let g = a.gender as f32;
        let hair_top = (CY - 0.02) - (RY + 0.045);
        Layout {
            rx: 0.24 + 0.10 * a.face_shape,
            jaw: 0.10 + 0.16 * g,
            hair_bottom: hair_top + (0.30 + 0.45 * a.hair_length) * 2.0 * (RY + 0.045),
            hair_pad: 0.045 + 0.04 * a.hair_length,
            nose_h: 0.05 + 0.07 * a.nose_size,
            nose_w: 0.016 + 0.034 * a.nose_size,
            lip_hw: 0.035 + 0.065 * a.lip_size,
            lip_hh: 0.012 + 0.020 * a.lip_size,
            brow_hh: 0.008 + 0.010 * (1.0 - g),
            freckles: (a.micro_density * 24.0).round() as u32,
        }
    }

    /// Face half-width at height v: the jaw narrows below the midline.
    fn rx_at(&self, v: f32) -> f32 {
        if v <= CY {
            self.rx
        } else {
            let s = ((v - CY) / RY).min(1.0);
            self.rx * (1.0 - self.jaw * s * s)
        }
    }

    fn face_dist(&self, u: f32, v: f32) -> f32 {
        ellipse_dist(u, v, 0.5, CY, self.rx_at(v), RY)
    }

    fn hair_dist(&self, u: f32, v: f32) -> f32 {
        // Rim between an outer shell and a lowered inner carve, cut off at
        // hair_bottom; hair_length moves the cutoff down the face sides and
        // thickens the rim laterally.
        let outer = ellipse_dist(u, v, 0.5, CY - 0.02, self.rx + self.hair_pad, RY + 0.045);
        let inner = ellipse_dist(u, v, 0.5, CY + 0.06, self.rx - 0.01, RY - 0.02);
        let band = v - self.hair_bottom;
        outer.max(-inner).max(band)
    }

    fn nose_dist(&self, u: f32, v: f32) -> f32 {
        let apex = CY - 0.01;
        let t = ((v - apex) / self.nose_h).clamp(0.0, 1.0);
        let hw = self.nose_w * t;
        let d_h = (u - 0.5).abs() - hw;
        let d_v = (apex - v).max(v - (apex + self.nose_h));
        d_h.max(d_v)
    }
}

/// Rasterizes an attribute vector. Deterministic: no RNG, no tables beyond
/// the fixed palettes, fixed pixel evaluation order.
pub fn render_face(attrs: &AttributeVector, resolution: usize) -> Result<FaceImage> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::invalid(format!(
            "unsupported resolution {resolution} (expected one of {SUPPORTED_RESOLUTIONS:?})"
        )));
    }
    attrs.validate(usize::MAX)?;
    let lay = Layout::of(attrs);
    let skin = SKIN_PALETTE[attrs.skin_color];
    let hair = HAIR_PALETTE[attrs.hair_color];
    let aa = 1.0 / resolution as f32;

    let plane = resolution * resolution;
    let mut out = vec![0.0f32; 3 * plane];
    for y in 0..resolution {
        let v = (y as f32 + 0.5) * aa;
        for x in 0..resolution {
            let u = (x as f32 + 0.5) * aa;
            let mut px = BACKGROUND;

            let face_cov = coverage(lay.face_dist(u, v), aa);
            lerp3(&mut px, skin, face_cov);
            lerp3(&mut px, hair, coverage(lay.hair_dist(u, v), aa));

            // Age lines: two forehead creases and one under-eye crease,
            // fading in with age, confined to the face.
            let age_t = 0.45 * attrs.age * face_cov;
            for line_v in [CY - 0.155, CY - 0.120, CY + 0.120] {
                let d = box_dist(u, v, 0.5, line_v, 0.16, 0.006);
                darken(&mut px, 0.55, age_t * coverage(d, aa));
            }

            for side in [-1.0f32, 1.0] {
                let ex = 0.5 + side * 0.095;
                let brow = box_dist(u, v, ex, CY - 0.13, 0.048, lay.brow_hh);
                lerp3(&mut px, BROW, coverage(brow, aa));
                let eye = ellipse_dist(u, v, ex, CY - 0.08, 0.034, 0.022);
                lerp3(&mut px, EYE, coverage(eye, aa));
            }

            darken(&mut px, 0.74, coverage(lay.nose_dist(u, v), aa));
            lerp3(&mut px, LIP, coverage(box_dist(u, v, 0.5, CY + 0.175, lay.lip_hw, lay.lip_hh), aa));

            // Freckles on fixed low-discrepancy cheek positions.
            for k in 1..=lay.freckles {
                let side = if k % 2 == 1 { -1.0 } else { 1.0 };
                let fu = 0.5 + side * (0.05 + 0.11 * halton(k, 2));
                let fv = CY + 0.015 + 0.085 * halton(k, 3);
                let d = ((u - fu) * (u - fu) + (v - fv) * (v - fv)).sqrt() - 0.009;
                darken(&mut px, 0.62, coverage(d, aa));
            }

            let i = y * resolution + x;
            out[i] = px[0].clamp(0.0, 1.0);
            out[plane + i] = px[1].clamp(0.0, 1.0);
            out[2 * plane + i] = px[2].clamp(0.0, 1.0);
        }
    }
    FaceImage::new(resolution, out)
}

/// Pixels strictly inside the hair region (a safety margin away from the
/// antialiased boundary), row-major. Lets tests measure hair color directly.
pub fn hair_mask(attrs: &AttributeVector, resolution: usize) -> Result<Vec<bool>> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::invalid(format!("unsupported resolution {resolution}")));
    }
    let lay = Layout::of(attrs);
    let aa = 1.0 / resolution as f32;
    let margin = 1.5 * aa;
    let mut mask = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        let v = (y as f32 + 0.5) * aa;
        for x in 0..resolution {
            let u = (x as f32 + 0.5) * aa;
            mask.push(lay.hair_dist(u, v) <= -margin);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_attrs() -> AttributeVector {
        AttributeVector {
            identity_id: 0,
            face_shape: 0.5,
            hair_length: 0.5,
            nose_size: 0.5,
            lip_size: 0.5,
            hair_color: 0,
            skin_color: 1,
            age: 0.2,
            gender: 1,
            micro_density: 0.3,
        }
    }

    #[test]
    fn identical_attributes_render_identical_pixels() {
        let a = render_face(&base_attrs(), 32).unwrap();
        let b = render_face(&base_attrs(), 32).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn unsupported_resolution_is_an_error() {
        assert!(render_face(&base_attrs(), 24).is_err());
        for r in SUPPORTED_RESOLUTIONS {
            render_face(&base_attrs(), r).unwrap();
        }
    }

    #[test]
    fn red_hair_mask_is_red_dominant() {
        let mut attrs = base_attrs();
        attrs.hair_color = 3;
        let img = render_face(&attrs, 32).unwrap();
        let mask = hair_mask(&attrs, 32).unwrap();
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 10, "hair mask too small: {count}");
        let mut mean = [0.0f64; 3];
        for (i, &m) in mask.iter().enumerate() {
            if m {
                let px = img.pixel(i % 32, i / 32);
                for c in 0..3 {
                    mean[c] += px[c] as f64;
                }
            }
        }
        assert!(mean[0] > mean[1] && mean[0] > mean[2], "hair mean {mean:?}");
    }

    #[test]
    fn hair_length_extends_the_mask() {
        let mut short = base_attrs();
        short.hair_length = 0.0;
        let mut long = base_attrs();
        long.hair_length = 1.0;
        let mask = |a: &AttributeVector| hair_mask(a, 64).unwrap();
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        let lowest_row = |m: &[bool]| {
            (0..64).rev().find(|y| (0..64).any(|x| m[y * 64 + x])).unwrap_or(0)
        };
        let (short, long) = (mask(&short), mask(&long));
        // Vertical extent is affine in hair_length: full-length hair reaches
        // far below the short cut, and covers clearly more pixels overall.
        assert!(lowest_row(&long) >= lowest_row(&short) + 16);
        assert!(count(&long) as f64 > count(&short) as f64 * 1.5);
    }

    #[test]
    fn distinct_identities_render_different_pixels() {
        let a = base_attrs();
        let mut b = base_attrs();
        b.identity_id = 1;
        b.face_shape = 0.9; // a different base geometry
        let ia = render_face(&a, 32).unwrap();
        let ib = render_face(&b, 32).unwrap();
        assert!(ia.mean_abs_diff(&ib).unwrap() > 0.0);
    }

    #[test]
    fn out_of_range_attributes_are_rejected() {
        let mut a = base_attrs();
        a.age = 1.5;
        assert!(render_face(&a, 32).is_err());
        let mut a = base_attrs();
        a.hair_color = 6;
        assert!(render_face(&a, 32).is_err());
    }

    #[test]
    fn age_darkens_forehead_lines() {
        let mut young = base_attrs();
        young.age = 0.0;
        let mut old = base_attrs();
        old.age = 1.0;
        let iy = render_face(&young, 64).unwrap();
        let io = render_face(&old, 64).unwrap();
        assert!(iy.mean_abs_diff(&io).unwrap() > 1e-4);
    }

    #[test]
    fn batch_tensor_round_trip() {
        let img = render_face(&base_attrs(), 16).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 16, 16]);
        let back = FaceImage::from_batch_tensor(&t).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], img);
    }
}
